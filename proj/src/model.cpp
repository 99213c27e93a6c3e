#include "ensa/model.hpp"

#include <algorithm>

namespace ensa {

void NsaConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValueError("invalid model config: " + msg); };
  if (!is_power_of_two(local_size)) fail("local ball size must be a power of two");
  if (!is_power_of_two(compressed_size)) fail("compressed ball size must be a power of two");
  if (top_k < 1) fail("top_k must be >= 1");
  if (depth < 0) fail("depth must be >= 0");
  if (hidden < 1 || heads < 1 || hidden % heads != 0) fail("hidden must be divisible by heads");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (knn_k < 0) fail("knn_k must be >= 0");
  if (bias_hidden < 1) fail("bias_hidden must be >= 1");
  if (in_features < 1) fail("in_features must be >= 1");
  if (out_features < 1) fail("out_features must be >= 1");
}

NsaConfig NsaConfig::cosmology() {
  NsaConfig c;
  c.local_size = 128;
  c.compressed_size = 32;
  c.top_k = 16;
  c.depth = 4;
  c.hidden = 64;
  return c;
}

NsaConfig NsaConfig::molecular_dynamics() {
  NsaConfig c;
  c.local_size = 32;
  c.compressed_size = 32;
  c.top_k = 16;
  c.depth = 2;
  c.hidden = 128;
  return c;
}

NsaConfig NsaConfig::shapenet() {
  NsaConfig c;
  c.local_size = 128;
  c.compressed_size = 32;
  c.top_k = 16;
  c.depth = 6;
  c.hidden = 64;
  return c;
}

void init_block_params(ParamStore& store, const std::string& prefix, const NsaConfig& config,
                       Rng& rng) {
  const Index h = config.hidden;
  store.create(prefix + ".ln1.g", Matrix::Ones(1, h));
  store.create(prefix + ".ln1.b", Matrix::Zero(1, h));
  init_attention_params(store, prefix, h, config.heads, config.bias_hidden, rng);
  store.create(prefix + ".ln2.g", Matrix::Ones(1, h));
  store.create(prefix + ".ln2.b", Matrix::Zero(1, h));
  add_mlp2_params(store, prefix + ".mlp", h, config.mlp_ratio * h, h, rng);
}

Var block_forward(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                  const BallTree& tree, const AttentionOptions& options, AttentionTrace* trace) {
  Var normed = layer_norm(x, g.param(store, prefix + ".ln1.g"), g.param(store, prefix + ".ln1.b"));
  Var y = add(x, nsa_attention(g, store, prefix, normed, tree, options, trace));
  Var normed2 = layer_norm(y, g.param(store, prefix + ".ln2.g"), g.param(store, prefix + ".ln2.b"));
  return add(y, mlp2(g, store, normed2, prefix + ".mlp"));
}

NsaModel::NsaModel(NsaConfig config) : config_(std::move(config)), rotation_(default_rotation()) {
  config_.validate();
  Rng rng(config_.seed);
  init_embedder_params(params_, config_.in_features, config_.hidden, rng);
  for (Index b = 0; b < config_.depth; ++b) {
    init_block_params(params_, "blk" + std::to_string(b), config_, rng);
  }
  params_.create("readout.w", random_weight(config_.hidden, config_.out_features, rng));
  params_.create("readout.b", Matrix::Zero(1, config_.out_features));
}

NsaModel::NsaModel(NsaConfig config, ParamStore params) : NsaModel(std::move(config)) {
  if (params.names() != params_.names()) {
    throw ValueError("parameter file does not match the model configuration");
  }
  for (const std::string& name : params_.names()) params_.set(name, params.value(name));
}

PreparedCloud NsaModel::prepare(const PointCloud& cloud) const {
  cloud.validate();
  if (cloud.feature_dim() != config_.in_features) {
    throw ShapeError("cloud has " + std::to_string(cloud.feature_dim()) +
                     " feature columns, model expects " + std::to_string(config_.in_features));
  }
  PreparedCloud p;
  p.n = cloud.size();
  p.knn = build_knn_graph(cloud.positions, std::min<Index>(config_.knn_k, cloud.size() - 1));
  p.trees = build_tree_set(cloud, config_.local_size, config_.compressed_size, rotation_);
  return p;
}

AttentionOptions NsaModel::attention_options(const BallTree& tree) const {
  AttentionOptions o;
  o.heads = config_.heads;
  o.top_k = std::min<Index>(config_.top_k, tree.compressed_ball_count());
  o.use_compressed_in_sum = config_.use_compressed_in_sum;
  o.local_only = config_.local_only;
  return o;
}

Var NsaModel::forward(Graph& g, const PreparedCloud& prepared, Var features,
                      std::vector<AttentionTrace>* traces) {
  if (features.cols() != config_.in_features || features.rows() != prepared.n) {
    throw ShapeError("model forward: features " + shape_str(features.value()) + ", expected " +
                     shape_str(prepared.n, config_.in_features));
  }
  Var x = mpnn_embed(g, params_, features, prepared.knn);
  if (traces) {
    const bool record = !traces->empty() && traces->front().record_access;
    traces->assign(static_cast<std::size_t>(config_.depth), AttentionTrace{});
    for (AttentionTrace& t : *traces) t.record_access = record;
  }
  for (Index b = 0; b < config_.depth; ++b) {
    const BallTree& tree = prepared.tree_for_block(b);
    const std::vector<int> slots = tree.slot_index();
    Var xt = gather_rows(x, slots);
    AttentionTrace* trace = traces ? &(*traces)[static_cast<std::size_t>(b)] : nullptr;
    Var yt = block_forward(g, params_, "blk" + std::to_string(b), xt, tree,
                           attention_options(tree), trace);
    x = scatter_add_rows(yt, slots, prepared.n);
  }
  return dense(g, params_, x, "readout.w", "readout.b");
}

Matrix NsaModel::predict(const PointCloud& cloud) { return predict(cloud, prepare(cloud)); }

Matrix NsaModel::predict(const PointCloud& cloud, const PreparedCloud& prepared) {
  Graph g(Graph::Mode::Inference);
  Var features = g.input(cloud.features, false, "features");
  return forward(g, prepared, features).value();
}

Var mse_loss(Var pred, Var target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("mse_loss: prediction " + shape_str(pred.value()) + " vs target " +
                     shape_str(target.value()));
  }
  return mean_all(square(sub(pred, target)));
}

double mse(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("mse: prediction " + shape_str(pred) + " vs target " + shape_str(target));
  }
  return (pred - target).array().square().mean();
}

}  // namespace ensa
