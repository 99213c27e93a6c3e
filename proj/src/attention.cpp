#include "ensa/attention.hpp"

#include <algorithm>
#include <cstdlib>
#include <memory>
#include <numeric>

namespace ensa {

namespace {
std::atomic<int> g_threads{1};
}  // namespace

bool deterministic_mode() {
  const char* v = std::getenv("ENSA_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

void set_num_threads(int n) { g_threads.store(std::max(1, n)); }

int num_threads() { return deterministic_mode() ? 1 : g_threads.load(); }

HeadsConfig HeadsConfig::from_hidden(Index hidden, Index heads) {
  if (heads < 1 || hidden < 1 || hidden % heads != 0) {
    throw ValueError("hidden width " + std::to_string(hidden) + " is not divisible by " +
                     std::to_string(heads) + " heads");
  }
  return HeadsConfig{heads, hidden / heads};
}

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::Compressed: return "cmp";
    case Branch::Selected: return "sel";
    case Branch::Local: return "loc";
  }
  return "?";
}

void init_attention_params(ParamStore& store, const std::string& prefix, Index hidden,
                           Index heads, Index bias_hidden, Rng& rng) {
  HeadsConfig::from_hidden(hidden, heads);
  for (Branch b : {Branch::Compressed, Branch::Selected, Branch::Local}) {
    const std::string p = prefix + "." + branch_name(b) + ".";
    store.create(p + "wq", random_weight(hidden, hidden, rng));
    store.create(p + "wk", random_weight(hidden, hidden, rng));
    store.create(p + "wv", random_weight(hidden, hidden, rng));
  }
  store.create(prefix + ".cmp.wck", random_weight(hidden, hidden, rng));
  store.create(prefix + ".cmp.wcv", random_weight(hidden, hidden, rng));
  add_mlp2_params(store, prefix + ".loc.bias", 3, bias_hidden, heads, rng);
  store.create(prefix + ".gate.w", random_weight(hidden, 3, rng));
  store.create(prefix + ".gate.b", Matrix::Zero(1, 3));
  store.create(prefix + ".wo", random_weight(hidden, hidden, rng));
}

Projections project_qkv(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                        Branch branch) {
  const std::string p = prefix + "." + branch_name(branch) + ".";
  return Projections{matmul(x, g.param(store, p + "wq")), matmul(x, g.param(store, p + "wk")),
                     matmul(x, g.param(store, p + "wv"))};
}

CompressedKV compress_balls(Graph& g, ParamStore& store, const std::string& prefix, Var K, Var V,
                            const BallTree& tree) {
  const Index c = tree.compressed_size;
  if (K.rows() != tree.n_padded || V.rows() != tree.n_padded) {
    throw ShapeError("compress_balls: K " + shape_str(K.value()) + " / V " +
                     shape_str(V.value()) + " for a tree of " + std::to_string(tree.n_padded) +
                     " slots");
  }
  const Index balls = tree.compressed_ball_count();
  CompressedKV out;
  out.ball_mask = Mask::Constant(balls, false);
  out.centroids = Matrix::Zero(balls, 3);
  for (Index b = 0; b < balls; ++b) {
    Index count = 0;
    for (Index s = b * c; s < (b + 1) * c; ++s) {
      if (!tree.mask(s)) continue;
      out.centroids.row(b) += tree.positions.row(s);
      ++count;
    }
    if (count > 0) {
      out.centroids.row(b) /= static_cast<double>(count);
      out.ball_mask(b) = true;
    }
  }
  out.k = matmul(segment_mean_rows(K, c, tree.mask), g.param(store, prefix + ".cmp.wck"));
  out.v = matmul(segment_mean_rows(V, c, tree.mask), g.param(store, prefix + ".cmp.wcv"));
  return out;
}

namespace {

using AccessMap = std::map<std::pair<Index, Index>, double>;

struct ProbCapture {
  Matrix* scores = nullptr;
  std::vector<Matrix>* head_probs = nullptr;
  AccessMap* access = nullptr;
  double inv_heads = 1.0;

  void operator()(Index i, Index h, Index key, double p) const {
    if (scores) (*scores)(i, key) += p;
    if (head_probs) (*head_probs)[static_cast<std::size_t>(h)](i, key) = p;
    if (access) (*access)[{i, key}] += p * inv_heads;
  }
};

std::vector<AccessEntry> flatten(const AccessMap& map, Branch branch) {
  std::vector<AccessEntry> out;
  out.reserve(map.size());
  for (const auto& [key, w] : map) out.push_back({branch, key.first, key.second, w});
  return out;
}

template <typename KeysFn>
Var fused_attention(std::string label, Var Q, Var K, Var V, Var bias, Index bias_stride,
                    Index heads, Mask key_mask, KeysFn keys, const ProbCapture& capture) {
  const auto& q = Q.value();
  if (K.cols() != q.cols() || V.cols() != q.cols() || K.rows() != V.rows()) {
    throw ShapeError(label + ": Q " + shape_str(q) + ", K " + shape_str(K.value()) + ", V " +
                     shape_str(V.value()) + " are inconsistent");
  }
  if (heads < 1 || q.cols() % heads != 0) {
    throw ShapeError(label + ": width " + std::to_string(q.cols()) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (key_mask.size() != K.rows()) {
    throw ShapeError(label + ": key mask of length " + std::to_string(key_mask.size()) +
                     " for " + std::to_string(K.rows()) + " keys");
  }
  if (bias.valid() && (bias.rows() != q.rows() * bias_stride || bias.cols() != heads)) {
    throw ShapeError(label + ": bias " + shape_str(bias.value()) + ", expected " +
                     shape_str(q.rows() * bias_stride, heads));
  }
  Graph& g = Q.graph();
  auto stats = std::make_shared<SoftmaxStats<double>>();
  Matrix out;
  const bool serial = capture.access != nullptr;
  attention_forward<double>(q, K.value(), V.value(), heads, key_mask, keys,
                            bias.valid() ? &bias.value() : nullptr, bias_stride, out,
                            g.grad_enabled() ? stats.get() : nullptr, capture, !serial);
  std::vector<Var> inputs{Q, K, V};
  const bool has_bias = bias.valid();
  if (has_bias) inputs.push_back(bias);
  return g.record(OpKind::Fused, std::move(label), std::move(inputs), std::move(out),
                  [=](BackwardContext& ctx) {
                    attention_backward<double>(
                        ctx.in_value(0), ctx.in_value(1), ctx.in_value(2), heads, key_mask, keys,
                        has_bias ? &ctx.in_value(3) : nullptr, bias_stride, *stats,
                        ctx.out_grad(), ctx.needs_grad(0) ? &ctx.in_grad(0) : nullptr,
                        ctx.needs_grad(1) ? &ctx.in_grad(1) : nullptr,
                        ctx.needs_grad(2) ? &ctx.in_grad(2) : nullptr,
                        has_bias && ctx.needs_grad(3) ? &ctx.in_grad(3) : nullptr);
                  });
}

}  // namespace

BranchOutput compressed_attention(Var Q, Var K_cmp, Var V_cmp, const Mask& ball_mask,
                                  Index heads, bool keep_head_probs, bool record_access) {
  const Index balls = K_cmp.rows();
  if (ball_mask.size() != balls) {
    throw ShapeError("compressed_attention: ball mask of length " +
                     std::to_string(ball_mask.size()) + " for " + std::to_string(balls) +
                     " compressed tokens");
  }
  if (!ball_mask.any()) throw ValueError("compressed_attention: every compressed ball is masked");
  BranchOutput result;
  result.scores = Matrix::Zero(Q.rows(), balls);
  AccessMap access;
  ProbCapture capture{&result.scores, nullptr, record_access ? &access : nullptr,
                      1.0 / static_cast<double>(heads)};
  if (keep_head_probs) {
    result.probs.assign(static_cast<std::size_t>(heads), Matrix::Zero(Q.rows(), balls));
    capture.head_probs = &result.probs;
  }
  auto keys = [balls](Index, std::vector<KeyRange>& out) { out.push_back({0, balls}); };
  result.values = fused_attention("compressed_attention", Q, K_cmp, V_cmp, Var(), 0, heads,
                                  ball_mask, keys, capture);
  if (record_access) result.access = flatten(access, Branch::Compressed);
  return result;
}

std::vector<int> own_balls(const BallTree& tree) {
  std::vector<int> own(static_cast<std::size_t>(tree.n_padded));
  for (Index s = 0; s < tree.n_padded; ++s) {
    own[static_cast<std::size_t>(s)] = static_cast<int>(s / tree.compressed_size);
  }
  return own;
}

Selection select_topk(const Matrix& scores, Index k, const std::vector<int>& own_ball) {
  const Index balls = scores.cols();
  if (k < 1 || k > balls) {
    throw ValueError("select_topk: k=" + std::to_string(k) + " but there are " +
                     std::to_string(balls) + " balls");
  }
  if (static_cast<Index>(own_ball.size()) != scores.rows()) {
    throw ShapeError("select_topk: " + std::to_string(own_ball.size()) + " own-ball entries for " +
                     std::to_string(scores.rows()) + " queries");
  }
  Selection sel;
  sel.indices.resize(scores.rows(), k);
  std::vector<int> order(static_cast<std::size_t>(balls));
  for (Index i = 0; i < scores.rows(); ++i) {
    const int own = own_ball[static_cast<std::size_t>(i)];
    if (own < 0 || own >= balls) throw ValueError("select_topk: own ball out of range");
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      const double sa = scores(i, a), sb = scores(i, b);
      return sa > sb || (sa == sb && a < b);
    });
    if (std::find(order.begin(), order.begin() + k, own) == order.begin() + k) {
      order[static_cast<std::size_t>(k - 1)] = own;
    }
    std::sort(order.begin(), order.begin() + k);
    for (Index j = 0; j < k; ++j) sel.indices(i, j) = order[static_cast<std::size_t>(j)];
  }
  return sel;
}

Selection select_topk(const std::vector<Matrix>& head_probs, Index k,
                      const std::vector<int>& own_ball) {
  if (head_probs.empty()) throw ValueError("select_topk: no heads");
  Matrix scores = Matrix::Zero(head_probs.front().rows(), head_probs.front().cols());
  for (const Matrix& p : head_probs) {
    if (p.rows() != scores.rows() || p.cols() != scores.cols()) {
      throw ShapeError("select_topk: head probability shapes differ");
    }
    scores += p;
  }
  return select_topk(scores, k, own_ball);
}

BranchOutput selected_attention(Var Q, Var K, Var V, const Selection& selection,
                                const BallTree& tree, Index heads, bool record_access) {
  const Index c = tree.compressed_size;
  if (Q.rows() != tree.n_padded || K.rows() != tree.n_padded ||
      selection.indices.rows() != tree.n_padded) {
    throw ShapeError("selected_attention: Q " + shape_str(Q.value()) + ", K " +
                     shape_str(K.value()) + ", selection " +
                     shape_str(selection.indices.rows(), selection.indices.cols()) +
                     " for a tree of " + std::to_string(tree.n_padded) + " slots");
  }
  const Index balls = tree.compressed_ball_count();
  if ((selection.indices.array() < 0).any() || (selection.indices.array() >= balls).any()) {
    throw ValueError("selected_attention: selection refers to a ball outside the tree");
  }
  auto keys = [idx = selection.indices, c](Index i, std::vector<KeyRange>& out) {
    for (Index j = 0; j < idx.cols(); ++j) out.push_back({idx(i, j) * c, c});
  };
  AccessMap access;
  ProbCapture capture{nullptr, nullptr, record_access ? &access : nullptr,
                      1.0 / static_cast<double>(heads)};
  BranchOutput result;
  result.values =
      fused_attention("selected_attention", Q, K, V, Var(), 0, heads, tree.mask, keys, capture);
  if (record_access) result.access = flatten(access, Branch::Selected);
  return result;
}

BranchOutput ball_attention(Var Q, Var K, Var V, Var bias, const BallTree& tree, Index heads,
                            bool record_access) {
  const Index m = tree.local_size;
  if (Q.rows() != tree.n_padded || K.rows() != tree.n_padded || tree.n_padded % m != 0) {
    throw ShapeError("ball_attention: Q " + shape_str(Q.value()) + ", K " + shape_str(K.value()) +
                     " for a tree of " + std::to_string(tree.n_padded) + " slots, ball size " +
                     std::to_string(m));
  }
  auto keys = [m](Index i, std::vector<KeyRange>& out) { out.push_back({(i / m) * m, m}); };
  AccessMap access;
  ProbCapture capture{nullptr, nullptr, record_access ? &access : nullptr,
                      1.0 / static_cast<double>(heads)};
  BranchOutput result;
  result.values =
      fused_attention("local_attention", Q, K, V, bias, m, heads, tree.mask, keys, capture);
  if (record_access) result.access = flatten(access, Branch::Local);
  return result;
}

Matrix local_offsets(const BallTree& tree) {
  const Index m = tree.local_size;
  Matrix off(tree.n_padded * m, 3);
  for (Index i = 0; i < tree.n_padded; ++i) {
    const Index start = (i / m) * m;
    for (Index t = 0; t < m; ++t) {
      off.row(i * m + t) = tree.positions.row(i) - tree.positions.row(start + t);
    }
  }
  return off;
}

BranchOutput local_attention(Graph& g, ParamStore& store, const std::string& prefix, Var Q, Var K,
                             Var V, const BallTree& tree, Index heads, bool record_access) {
  Var offsets = g.input(local_offsets(tree), false, "local offsets");
  Var bias = mlp2(g, store, offsets, prefix + ".loc.bias");
  return ball_attention(Q, K, V, bias, tree, heads, record_access);
}

Var gate_combine(Graph& g, ParamStore& store, const std::string& prefix, Var x, Var compressed,
                 Var selected, Var local, bool use_compressed, Matrix* gates_out) {
  for (const Var& b : {compressed, selected, local}) {
    if (b.rows() != x.rows() || b.cols() != x.cols()) {
      throw ShapeError("gate_combine: branch output " + shape_str(b.value()) + " for input " +
                       shape_str(x.value()));
    }
  }
  Var gates = sigmoid(dense(g, store, x, prefix + ".gate.w", prefix + ".gate.b"));
  if (gates_out) *gates_out = gates.value();
  Var sum = add(row_scale(selected, slice_cols(gates, 1, 1)),
                row_scale(local, slice_cols(gates, 2, 1)));
  if (use_compressed) sum = add(row_scale(compressed, slice_cols(gates, 0, 1)), sum);
  return matmul(sum, g.param(store, prefix + ".wo"));
}

Var nsa_attention(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                  const BallTree& tree, const AttentionOptions& options, AttentionTrace* trace) {
  if (x.rows() != tree.n_padded) {
    throw ShapeError("nsa_attention: input " + shape_str(x.value()) + " for a tree of " +
                     std::to_string(tree.n_padded) + " slots");
  }
  const Index heads = HeadsConfig::from_hidden(x.cols(), options.heads).heads;
  const bool record = trace != nullptr && trace->record_access;

  if (options.local_only) {
    Projections loc = project_qkv(g, store, prefix, x, Branch::Local);
    BranchOutput out = local_attention(g, store, prefix, loc.q, loc.k, loc.v, tree, heads, record);
    if (trace) trace->access = std::move(out.access);
    return matmul(out.values, g.param(store, prefix + ".wo"));
  }

  Projections cmp = project_qkv(g, store, prefix, x, Branch::Compressed);
  CompressedKV compressed = compress_balls(g, store, prefix, cmp.k, cmp.v, tree);
  BranchOutput cmp_out = compressed_attention(cmp.q, compressed.k, compressed.v,
                                              compressed.ball_mask, heads, trace != nullptr, record);
  Selection selection = select_topk(cmp_out.scores, options.top_k, own_balls(tree));

  Projections sel = project_qkv(g, store, prefix, x, Branch::Selected);
  BranchOutput sel_out = selected_attention(sel.q, sel.k, sel.v, selection, tree, heads, record);

  Projections loc = project_qkv(g, store, prefix, x, Branch::Local);
  BranchOutput loc_out = local_attention(g, store, prefix, loc.q, loc.k, loc.v, tree, heads, record);

  Matrix gates;
  Var out = gate_combine(g, store, prefix, x, cmp_out.values, sel_out.values, loc_out.values,
                         options.use_compressed_in_sum, trace ? &gates : nullptr);
  if (trace) {
    trace->compressed_probs = std::move(cmp_out.probs);
    trace->selection = std::move(selection);
    trace->gates = std::move(gates);
    trace->centroids = std::move(compressed.centroids);
    trace->access.clear();
    for (auto* part : {&cmp_out.access, &sel_out.access, &loc_out.access}) {
      trace->access.insert(trace->access.end(), part->begin(), part->end());
    }
  }
  return out;
}

std::uint64_t expected_score_count(Index n_padded, Index compressed_size, Index top_k,
                                   Index local_size, bool local_only) {
  const auto n = static_cast<std::uint64_t>(n_padded);
  const auto m = static_cast<std::uint64_t>(local_size);
  if (local_only) return n * m;
  const auto c = static_cast<std::uint64_t>(compressed_size);
  const auto k = static_cast<std::uint64_t>(top_k);
  return n * (n / c + k * c + m);
}

}  // namespace ensa
