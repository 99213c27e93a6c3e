#pragma once

#include "ensa/attention.hpp"
#include "ensa/balltree.hpp"
#include "ensa/embedder.hpp"
#include "ensa/graph.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ensa {

struct NsaConfig {
  Index local_size = 128;      // m
  Index compressed_size = 32;  // c
  Index top_k = 16;            // selected balls
  Index depth = 4;
  Index hidden = 64;
  Index heads = 4;
  Index mlp_ratio = 4;
  Index knn_k = 8;
  Index bias_hidden = 16;
  Index in_features = 3;
  Index out_features = 3;
  std::uint64_t seed = 0;
  bool use_compressed_in_sum = true;
  bool local_only = false;

  // Throws ValueError naming the first violated constraint. depth 0 is allowed.
  void validate() const;

  static NsaConfig cosmology();
  static NsaConfig molecular_dynamics();
  static NsaConfig shapenet();
};

// Everything about one cloud that does not depend on parameters.
struct PreparedCloud {
  Index n = 0;
  KnnGraph knn;
  TreeSet trees;

  const BallTree& tree_for_block(Index block) const { return block % 2 == 0 ? trees.main : trees.rotated; }
};

// Pre-norm block with two residual additions:
//   y = x + nsa_attention(ln1(x)),  z = y + mlp(ln2(y)).
Var block_forward(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                  const BallTree& tree, const AttentionOptions& options,
                  AttentionTrace* trace = nullptr);

void init_block_params(ParamStore& store, const std::string& prefix, const NsaConfig& config,
                       Rng& rng);

// Embedder -> depth blocks (even blocks on the main tree, odd ones on the
// rotated tree) -> linear readout.
class NsaModel {
public:
  explicit NsaModel(NsaConfig config);
  NsaModel(NsaConfig config, ParamStore params);

  const NsaConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const Eigen::Matrix3d& rotation() const { return rotation_; }

  PreparedCloud prepare(const PointCloud& cloud) const;
  AttentionOptions attention_options(const BallTree& tree) const;

  // features: n x in_features (pass a leaf Var to differentiate w.r.t. inputs).
  // traces is resized to depth; access is recorded in every block when the
  // first incoming trace asks for it.
  Var forward(Graph& g, const PreparedCloud& prepared, Var features,
              std::vector<AttentionTrace>* traces = nullptr);

  Matrix predict(const PointCloud& cloud);
  Matrix predict(const PointCloud& cloud, const PreparedCloud& prepared);

private:
  NsaConfig config_;
  ParamStore params_;
  Eigen::Matrix3d rotation_;
};

// Mean over all entries of (pred - target)^2.
Var mse_loss(Var pred, Var target);
double mse(const Matrix& pred, const Matrix& target);

}  // namespace ensa
