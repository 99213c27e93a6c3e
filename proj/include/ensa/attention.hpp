#pragma once

#include "ensa/attention_kernels.hpp"
#include "ensa/balltree.hpp"
#include "ensa/graph.hpp"
#include "ensa/layers.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace ensa {

struct HeadsConfig {
  Index heads = 1;
  Index head_dim = 1;

  Index hidden() const { return heads * head_dim; }
  // Throws unless hidden is a positive multiple of heads.
  static HeadsConfig from_hidden(Index hidden, Index heads);
};

enum class Branch { Compressed = 0, Selected = 1, Local = 2 };
const char* branch_name(Branch b);  // "cmp", "sel", "loc"

// Per query slot, the compressed balls whose leaves the selected branch reads.
struct Selection {
  IndexMatrix indices;  // n_padded x k, strictly increasing per row
  bool includes_own = true;

  Index top_k() const { return indices.cols(); }
};

struct Projections {
  Var q, k, v;
};

struct CompressedKV {
  Var k;             // balls x H
  Var v;             // balls x H
  Matrix centroids;  // balls x 3, masked mean of slot positions
  Mask ball_mask;    // ball holds at least one real point
};

struct AccessEntry {
  Branch branch;
  Index query;  // slot
  Index key;    // ball index for Compressed, slot otherwise
  double weight;  // probability averaged over heads
};

struct BranchOutput {
  Var values;  // n_padded x H
  // Compressed branch only: per head, n_padded x balls probabilities.
  std::vector<Matrix> probs;
  // Compressed branch only: probabilities summed over heads.
  Matrix scores;
  // Filled when access recording is requested.
  std::vector<AccessEntry> access;
};

struct AttentionOptions {
  Index heads = 1;
  Index top_k = 1;
  bool use_compressed_in_sum = true;
  // Ablation: only the local branch, output = local W_o.
  bool local_only = false;
};

// Optional diagnostics from nsa_attention.
struct AttentionTrace {
  bool record_access = false;
  std::vector<Matrix> compressed_probs;
  Selection selection;
  Matrix gates;
  Matrix centroids;
  std::vector<AccessEntry> access;
};

// Parameter names under `prefix` (e.g. "blk0"):
//   {cmp,sel,loc}.{wq,wk,wv}, cmp.{wck,wcv}, loc.bias.{w1,b1,w2,b2},
//   gate.{w,b}, wo.
void init_attention_params(ParamStore& store, const std::string& prefix, Index hidden,
                           Index heads, Index bias_hidden, Rng& rng);

Projections project_qkv(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                        Branch branch);

// Masked mean of K and V rows over each compressed ball followed by the
// learned maps cmp.wck / cmp.wcv. Balls with no real slot give zero rows and
// a false ball_mask entry.
CompressedKV compress_balls(Graph& g, ParamStore& store, const std::string& prefix, Var K, Var V,
                            const BallTree& tree);

// Every query attends to every unmasked compressed token. Throws when all
// balls are masked. Probabilities are kept for selection.
BranchOutput compressed_attention(Var Q, Var K_cmp, Var V_cmp, const Mask& ball_mask,
                                  Index heads, bool keep_head_probs = false,
                                  bool record_access = false);

// Top-k balls by score (ties to the lower ball index); the query's own ball
// replaces the last pick when it is missing. Rows come out sorted ascending.
Selection select_topk(const Matrix& scores, Index k, const std::vector<int>& own_ball);
// Scores are the per-head probabilities summed in head order.
Selection select_topk(const std::vector<Matrix>& head_probs, Index k,
                      const std::vector<int>& own_ball);

// Own compressed ball of every slot.
std::vector<int> own_balls(const BallTree& tree);

// Full attention over the leaf slots of each query's selected balls.
BranchOutput selected_attention(Var Q, Var K, Var V, const Selection& selection,
                                const BallTree& tree, Index heads, bool record_access = false);

// Attention inside each local ball with an additive per-head bias laid out
// as (n_padded * m) x heads, row i*m + t for key slot ball_start(i) + t.
// An invalid bias Var means no bias.
BranchOutput ball_attention(Var Q, Var K, Var V, Var bias, const BallTree& tree, Index heads,
                            bool record_access = false);

// (n_padded * m) x 3 offsets p_i - p_j for every query i and slot j of its local ball.
Matrix local_offsets(const BallTree& tree);

// ball_attention with the bias produced by the loc.bias perceptron on local_offsets().
BranchOutput local_attention(Graph& g, ParamStore& store, const std::string& prefix, Var Q, Var K,
                             Var V, const BallTree& tree, Index heads, bool record_access = false);

// sigmoid(x gate.w + gate.b) blends the three branches per query, then wo.
// With use_compressed false the compressed term is left out of the sum.
Var gate_combine(Graph& g, ParamStore& store, const std::string& prefix, Var x, Var compressed,
                 Var selected, Var local, bool use_compressed = true, Matrix* gates_out = nullptr);

Var nsa_attention(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                  const BallTree& tree, const AttentionOptions& options,
                  AttentionTrace* trace = nullptr);

// n_padded * (n_padded / c + k * c + m); n_padded * m for local_only.
std::uint64_t expected_score_count(Index n_padded, Index compressed_size, Index top_k,
                                   Index local_size, bool local_only = false);

}  // namespace ensa
