#pragma once

#include "ensa/balltree.hpp"
#include "ensa/graph.hpp"
#include "ensa/layers.hpp"

namespace ensa {

struct KnnGraph {
  Index k = 0;
  IndexMatrix neighbors;  // n x k, nearest first
  Matrix edge_vectors;    // (n*k) x 3, row i*k + j holds p[neighbors(i, j)] - p[i]
};

// Exact brute-force k nearest neighbours, excluding the point itself; ties in
// distance go to the lower index. Requires 0 <= k < n.
KnnGraph build_knn_graph(const Matrix& positions, Index k);
KnnGraph build_knn_graph(const PointCloud& cloud, Index k);

// Parameters `embed.msg.*` ((F+3) -> H -> H) and `embed.upd.*` ((F+H) -> H -> H).
void init_embedder_params(ParamStore& store, Index in_features, Index hidden, Rng& rng);

// One round of message passing:
//   m_ij = MLP_msg([f_j | p_j - p_i]),  a_i = mean_j m_ij,
//   e_i  = MLP_upd([f_i | a_i]).
// features is n x F; returns n x H. With k == 0 the aggregate is zero.
Var mpnn_embed(Graph& g, ParamStore& store, Var features, const KnnGraph& graph);

}  // namespace ensa
