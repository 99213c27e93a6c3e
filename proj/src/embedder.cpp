#include "ensa/embedder.hpp"

#include <algorithm>
#include <utility>

namespace ensa {

KnnGraph build_knn_graph(const Matrix& positions, Index k) {
  const Index n = positions.rows();
  if (positions.cols() != 3) {
    throw ShapeError("build_knn_graph: positions must be n x 3, got " + shape_str(positions));
  }
  if (k < 0 || k >= n) {
    throw ValueError("build_knn_graph: need 0 <= k < n, got k=" + std::to_string(k) +
                     ", n=" + std::to_string(n));
  }
  KnnGraph graph;
  graph.k = k;
  graph.neighbors.resize(n, k);
  graph.edge_vectors.resize(n * k, 3);

  std::vector<std::pair<double, int>> cand;
  cand.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    cand.clear();
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      cand.emplace_back((positions.row(j) - positions.row(i)).squaredNorm(), static_cast<int>(j));
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (Index j = 0; j < k; ++j) {
      const int nb = cand[static_cast<std::size_t>(j)].second;
      graph.neighbors(i, j) = nb;
      graph.edge_vectors.row(i * k + j) = positions.row(nb) - positions.row(i);
    }
  }
  return graph;
}

KnnGraph build_knn_graph(const PointCloud& cloud, Index k) {
  cloud.validate();
  return build_knn_graph(cloud.positions, k);
}

void init_embedder_params(ParamStore& store, Index in_features, Index hidden, Rng& rng) {
  add_mlp2_params(store, "embed.msg", in_features + 3, hidden, hidden, rng);
  add_mlp2_params(store, "embed.upd", in_features + hidden, hidden, hidden, rng);
}

Var mpnn_embed(Graph& g, ParamStore& store, Var features, const KnnGraph& graph) {
  const Index n = features.rows();
  if (graph.neighbors.rows() != n) {
    throw ShapeError("mpnn_embed: features " + shape_str(features.value()) +
                     " for a k-NN graph over " + std::to_string(graph.neighbors.rows()) +
                     " points");
  }
  const Index hidden = store.value("embed.upd.w2").cols();
  const Index expected_in = store.value("embed.msg.w1").rows() - 3;
  if (features.cols() != expected_in) {
    throw ShapeError("mpnn_embed: features have " + std::to_string(features.cols()) +
                     " columns, embedder expects " + std::to_string(expected_in));
  }

  Var aggregate;
  if (graph.k == 0) {
    aggregate = g.input(Matrix::Zero(n, hidden), false, "empty aggregate");
  } else {
    std::vector<int> src(static_cast<std::size_t>(n * graph.k));
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < graph.k; ++j) {
        src[static_cast<std::size_t>(i * graph.k + j)] = graph.neighbors(i, j);
      }
    }
    Var neighbor_features = gather_rows(features, std::move(src));
    Var edges = g.input(graph.edge_vectors, false, "edge vectors");
    Var messages = mlp2(g, store, concat_cols({neighbor_features, edges}), "embed.msg");
    aggregate = segment_mean_rows(messages, graph.k);
  }
  return mlp2(g, store, concat_cols({features, aggregate}), "embed.upd");
}

}  // namespace ensa
