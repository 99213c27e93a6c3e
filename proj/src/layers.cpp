#include "ensa/layers.hpp"

#include <cmath>

namespace ensa {

Matrix random_weight(Index fan_in, Index fan_out, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  Matrix w(fan_in, fan_out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
  return w;
}

void add_mlp2_params(ParamStore& store, const std::string& prefix, Index in, Index hidden,
                     Index out, Rng& rng) {
  store.create(prefix + ".w1", random_weight(in, hidden, rng));
  store.create(prefix + ".b1", Matrix::Zero(1, hidden));
  store.create(prefix + ".w2", random_weight(hidden, out, rng));
  store.create(prefix + ".b2", Matrix::Zero(1, out));
}

Var dense(Graph& g, ParamStore& store, Var x, const std::string& w, const std::string& b) {
  return add_row(matmul(x, g.param(store, w)), g.param(store, b));
}

Var mlp2(Graph& g, ParamStore& store, Var x, const std::string& prefix) {
  Var h = gelu(dense(g, store, x, prefix + ".w1", prefix + ".b1"));
  return dense(g, store, h, prefix + ".w2", prefix + ".b2");
}

}  // namespace ensa
