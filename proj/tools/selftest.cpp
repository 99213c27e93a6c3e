#include "commands.hpp"

#include "ensa/bench.hpp"
#include "ensa/grad_check.hpp"
#include "ensa/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <iomanip>

namespace ensa::cli {

namespace {

bool report(std::ostream& out, const std::string& name, bool ok, const std::string& detail) {
  out << (ok ? "ok   " : "FAIL ") << name << "  " << detail << '\n';
  return ok;
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

bool check_quadratic(std::ostream& out) {
  Rng rng(1);
  std::normal_distribution<double> normal;
  const Matrix a = Matrix::NullaryExpr(5, 5, [&] { return normal(rng); });
  ParamStore store;
  store.create("x", Matrix::NullaryExpr(5, 1, [&] { return normal(rng); }));
  auto f = [&](Graph& g, ParamStore& s) {
    Var x = g.param(s, "x");
    return sum_all(mul(x, matmul(g.input(a), x)));
  };
  GradCheckOptions o;
  o.tol = 1e-8;
  const GradCheckReport r = grad_check(f, store, o);
  return report(out, "grad_check quadratic form", r.passed, "max rel err " + sci(r.max_rel_error));
}

bool check_model_gradients(std::ostream& out) {
  NsaConfig cfg;
  cfg.local_size = 8;
  cfg.compressed_size = 4;
  cfg.top_k = 2;
  cfg.depth = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.knn_k = 3;
  cfg.in_features = 4;
  cfg.out_features = 3;
  cfg.seed = 7;
  NsaModel model(cfg);
  const PointCloud cloud = line_cloud(16, 4, 3, 11);
  const PreparedCloud prepared = model.prepare(cloud);
  auto f = [&](Graph& g, ParamStore&) {
    return mse_loss(model.forward(g, prepared, g.input(cloud.features)), g.input(cloud.targets));
  };
  const GradCheckReport r = grad_check(f, model.params());
  return report(out, "grad_check depth-2 model, 16-point line", r.passed,
                std::to_string(r.params.size()) + " params, max rel err " + sci(r.max_rel_error));
}

// Softmax over every real slot, per head, with plain loops.
Matrix dense_reference(const Matrix& q, const Matrix& k, const Matrix& v, const Mask& real,
                       Index heads) {
  const Index d = q.cols() / heads;
  Matrix o = Matrix::Zero(q.rows(), q.cols());
  for (Index i = 0; i < q.rows(); ++i) {
    for (Index h = 0; h < heads; ++h) {
      std::vector<double> s(static_cast<std::size_t>(k.rows()), -INFINITY);
      double mx = -INFINITY;
      for (Index j = 0; j < k.rows(); ++j) {
        if (!real(j)) continue;
        double dot = 0.0;
        for (Index t = 0; t < d; ++t) dot += q(i, h * d + t) * k(j, h * d + t);
        s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[static_cast<std::size_t>(j)]);
      }
      double z = 0.0;
      for (double& x : s) z += (x = std::exp(x - mx));
      for (Index j = 0; j < k.rows(); ++j) {
        for (Index t = 0; t < d; ++t) o(i, h * d + t) += s[static_cast<std::size_t>(j)] / z * v(j, h * d + t);
      }
    }
  }
  return o;
}

bool check_dense_oracle(std::ostream& out) {
  Rng rng(3);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uni;
  double worst = 0.0;
  for (const Index n : {13, 32, 50}) {
    const Matrix pos = Matrix::NullaryExpr(n, 3, [&] { return uni(rng); });
    const BallTree tree = build_ball_tree(pos, 8, 4);
    const Index np = tree.n_padded, H = 8, heads = 2;
    const Matrix q = Matrix::NullaryExpr(np, H, [&] { return normal(rng); });
    const Matrix k = Matrix::NullaryExpr(np, H, [&] { return normal(rng); });
    const Matrix v = Matrix::NullaryExpr(np, H, [&] { return normal(rng); });
    Selection sel;
    const Index balls = tree.compressed_ball_count();
    sel.indices.resize(np, balls);
    for (Index i = 0; i < np; ++i) {
      for (Index b = 0; b < balls; ++b) sel.indices(i, b) = static_cast<int>(b);
    }
    Graph g(Graph::Mode::Inference);
    const Matrix got =
        selected_attention(g.input(q), g.input(k), g.input(v), sel, tree, heads).values.value();
    const Matrix want = dense_reference(q, k, v, tree.mask, heads);
    for (Index i = 0; i < np; ++i) {
      if (tree.mask(i)) worst = std::max(worst, (got.row(i) - want.row(i)).cwiseAbs().maxCoeff());
    }
  }
  return report(out, "selected attention over all balls vs dense loops", worst <= 1e-10,
                "max abs err " + sci(worst));
}

bool check_selection_oracle(std::ostream& out) {
  Rng rng(5);
  std::uniform_int_distribution<int> small(0, 3);
  Index mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index rows = 6, balls = 7, k = 1 + trial % balls;
    const Matrix scores = Matrix::NullaryExpr(rows, balls, [&] { return 0.25 * small(rng); });
    std::vector<int> own(static_cast<std::size_t>(rows));
    for (Index i = 0; i < rows; ++i) own[static_cast<std::size_t>(i)] = static_cast<int>((i * 3) % balls);
    const Selection got = select_topk(scores, k, own);
    for (Index i = 0; i < rows; ++i) {
      std::vector<int> order(static_cast<std::size_t>(balls));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return scores(i, a) > scores(i, b); });
      order.resize(static_cast<std::size_t>(k));
      const int mine = own[static_cast<std::size_t>(i)];
      if (std::find(order.begin(), order.end(), mine) == order.end()) order.back() = mine;
      std::sort(order.begin(), order.end());
      for (Index j = 0; j < k; ++j) {
        if (got.indices(i, j) != order[static_cast<std::size_t>(j)]) {
          ++mismatches;
          break;
        }
      }
    }
  }
  return report(out, "top-k selection vs full sort", mismatches == 0,
                std::to_string(mismatches) + " mismatching rows");
}

bool check_score_count(std::ostream& out) {
  const PointCloud cloud = line_cloud(40, 3, 3, 2);
  const BallTree tree = build_ball_tree(cloud, 8, 4);
  ParamStore store;
  Rng rng(2);
  init_attention_params(store, "a", 8, 2, 4, rng);
  AttentionOptions o;
  o.heads = 2;
  o.top_k = 3;
  ScoreCounter::reset();
  Graph g(Graph::Mode::Inference);
  nsa_attention(g, store, "a", g.input(gather_to_tree(tree, Matrix::Ones(40, 8))), tree, o);
  const std::uint64_t want = expected_score_count(tree.n_padded, 4, 3, 8);
  return report(out, "score counter vs closed form", ScoreCounter::count() == want,
                std::to_string(ScoreCounter::count()) + " vs " + std::to_string(want));
}

}  // namespace

bool selftest(std::ostream& out) {
  bool ok = true;
  ok &= check_quadratic(out);
  ok &= check_model_gradients(out);
  ok &= check_dense_oracle(out);
  ok &= check_selection_oracle(out);
  ok &= check_score_count(out);
  return ok;
}

}  // namespace ensa::cli
