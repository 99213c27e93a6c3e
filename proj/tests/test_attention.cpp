#include <doctest.h>

#include "ensa/attention.hpp"
#include "ensa/grad_check.hpp"
#include "oracles.hpp"

using namespace ensa;

namespace {

Matrix line(Index n) {
  Matrix p = Matrix::Zero(n, 3);
  for (Index i = 0; i < n; ++i) p(i, 0) = static_cast<double>(i);
  return p;
}

std::vector<Index> ball_slots(Index ball, Index size) {
  std::vector<Index> s(static_cast<std::size_t>(size));
  std::iota(s.begin(), s.end(), ball * size);
  return s;
}

void zero_params(ParamStore& s, const std::string& prefix) {
  for (const auto& name : s.names()) {
    if (name.rfind(prefix, 0) == 0) {
      s.set(name, Matrix::Zero(s.value(name).rows(), s.value(name).cols()));
    }
  }
}

double max_abs(const Matrix& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST_CASE("compressed attention with logits 0, ln 2, ln 4") {
  Graph g(Graph::Mode::Inference);
  Matrix k(3, 1);
  k << 0.0, std::log(2.0), std::log(4.0);
  Matrix v(3, 1);
  v << 1.0, 2.0, 3.0;
  const BranchOutput out = compressed_attention(g.input(Matrix::Ones(1, 1)), g.input(k),
                                                g.input(v), Mask::Constant(3, true), 1, true);
  REQUIRE(out.probs.size() == 1);
  CHECK(out.probs[0](0, 0) == doctest::Approx(1.0 / 7).epsilon(1e-14));
  CHECK(out.probs[0](0, 1) == doctest::Approx(2.0 / 7).epsilon(1e-14));
  CHECK(out.probs[0](0, 2) == doctest::Approx(4.0 / 7).epsilon(1e-14));
  CHECK(out.values.value()(0, 0) == doctest::Approx(17.0 / 7).epsilon(1e-14));
  CHECK(max_abs(out.scores - out.probs[0]) == 0.0);
}

TEST_CASE("compressed attention degenerate cases") {
  std::mt19937_64 r(1);
  Graph g(Graph::Mode::Inference);
  SUBCASE("a single ball returns its value row") {
    const Matrix v = oracle::random_matrix(1, 4, r);
    const BranchOutput out =
        compressed_attention(g.input(oracle::random_matrix(5, 4, r)),
                             g.input(oracle::random_matrix(1, 4, r)), g.input(v),
                             Mask::Constant(1, true), 2, true);
    for (Index i = 0; i < 5; ++i) CHECK(max_abs(out.values.value().row(i) - v) <= 1e-15);
    for (const Matrix& p : out.probs) CHECK(max_abs(p.array() - 1.0) == 0.0);
  }
  SUBCASE("zero queries average the unmasked values") {
    const Matrix v = oracle::random_matrix(4, 4, r);
    Mask mask = Mask::Constant(4, true);
    mask(2) = false;
    const BranchOutput out = compressed_attention(g.input(Matrix::Zero(3, 4)),
                                                  g.input(oracle::random_matrix(4, 4, r)),
                                                  g.input(v), mask, 2);
    const Eigen::RowVectorXd mean = (v.row(0) + v.row(1) + v.row(3)) / 3.0;
    for (Index i = 0; i < 3; ++i) CHECK(max_abs(out.values.value().row(i) - mean) <= 1e-14);
  }
  SUBCASE("every ball masked") {
    CHECK_THROWS_AS(compressed_attention(g.input(Matrix::Zero(2, 2)), g.input(Matrix::Zero(3, 2)),
                                         g.input(Matrix::Zero(3, 2)), Mask::Constant(3, false), 1),
                    ValueError);
  }
  SUBCASE("mask length") {
    CHECK_THROWS_AS(compressed_attention(g.input(Matrix::Zero(2, 2)), g.input(Matrix::Zero(3, 2)),
                                         g.input(Matrix::Zero(3, 2)), Mask::Constant(2, true), 1),
                    ShapeError);
  }
}

TEST_CASE("compressed attention matches loops; probabilities are normalised") {
  std::mt19937_64 r(2);
  for (Index heads : {1, 2, 4}) {
    const Matrix q = oracle::random_matrix(9, 8, r), k = oracle::random_matrix(6, 8, r),
                 v = oracle::random_matrix(6, 8, r);
    Mask mask = Mask::Constant(6, true);
    mask(1) = false;
    mask(4) = false;
    Graph g(Graph::Mode::Inference);
    const BranchOutput out =
        compressed_attention(g.input(q), g.input(k), g.input(v), mask, heads, true);
    CHECK(max_abs(out.values.value() - oracle::dense_attention(q, k, v, heads, mask)) <= 1e-12);
    REQUIRE(static_cast<Index>(out.probs.size()) == heads);
    Matrix sum = Matrix::Zero(9, 6);
    for (const Matrix& p : out.probs) {
      CHECK(max_abs(p.rowwise().sum().array() - 1.0) <= 1e-9);
      CHECK(p.col(1).maxCoeff() < 1e-12);
      CHECK(p.col(4).maxCoeff() < 1e-12);
      CHECK(p.minCoeff() >= 0.0);
      sum += p;
    }
    CHECK(max_abs(out.scores - sum) <= 1e-15);
  }
}

TEST_CASE("top-k selection") {
  Matrix s(1, 4);
  s << 0.1, 0.5, 0.2, 0.2;
  SUBCASE("ties go to the lower ball") {
    CHECK(select_topk(s, 2, {1}).indices == Eigen::RowVector2i(1, 2));
  }
  SUBCASE("own ball replaces the last pick") {
    CHECK(select_topk(s, 2, {0}).indices == Eigen::RowVector2i(0, 1));
    CHECK(select_topk(s, 1, {3}).indices(0, 0) == 3);
  }
  SUBCASE("k equal to the ball count keeps every ball") {
    CHECK(select_topk(s, 4, {2}).indices == Eigen::RowVector4i(0, 1, 2, 3));
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(select_topk(s, 5, {0}), ValueError);
    CHECK_THROWS_AS(select_topk(s, 0, {0}), ValueError);
    CHECK_THROWS_AS(select_topk(s, 2, {4}), ValueError);
    CHECK_THROWS_AS(select_topk(s, 2, {0, 1}), ShapeError);
  }
  SUBCASE("head probabilities are summed") {
    Matrix a(1, 3), b(1, 3);
    a << 0.6, 0.3, 0.1;
    b << 0.0, 0.4, 0.6;
    CHECK(select_topk(std::vector<Matrix>{a, b}, 1, {1}).indices(0, 0) == 1);
    CHECK(select_topk(std::vector<Matrix>{a, b}, 2, {2}).indices == Eigen::RowVector2i(1, 2));
  }
}

TEST_CASE("top-k agrees with a full sort on random scores") {
  std::mt19937_64 r(3);
  std::uniform_int_distribution<int> small(0, 3);
  for (int trial = 0; trial < 300; ++trial) {
    const Index balls = 1 + static_cast<Index>(r() % 12);
    const Index rows = 5;
    const Index k = 1 + static_cast<Index>(r() % static_cast<std::uint64_t>(balls));
    Matrix s(rows, balls);
    // Coarse values force plenty of ties.
    for (Index i = 0; i < s.size(); ++i) s.data()[i] = trial % 2 ? small(r) / 4.0 : oracle::random_matrix(1, 1, r)(0, 0);
    std::vector<int> own(static_cast<std::size_t>(rows));
    for (int& o : own) o = static_cast<int>(r() % static_cast<std::uint64_t>(balls));
    const Selection sel = select_topk(s, k, own);
    for (Index i = 0; i < rows; ++i) {
      std::vector<double> row;
      for (Index j = 0; j < balls; ++j) row.push_back(s(i, j));
      const std::vector<int> want = oracle::topk_by_sort(row, k, own[static_cast<std::size_t>(i)]);
      for (Index j = 0; j < k; ++j) CHECK(sel.indices(i, j) == want[static_cast<std::size_t>(j)]);
    }
  }
}

TEST_CASE("selecting every ball reproduces dense attention") {
  std::mt19937_64 r(4);
  for (Index n : {16, 21, 32}) {
    const BallTree tree = build_ball_tree(oracle::uniform_cloud(n, r), 4, 4);
    const Index balls = tree.compressed_ball_count();
    Selection sel;
    sel.indices.resize(tree.n_padded, balls);
    for (Index i = 0; i < tree.n_padded; ++i) {
      for (Index b = 0; b < balls; ++b) sel.indices(i, b) = static_cast<int>(b);
    }
    const Matrix q = oracle::random_matrix(tree.n_padded, 8, r),
                 k = oracle::random_matrix(tree.n_padded, 8, r),
                 v = oracle::random_matrix(tree.n_padded, 8, r);
    Graph g(Graph::Mode::Inference);
    const BranchOutput out = selected_attention(g.input(q), g.input(k), g.input(v), sel, tree, 2);
    CHECK(max_abs(out.values.value() - oracle::dense_attention(q, k, v, 2, tree.mask)) <= 1e-10);
  }
}

TEST_CASE("selected attention reads exactly the chosen balls") {
  std::mt19937_64 r(5);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(30, r), 8, 4);
  const Index balls = tree.compressed_ball_count();
  Matrix scores = oracle::random_matrix(tree.n_padded, balls, r);
  const Selection sel = select_topk(scores, 3, own_balls(tree));
  const Matrix q = oracle::random_matrix(tree.n_padded, 6, r),
               k = oracle::random_matrix(tree.n_padded, 6, r),
               v = oracle::random_matrix(tree.n_padded, 6, r);
  Graph g(Graph::Mode::Inference);
  const BranchOutput out = selected_attention(g.input(q), g.input(k), g.input(v), sel, tree, 3);
  auto keys = [&](Index i) {
    std::vector<Index> s;
    for (Index j = 0; j < 3; ++j) {
      for (Index t : ball_slots(sel.indices(i, j), 4)) s.push_back(t);
    }
    return s;
  };
  const Matrix want = oracle::attention_loops(q, k, v, 3, tree.mask, keys,
                                              [](Index, Index, Index) { return 0.0; });
  for (Index i = 0; i < tree.n_padded; ++i) {
    if (tree.mask(i)) CHECK(max_abs(out.values.value().row(i) - want.row(i)) <= 1e-12);
  }
  Selection bad = sel;
  bad.indices(0, 0) = static_cast<int>(balls);
  CHECK_THROWS_AS(selected_attention(g.input(q), g.input(k), g.input(v), bad, tree, 3), ValueError);
}

TEST_CASE("own ball with k = 1 and m = c is unbiased local attention") {
  std::mt19937_64 r(6);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(24, r), 8, 8);
  Selection sel;
  sel.indices.resize(tree.n_padded, 1);
  const std::vector<int> own = own_balls(tree);
  for (Index i = 0; i < tree.n_padded; ++i) sel.indices(i, 0) = own[static_cast<std::size_t>(i)];
  const Matrix q = oracle::random_matrix(tree.n_padded, 4, r),
               k = oracle::random_matrix(tree.n_padded, 4, r),
               v = oracle::random_matrix(tree.n_padded, 4, r);
  Graph g(Graph::Mode::Inference);
  const Matrix a = selected_attention(g.input(q), g.input(k), g.input(v), sel, tree, 2).values.value();
  const Matrix b = ball_attention(g.input(q), g.input(k), g.input(v), Var(), tree, 2).values.value();
  CHECK(max_abs(a - b) <= 1e-14);
}

TEST_CASE("local attention limits") {
  std::mt19937_64 r(7);
  SUBCASE("one ball covering the cloud with zero bias is dense attention") {
    const BallTree tree = build_ball_tree(oracle::uniform_cloud(13, r), 16, 16);
    REQUIRE(tree.n_padded == 16);
    ParamStore s;
    Rng rng(7);
    init_attention_params(s, "a", 8, 2, 16, rng);
    zero_params(s, "a.loc.bias");
    const Matrix q = oracle::random_matrix(16, 8, r), k = oracle::random_matrix(16, 8, r),
                 v = oracle::random_matrix(16, 8, r);
    Graph g(Graph::Mode::Inference);
    const Matrix got =
        local_attention(g, s, "a", g.input(q), g.input(k), g.input(v), tree, 2).values.value();
    CHECK(max_abs(got - oracle::dense_attention(q, k, v, 2, tree.mask)) <= 1e-10);
  }
  SUBCASE("balls of one point return their own value") {
    const BallTree tree = build_ball_tree(oracle::uniform_cloud(10, r), 1, 1);
    const Matrix v = oracle::random_matrix(10, 4, r);
    Graph g(Graph::Mode::Inference);
    const Matrix got = ball_attention(g.input(oracle::random_matrix(10, 4, r)),
                                      g.input(oracle::random_matrix(10, 4, r)), g.input(v), Var(),
                                      tree, 2)
                           .values.value();
    CHECK(max_abs(got - v) <= 1e-15);
  }
}

TEST_CASE("local attention with the learned bias matches loops") {
  std::mt19937_64 r(8);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(27, r), 8, 4);
  ParamStore s;
  Rng rng(8);
  init_attention_params(s, "a", 8, 4, 16, rng);
  s.set("a.loc.bias.b2", oracle::random_matrix(1, 4, r));
  const Matrix q = oracle::random_matrix(tree.n_padded, 8, r),
               k = oracle::random_matrix(tree.n_padded, 8, r),
               v = oracle::random_matrix(tree.n_padded, 8, r);
  Graph g(Graph::Mode::Inference);
  const Matrix got =
      local_attention(g, s, "a", g.input(q), g.input(k), g.input(v), tree, 4).values.value();
  auto bias = [&](Index i, Index j, Index h) {
    const Matrix off = tree.positions.row(i) - tree.positions.row(j);
    return oracle::mlp2(off, s.value("a.loc.bias.w1"), s.value("a.loc.bias.b1"),
                        s.value("a.loc.bias.w2"), s.value("a.loc.bias.b2"))(0, h);
  };
  const Matrix want = oracle::attention_loops(
      q, k, v, 4, tree.mask, [](Index i) { return ball_slots(i / 8, 8); }, bias);
  CHECK(max_abs(got - want) <= 1e-12);

  const Matrix off = local_offsets(tree);
  for (Index i = 0; i < tree.n_padded; ++i) CHECK(off.row(i * 8 + i % 8).isZero(0.0));
}

TEST_CASE("compressed keys and values are masked means of each ball") {
  std::mt19937_64 r(9);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(13, r), 4, 2);
  REQUIRE(tree.n_padded == 16);
  ParamStore s;
  Rng rng(9);
  init_attention_params(s, "a", 6, 2, 8, rng);
  const Matrix k = oracle::random_matrix(16, 6, r), v = oracle::random_matrix(16, 6, r);
  Graph g(Graph::Mode::Inference);
  const CompressedKV out = compress_balls(g, s, "a", g.input(k), g.input(v), tree);
  REQUIRE(out.k.rows() == 8);
  for (Index b = 0; b < 8; ++b) {
    Matrix mk = Matrix::Zero(1, 6), mv = Matrix::Zero(1, 6), mp = Matrix::Zero(1, 3);
    int count = 0;
    for (Index t : ball_slots(b, 2)) {
      if (!tree.mask(t)) continue;
      mk += k.row(t);
      mv += v.row(t);
      mp += tree.positions.row(t);
      ++count;
    }
    CHECK(out.ball_mask(b) == (count > 0));
    if (count == 0) {
      CHECK(out.k.value().row(b).isZero(0.0));
      continue;
    }
    mk /= count;
    mv /= count;
    mp /= count;
    const Matrix zero = Matrix::Zero(1, 6);
    CHECK(max_abs(out.k.value().row(b) - oracle::affine(mk, s.value("a.cmp.wck"), zero)) <= 1e-12);
    CHECK(max_abs(out.v.value().row(b) - oracle::affine(mv, s.value("a.cmp.wcv"), zero)) <= 1e-12);
    CHECK(max_abs(out.centroids.row(b) - mp) <= 1e-14);
  }
}

TEST_CASE("sixteen points with c = 4 give four compressed tokens") {
  const BallTree tree = build_ball_tree(line(16), 8, 4);
  ParamStore s;
  Rng rng(10);
  init_attention_params(s, "a", 4, 1, 8, rng);
  s.set("a.cmp.wck", Matrix::Identity(4, 4));
  Graph g(Graph::Mode::Inference);
  const Matrix k = Matrix::Constant(16, 4, 2.5);
  const CompressedKV out = compress_balls(g, s, "a", g.input(k), g.input(k), tree);
  CHECK(out.k.rows() == 4);
  CHECK(max_abs(out.k.value().array() - 2.5) <= 1e-15);
  CHECK(out.ball_mask.all());
  CHECK(out.centroids(0, 0) == 1.5);
  CHECK(out.centroids(3, 0) == 13.5);
}

TEST_CASE("gate combination") {
  std::mt19937_64 r(11);
  ParamStore s;
  Rng rng(11);
  init_attention_params(s, "a", 4, 2, 8, rng);
  const Matrix x = oracle::random_matrix(5, 4, r);
  const Matrix wo = s.value("a.wo");
  Graph g(Graph::Mode::Inference);
  SUBCASE("saturated gates pick the compressed branch") {
    s.set("a.gate.w", Matrix::Zero(4, 3));
    Matrix b(1, 3);
    b << 30, -30, -30;
    s.set("a.gate.b", b);
    const Matrix c = oracle::random_matrix(5, 4, r);
    const Matrix out = gate_combine(g, s, "a", g.input(x), g.input(c),
                                    g.input(oracle::random_matrix(5, 4, r)),
                                    g.input(oracle::random_matrix(5, 4, r)))
                           .value();
    CHECK(max_abs(out - c * wo) <= 1e-11);
  }
  SUBCASE("equal branches with half-open gates") {
    s.set("a.gate.w", Matrix::Zero(4, 3));
    const Matrix y = oracle::random_matrix(5, 4, r);
    Var yv = g.input(y);
    CHECK(max_abs(gate_combine(g, s, "a", g.input(x), yv, yv, yv).value() - 1.5 * y * wo) <= 1e-13);
    CHECK(max_abs(gate_combine(g, s, "a", g.input(x), yv, yv, yv, false).value() - y * wo) <= 1e-13);
  }
  SUBCASE("random weights match loops") {
    s.set("a.gate.b", oracle::random_matrix(1, 3, r));
    const Matrix c = oracle::random_matrix(5, 4, r), se = oracle::random_matrix(5, 4, r),
                 lo = oracle::random_matrix(5, 4, r);
    Matrix gates;
    const Matrix out =
        gate_combine(g, s, "a", g.input(x), g.input(c), g.input(se), g.input(lo), true, &gates)
            .value();
    const Matrix logits = oracle::affine(x, s.value("a.gate.w"), s.value("a.gate.b"));
    Matrix mix(5, 4);
    for (Index i = 0; i < 5; ++i) {
      double gt[3];
      for (int t = 0; t < 3; ++t) gt[t] = 1.0 / (1.0 + std::exp(-logits(i, t)));
      for (Index j = 0; j < 4; ++j) mix(i, j) = gt[0] * c(i, j) + gt[1] * se(i, j) + gt[2] * lo(i, j);
      for (int t = 0; t < 3; ++t) {
        CHECK(gates(i, t) == doctest::Approx(gt[t]).epsilon(1e-14));
        CHECK(gates(i, t) > 0.0);
        CHECK(gates(i, t) < 1.0);
      }
    }
    CHECK(max_abs(out - oracle::affine(mix, wo, Matrix::Zero(1, 4))) <= 1e-12);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(gate_combine(g, s, "a", g.input(x), g.input(Matrix::Zero(4, 4)), g.input(x),
                                 g.input(x)),
                    ShapeError);
  }
}

TEST_CASE("branch projections") {
  std::mt19937_64 r(12);
  ParamStore s;
  Rng rng(12);
  init_attention_params(s, "a", 6, 3, 8, rng);
  const Matrix x = oracle::random_matrix(7, 6, r);
  Graph g(Graph::Mode::Inference);
  const Projections p = project_qkv(g, s, "a", g.input(x), Branch::Selected);
  const Matrix z = Matrix::Zero(1, 6);
  CHECK(max_abs(p.q.value() - oracle::affine(x, s.value("a.sel.wq"), z)) <= 1e-13);
  CHECK(max_abs(p.k.value() - oracle::affine(x, s.value("a.sel.wk"), z)) <= 1e-13);
  CHECK(max_abs(p.v.value() - oracle::affine(x, s.value("a.sel.wv"), z)) <= 1e-13);
  for (const char* w : {"a.loc.wq", "a.loc.wk", "a.loc.wv"}) s.set(w, Matrix::Identity(6, 6));
  const Projections id = project_qkv(g, s, "a", g.input(x), Branch::Local);
  CHECK(id.q.value() == x);
  CHECK(id.k.value() == x);
  CHECK(id.v.value() == x);
  CHECK(std::string(branch_name(Branch::Compressed)) == "cmp");
  CHECK_THROWS_AS(HeadsConfig::from_hidden(6, 4), ValueError);
  CHECK(HeadsConfig::from_hidden(8, 2).head_dim == 4);
}

TEST_CASE("score counts follow the closed form") {
  struct Case {
    Index n, m, c, k;
  };
  std::mt19937_64 r(13);
  for (const Case& cs : {Case{16, 4, 4, 2}, Case{16, 8, 4, 1}, Case{37, 8, 4, 3},
                         Case{64, 4, 16, 2}, Case{50, 16, 16, 4}}) {
    const BallTree tree = build_ball_tree(oracle::uniform_cloud(cs.n, r), cs.m, cs.c);
    ParamStore s;
    Rng rng(13);
    init_attention_params(s, "a", 8, 2, 8, rng);
    const Matrix x = oracle::random_matrix(tree.n_padded, 8, r);
    for (bool local_only : {false, true}) {
      AttentionOptions o;
      o.heads = 2;
      o.top_k = cs.k;
      o.local_only = local_only;
      Graph g(Graph::Mode::Inference);
      ScoreCounter::reset();
      nsa_attention(g, s, "a", g.input(x), tree, o);
      CHECK(ScoreCounter::count() ==
            expected_score_count(tree.n_padded, cs.c, cs.k, cs.m, local_only));
    }
  }
  CHECK(expected_score_count(1024, 32, 4, 32) == 1024ull * (32 + 128 + 32));
  CHECK(expected_score_count(1024, 32, 4, 32, true) == 1024ull * 32);
}

TEST_CASE("trace invariants of the full layer") {
  std::mt19937_64 r(14);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(45, r), 8, 4);
  ParamStore s;
  Rng rng(14);
  init_attention_params(s, "a", 8, 2, 8, rng);
  s.set("a.gate.b", oracle::random_matrix(1, 3, r));
  AttentionOptions o;
  o.heads = 2;
  o.top_k = 3;
  AttentionTrace trace;
  Graph g(Graph::Mode::Inference);
  const Matrix out =
      nsa_attention(g, s, "a", g.input(oracle::random_matrix(tree.n_padded, 8, r)), tree, o, &trace)
          .value();
  CHECK(out.allFinite());
  REQUIRE(trace.selection.indices.rows() == tree.n_padded);
  REQUIRE(trace.selection.top_k() == 3);
  const std::vector<int> own = own_balls(tree);
  for (Index i = 0; i < tree.n_padded; ++i) {
    bool has_own = false;
    for (Index j = 0; j < 3; ++j) {
      if (j > 0) CHECK(trace.selection.indices(i, j) > trace.selection.indices(i, j - 1));
      has_own |= trace.selection.indices(i, j) == own[static_cast<std::size_t>(i)];
    }
    CHECK(has_own);
  }
  CHECK(trace.gates.minCoeff() > 0.0);
  CHECK(trace.gates.maxCoeff() < 1.0);
  REQUIRE(trace.compressed_probs.size() == 2);
  for (const Matrix& p : trace.compressed_probs) {
    CHECK(max_abs(p.rowwise().sum().array() - 1.0) <= 1e-9);
  }
  CHECK(trace.centroids.rows() == tree.compressed_ball_count());
  CHECK(trace.access.empty());

  o.top_k = tree.compressed_ball_count() + 1;
  CHECK_THROWS_AS(nsa_attention(g, s, "a", g.input(Matrix::Zero(tree.n_padded, 8)), tree, o),
                  ValueError);
}

TEST_CASE("leaving the compressed branch out of the sum") {
  std::mt19937_64 r(15);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(32, r), 8, 8);
  ParamStore s;
  Rng rng(15);
  init_attention_params(s, "a", 8, 2, 8, rng);
  const Matrix x = oracle::random_matrix(32, 8, r);
  AttentionOptions o;
  o.heads = 2;
  o.top_k = 2;
  o.use_compressed_in_sum = false;
  auto run = [&] {
    Graph g(Graph::Mode::Inference);
    return nsa_attention(g, s, "a", g.input(x), tree, o).value();
  };
  const Matrix before = run();
  s.set("a.cmp.wcv", oracle::random_matrix(8, 8, r));
  CHECK(run() == before);
  o.use_compressed_in_sum = true;
  const Matrix with = run();
  s.set("a.cmp.wcv", oracle::random_matrix(8, 8, r));
  CHECK(max_abs(run() - with) > 1e-6);
}

TEST_CASE("local-only layer is local attention followed by the output map") {
  std::mt19937_64 r(16);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(20, r), 4, 4);
  ParamStore s;
  Rng rng(16);
  init_attention_params(s, "a", 8, 2, 8, rng);
  const Matrix x = oracle::random_matrix(tree.n_padded, 8, r);
  AttentionOptions o;
  o.heads = 2;
  o.local_only = true;
  Graph g(Graph::Mode::Inference);
  const Matrix got = nsa_attention(g, s, "a", g.input(x), tree, o).value();
  const Matrix z = Matrix::Zero(1, 8);
  const Matrix q = oracle::affine(x, s.value("a.loc.wq"), z),
               k = oracle::affine(x, s.value("a.loc.wk"), z),
               v = oracle::affine(x, s.value("a.loc.wv"), z);
  auto bias = [&](Index i, Index j, Index h) {
    const Matrix off = tree.positions.row(i) - tree.positions.row(j);
    return oracle::mlp2(off, s.value("a.loc.bias.w1"), s.value("a.loc.bias.b1"),
                        s.value("a.loc.bias.w2"), s.value("a.loc.bias.b2"))(0, h);
  };
  const Matrix loc = oracle::attention_loops(
      q, k, v, 2, tree.mask, [](Index i) { return ball_slots(i / 4, 4); }, bias);
  CHECK(max_abs(got - oracle::affine(loc, s.value("a.wo"), z)) <= 1e-12);
}

TEST_CASE("gradients through the full layer pass grad_check") {
  const BallTree tree = build_ball_tree(line(16), 4, 4);
  std::mt19937_64 r(17);
  const Matrix x = oracle::random_matrix(16, 8, r);
  ParamStore s;
  Rng rng(17);
  init_attention_params(s, "a", 8, 2, 8, rng);
  s.set("a.gate.b", oracle::random_matrix(1, 3, r));
  AttentionOptions o;
  o.heads = 2;
  o.top_k = 2;
  auto obj = [&](Graph& g, ParamStore& st) {
    return mean_all(square(nsa_attention(g, st, "a", g.input(x), tree, o)));
  };
  const GradCheckReport rep = grad_check(obj, s, GradCheckOptions{});
  INFO(rep.diagnostic);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.deterministic);
}

TEST_CASE("padding slots receive no gradient") {
  std::mt19937_64 r(18);
  const BallTree tree = build_ball_tree(oracle::uniform_cloud(13, r), 4, 4);
  REQUIRE(tree.n_padded == 16);
  ParamStore s;
  Rng rng(18);
  init_attention_params(s, "a", 8, 2, 8, rng);
  AttentionOptions o;
  o.heads = 2;
  o.top_k = 2;
  Graph g;
  Var x = g.input(oracle::random_matrix(16, 8, r), true);
  std::vector<int> real;
  for (Index t = 0; t < 16; ++t) {
    if (tree.mask(t)) real.push_back(static_cast<int>(t));
  }
  g.backward(sum_all(square(gather_rows(nsa_attention(g, s, "a", x, tree, o), real))));
  const Matrix& dx = x.grad();
  REQUIRE(dx.rows() == 16);
  for (Index t = 0; t < 16; ++t) {
    if (tree.mask(t)) {
      CHECK(dx.row(t).norm() > 0.0);
    } else {
      CHECK(dx.row(t).isZero(0.0));
    }
  }
}
