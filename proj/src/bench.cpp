#include "ensa/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>

namespace ensa {

InfluenceMap influence(NsaModel& model, const PointCloud& cloud, Index target, double threshold) {
  if (target < 0 || target >= cloud.size()) {
    throw ValueError("influence: target node " + std::to_string(target) + " out of range [0, " +
                     std::to_string(cloud.size()) + ")");
  }
  const PreparedCloud prepared = model.prepare(cloud);
  Graph g;
  Var features = g.input(cloud.features, true, "features");
  Var out = model.forward(g, prepared, features);
  Var loss = sum_all(square(gather_rows(out, {static_cast<int>(target)})));
  g.backward(loss);

  InfluenceMap map;
  map.target = target;
  map.threshold = threshold;
  const Matrix& grad = features.grad();
  map.influence = grad.size() == 0 ? Eigen::VectorXd::Zero(cloud.size())
                                   : Eigen::VectorXd(grad.rowwise().norm());
  const int bins = 16;
  map.histogram.assign(bins, 0);
  for (Index i = 0; i < map.influence.size(); ++i) {
    const double v = map.influence(i);
    if (v <= threshold) {
      ++map.below_threshold;
      continue;
    }
    ++map.influenced;
    const int e = static_cast<int>(std::floor(std::log10(v)));
    const int bin = std::clamp(e - map.histogram_low, 0, bins - 1);
    ++map.histogram[static_cast<std::size_t>(bin)];
  }
  return map;
}

ThroughputReport measure_throughput(const NsaModel& model, const Dataset& data, Index steps) {
  if (steps < 10) throw ValueError("measure_throughput: needs at least 10 steps");
  constexpr Index warmup = 3;
  NsaModel copy = model;
  TrainOptions options;
  options.steps = steps + warmup;
  const TrainReport report = train(copy, data, options);

  std::vector<double> seconds;
  ThroughputReport out;
  out.steps = steps;
  for (std::size_t s = warmup; s < report.steps.size(); ++s) {
    const StepRecord& r = report.steps[s];
    seconds.push_back(r.steps_per_sec > 0.0 ? 1.0 / r.steps_per_sec : 0.0);
    out.peak_bytes = std::max(out.peak_bytes, r.peak_bytes);
  }
  std::sort(seconds.begin(), seconds.end());
  const std::size_t h = seconds.size() / 2;
  out.median_step_seconds =
      seconds.size() % 2 == 1 ? seconds[h] : 0.5 * (seconds[h - 1] + seconds[h]);
  out.steps_per_sec = out.median_step_seconds > 0.0 ? 1.0 / out.median_step_seconds : 0.0;
  return out;
}

Index scaling_compressed_size(Index n) {
  if (n < 1) throw ValueError("scaling_compressed_size: n must be positive");
  const double e = std::log2(static_cast<double>(n)) / 2.0;
  return Index{1} << static_cast<int>(std::floor(e + 0.5));
}

double count_exponent(double alpha) {
  // n * n/c, n * k c, n * m
  return std::max({2.0 - alpha, 1.0 + alpha, 1.0});
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ValueError("loglog_slope: needs two or more paired samples");
  }
  Eigen::MatrixXd A(static_cast<Index>(x.size()), 2);
  Eigen::VectorXd b(static_cast<Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw ValueError("loglog_slope: samples must be positive");
    A(static_cast<Index>(i), 0) = std::log(x[i]);
    A(static_cast<Index>(i), 1) = 1.0;
    b(static_cast<Index>(i)) = std::log(y[i]);
  }
  return A.colPivHouseholderQr().solve(b)(0);
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

template <typename F>
double time_median(Index repeats, F&& body) {
  using clock = std::chrono::steady_clock;
  std::vector<double> t;
  for (Index r = 0; r < repeats; ++r) {
    const auto t0 = clock::now();
    body();
    t.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    // Long runs are stable enough; one sample keeps the dense sweep affordable.
    if (t.back() > 5.0) break;
  }
  return median(std::move(t));
}

}  // namespace

ScalingReport scaling_sweep(const NsaConfig& config, const ScalingOptions& options) {
  const std::vector<Index>& sizes = options.sizes;
  if (sizes.size() < 4) throw ValueError("scaling_sweep: needs at least 4 sizes");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (!is_power_of_two(sizes[i])) {
      throw ValueError("scaling_sweep: size " + std::to_string(sizes[i]) + " is not a power of two");
    }
    if (i > 0 && sizes[i] <= sizes[i - 1]) {
      throw ValueError("scaling_sweep: sizes must be strictly increasing");
    }
  }
  if (options.repeats < 1) throw ValueError("scaling_sweep: repeats must be >= 1");

  const Index H = config.hidden;
  const Index heads = config.heads;
  Rng rng(options.seed);
  ParamStore store;
  init_attention_params(store, "bench", H, heads, config.bias_hidden, rng);
  const Matrix wq = store.value("bench.sel.wq");
  const Matrix wk = store.value("bench.sel.wk");
  const Matrix wv = store.value("bench.sel.wv");
  const Matrix wo = store.value("bench.wo");

  ScalingReport report;
  report.deterministic = deterministic_mode();
  report.threads = num_threads();
  report.analytic_slope = count_exponent(0.5);

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const Index n : sizes) {
    ScalingPoint p;
    p.n = n;
    p.compressed_size = scaling_compressed_size(n);
    const Matrix positions = Matrix::NullaryExpr(n, 3, [&] { return uni(rng); });
    const Matrix x = Matrix::NullaryExpr(n, H, [&] { return normal(rng); });

    const BallTree tree = build_ball_tree(positions, config.local_size, p.compressed_size);
    const Matrix xt = gather_to_tree(tree, x);
    AttentionOptions ao;
    ao.heads = heads;
    ao.top_k = std::min<Index>(config.top_k, tree.compressed_ball_count());
    ao.use_compressed_in_sum = config.use_compressed_in_sum;
    ao.local_only = config.local_only;
    p.expected = expected_score_count(tree.n_padded, p.compressed_size, ao.top_k,
                                      config.local_size, ao.local_only);

    ScoreCounter::reset();
    {
      Graph g(Graph::Mode::Inference);
      nsa_attention(g, store, "bench", g.input(xt), tree, ao);
    }
    p.count = ScoreCounter::count();
    p.seconds = time_median(options.repeats, [&] {
      Graph g(Graph::Mode::Inference);
      nsa_attention(g, store, "bench", g.input(xt), tree, ao);
    });

    if (options.dense) {
      const Mask all = Mask::Constant(n, true);
      auto dense = [&] {
        const Matrix q = x * wq, k = x * wk, v = x * wv;
        Matrix o;
        dense_attention_forward<double>(q, k, v, heads, all, o);
        const Matrix y = o * wo;
        return y(0, 0);
      };
      ScoreCounter::reset();
      dense();
      p.dense_count = ScoreCounter::count();
      p.dense_seconds = time_median(options.repeats, dense);
    }
    report.points.push_back(p);
  }

  std::vector<double> ns, times, counts, dtimes, dcounts;
  for (const ScalingPoint& p : report.points) {
    ns.push_back(static_cast<double>(p.n));
    times.push_back(p.seconds);
    counts.push_back(static_cast<double>(p.count));
    dtimes.push_back(p.dense_seconds);
    dcounts.push_back(static_cast<double>(p.dense_count));
  }
  report.time_slope = loglog_slope(ns, times);
  report.count_slope = loglog_slope(ns, counts);
  if (options.dense) {
    report.dense_time_slope = loglog_slope(ns, dtimes);
    report.dense_count_slope = loglog_slope(ns, dcounts);
  }
  return report;
}

PointCloud line_cloud(Index n, Index features, Index targets, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  PointCloud c;
  c.positions = Matrix::Zero(n, 3);
  for (Index i = 0; i < n; ++i) c.positions(i, 0) = static_cast<double>(i);
  c.features = Matrix::NullaryExpr(n, features, [&] { return normal(rng); });
  c.targets = Matrix::NullaryExpr(n, targets, [&] { return normal(rng); });
  return c;
}

std::vector<AccessEntry> access_pattern_fixture(std::uint64_t seed) {
  NsaConfig cfg;
  cfg.local_size = 8;
  cfg.compressed_size = 4;
  cfg.top_k = 1;
  cfg.depth = 1;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.knn_k = 2;
  cfg.seed = seed;
  NsaModel model(cfg);
  const PointCloud cloud = line_cloud(16, cfg.in_features, cfg.out_features, seed);
  const PreparedCloud prepared = model.prepare(cloud);
  Graph g(Graph::Mode::Inference);
  std::vector<AttentionTrace> traces(1);
  traces[0].record_access = true;
  model.forward(g, prepared, g.input(cloud.features), &traces);
  return traces[0].access;
}

std::map<std::pair<Branch, Index>, Index> access_columns(const std::vector<AccessEntry>& entries) {
  std::map<std::pair<Branch, Index>, std::set<Index>> keys;
  for (const AccessEntry& e : entries) keys[{e.branch, e.query}].insert(e.key);
  std::map<std::pair<Branch, Index>, Index> out;
  for (const auto& [k, s] : keys) out[k] = static_cast<Index>(s.size());
  return out;
}

void write_influence_csv(std::ostream& os, const PointCloud& cloud, const InfluenceMap& map) {
  if (map.influence.size() != cloud.size()) {
    throw ShapeError("write_influence_csv: map has " + std::to_string(map.influence.size()) +
                     " nodes, cloud has " + std::to_string(cloud.size()));
  }
  os << "node,x,y,z,influence\n" << std::setprecision(17);
  for (Index i = 0; i < cloud.size(); ++i) {
    os << i << ',' << cloud.positions(i, 0) << ',' << cloud.positions(i, 1) << ','
       << cloud.positions(i, 2) << ',' << map.influence(i) << '\n';
  }
}

void write_scaling_csv(std::ostream& os, const ScalingReport& report) {
  os << "n,time,count,c,expected,dense_time,dense_count,deterministic\n" << std::setprecision(17);
  for (const ScalingPoint& p : report.points) {
    os << p.n << ',' << p.seconds << ',' << p.count << ',' << p.compressed_size << ','
       << p.expected << ',' << p.dense_seconds << ',' << p.dense_count << ','
       << (report.deterministic ? 1 : 0) << '\n';
  }
}

void write_throughput_csv(std::ostream& os,
                          const std::vector<std::pair<Index, ThroughputReport>>& rows) {
  os << "hidden,steps,median_step_seconds,steps_per_sec,peak_bytes\n" << std::setprecision(17);
  for (const auto& [hidden, r] : rows) {
    os << hidden << ',' << r.steps << ',' << r.median_step_seconds << ',' << r.steps_per_sec << ','
       << r.peak_bytes << '\n';
  }
}

void write_access_csv(std::ostream& os, const std::vector<AccessEntry>& entries) {
  os << "branch,query,key,weight\n" << std::setprecision(17);
  for (const AccessEntry& e : entries) {
    os << branch_name(e.branch) << ',' << e.query << ',' << e.key << ',' << e.weight << '\n';
  }
}

std::vector<std::filesystem::path> export_figures_data(const std::filesystem::path& dir,
                                                       const FigureData& data) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const char* name, auto&& write) {
    const std::filesystem::path path = dir / name;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    write(os);
    if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
    written.push_back(path);
  };
  if (data.influence != nullptr) {
    if (data.cloud == nullptr) throw ValueError("export_figures_data: influence needs its cloud");
    emit("influence.csv", [&](std::ostream& os) { write_influence_csv(os, *data.cloud, *data.influence); });
  }
  if (data.scaling != nullptr) {
    emit("scaling.csv", [&](std::ostream& os) { write_scaling_csv(os, *data.scaling); });
  }
  if (data.access != nullptr) {
    emit("access_pattern.csv", [&](std::ostream& os) { write_access_csv(os, *data.access); });
  }
  return written;
}

}  // namespace ensa
