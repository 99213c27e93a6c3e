#include "ensa/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

namespace ensa {

double Adam::step(ParamStore& store) {
  double sq = 0.0;
  const std::vector<std::string> names = store.names();
  for (const std::string& name : names) sq += store.grad(name).squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip =
      options_.clip_norm > 0.0 && norm > options_.clip_norm ? options_.clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (const std::string& name : names) {
    const Matrix g = store.grad(name) * clip;
    auto [mit, m_new] = m_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = options_.beta1 * m + (1.0 - options_.beta1) * g;
    v = options_.beta2 * v + (1.0 - options_.beta2) * g.cwiseProduct(g);
    if (options_.lr == 0.0) continue;
    Matrix& w = store.mutable_value(name);
    w.array() -= options_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + options_.eps);
  }
  return norm;
}

double TrainReport::mean_steps_per_sec() const {
  return seconds > 0.0 ? static_cast<double>(steps.size()) / seconds : 0.0;
}

TrainReport train_objective(ParamStore& store, const StepObjective& objective,
                            const TrainOptions& options) {
  using clock = std::chrono::steady_clock;
  Adam adam(options.adam);
  TrainReport report;
  report.steps.reserve(static_cast<std::size_t>(std::max<std::int64_t>(options.steps, 0)));
  const auto start = clock::now();
  for (std::int64_t s = 0; s < options.steps; ++s) {
    const auto t0 = clock::now();
    MemoryTracker::reset_peak();
    const std::size_t baseline = MemoryTracker::current();
    store.zero_grad();
    double loss = 0.0;
    try {
      Graph g;
      Var l = objective(g, store, s);
      loss = l.value()(0, 0);
      g.backward(l);
      adam.step(store);
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(s) + ": " + e.what());
    }
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(s) + ": loss is " +
                             std::to_string(loss));
    }
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    report.steps.push_back({s, loss, dt > 0.0 ? 1.0 / dt : 0.0, MemoryTracker::peak() - baseline});
  }
  report.seconds = std::chrono::duration<double>(clock::now() - start).count();
  return report;
}

TrainReport train(NsaModel& model, const Dataset& data, const TrainOptions& options) {
  if (data.empty()) throw ValueError("train: dataset is empty");
  std::vector<PreparedCloud> prepared;
  prepared.reserve(data.size());
  for (const PointCloud& c : data) {
    if (c.target_dim() != model.config().out_features) {
      throw ShapeError("train: cloud has " + std::to_string(c.target_dim()) +
                       " target columns, model predicts " +
                       std::to_string(model.config().out_features));
    }
    prepared.push_back(model.prepare(c));
  }

  Rng rng(options.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  auto objective = [&](Graph& g, ParamStore&, std::int64_t) {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t idx = order[cursor++];
    Var features = g.input(data[idx].features, false, "features");
    Var pred = model.forward(g, prepared[idx], features);
    Var target = g.input(data[idx].targets, false, "targets");
    return mse_loss(pred, target);
  };
  return train_objective(model.params(), objective, options);
}

double evaluate_mse(NsaModel& model, const Dataset& data) {
  if (data.empty()) throw ValueError("evaluate_mse: dataset is empty");
  double total = 0.0;
  for (const PointCloud& c : data) total += mse(model.predict(c), c.targets);
  return total / static_cast<double>(data.size());
}

void write_report_csv(std::ostream& os, const TrainReport& report) {
  os << "step,loss,steps_per_sec,peak_bytes\n";
  os << std::setprecision(17);
  for (const StepRecord& r : report.steps) {
    os << r.step << ',' << r.loss << ',' << std::setprecision(6) << r.steps_per_sec
       << std::setprecision(17) << ',' << r.peak_bytes << '\n';
  }
}

void write_report_csv(const std::filesystem::path& path, const TrainReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_report_csv(os, report);
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace ensa
