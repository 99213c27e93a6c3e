#pragma once

#include "ensa/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ensa {

using Dataset = std::vector<PointCloud>;

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 1.0;
};

class Adam {
public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  // Applies one update from the gradients currently held in store.
  // Returns the pre-clip global gradient norm.
  double step(ParamStore& store);
  std::int64_t steps_taken() const { return t_; }

private:
  AdamOptions options_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, Matrix> m_;
  std::unordered_map<std::string, Matrix> v_;
};

struct TrainOptions {
  std::int64_t steps = 1000;
  AdamOptions adam;
  std::uint64_t seed = 0;
};

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double steps_per_sec = 0.0;
  // Tensor bytes allocated during the step above what was live before it.
  std::size_t peak_bytes = 0;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  double seconds = 0.0;
  double mean_steps_per_sec() const;
};

class TrainingDiverged : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Loss of one step on a fresh graph; the step index lets callers pick data.
using StepObjective = std::function<Var(Graph&, ParamStore&, std::int64_t step)>;

// zero_grad -> objective -> backward -> Adam, `steps` times.
TrainReport train_objective(ParamStore& store, const StepObjective& objective,
                            const TrainOptions& options);

// Batch size one; samples visited in a seeded reshuffle each epoch.
TrainReport train(NsaModel& model, const Dataset& data, const TrainOptions& options);

// Mean of per-cloud MSE.
double evaluate_mse(NsaModel& model, const Dataset& data);

// step,loss,steps_per_sec,peak_bytes
void write_report_csv(std::ostream& os, const TrainReport& report);
void write_report_csv(const std::filesystem::path& path, const TrainReport& report);

}  // namespace ensa
