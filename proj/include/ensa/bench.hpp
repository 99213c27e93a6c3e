#pragma once

#include "ensa/model.hpp"
#include "ensa/train.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <utility>
#include <vector>

namespace ensa {

inline constexpr double kInfluenceThreshold = 1e-12;

struct InfluenceMap {
  Index target = 0;
  // Per input node: L2 norm over feature columns of d|y_target|^2 / dx_i.
  Eigen::VectorXd influence;
  double threshold = kInfluenceThreshold;
  Index influenced = 0;  // nodes with influence > threshold
  // Counts per decade [10^e, 10^(e+1)) for e = histogram_low .. histogram_low + bins - 1;
  // values at or below the threshold are counted in below_threshold.
  int histogram_low = -12;
  std::vector<Index> histogram;
  Index below_threshold = 0;
};

InfluenceMap influence(NsaModel& model, const PointCloud& cloud, Index target,
                       double threshold = kInfluenceThreshold);

struct ThroughputReport {
  Index steps = 0;
  double median_step_seconds = 0.0;
  double steps_per_sec = 0.0;
  std::size_t peak_bytes = 0;
};

// Training steps on a copy of the model (the caller's parameters are left
// alone): 3 warm-up steps, then `steps` timed ones. Needs steps >= 10.
ThroughputReport measure_throughput(const NsaModel& model, const Dataset& data, Index steps);

struct ScalingOptions {
  std::vector<Index> sizes{1024, 2048, 4096, 8192, 16384};
  Index repeats = 3;
  bool dense = true;
  std::uint64_t seed = 0;
};

struct ScalingPoint {
  Index n = 0;
  Index compressed_size = 0;
  double seconds = 0.0;          // median forward time of one attention layer
  std::uint64_t count = 0;       // query-key scores evaluated
  std::uint64_t expected = 0;    // closed-form count
  double dense_seconds = 0.0;    // 0 when the dense sweep is off
  std::uint64_t dense_count = 0;
};

struct ScalingReport {
  std::vector<ScalingPoint> points;
  double time_slope = 0.0;
  double count_slope = 0.0;  // least squares over the measured counts
  double dense_time_slope = 0.0;
  double dense_count_slope = 0.0;
  // Leading exponent of n (n/c + k c + m) with c ~ n^0.5.
  double analytic_slope = 0.0;
  bool deterministic = false;
  int threads = 1;
};

// Compressed ball size used for n: the power of two nearest to sqrt(n),
// rounding up on ties.
Index scaling_compressed_size(Index n);

// Largest exponent among the terms of n (n/c + k c + m) when c = n^alpha.
double count_exponent(double alpha);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// Forward timing of one attention layer (width, heads, m and k taken from the
// template) on uniform random clouds. Needs at least 4 sizes, each a power of
// two, strictly increasing.
ScalingReport scaling_sweep(const NsaConfig& config, const ScalingOptions& options);

// n points at (i, 0, 0) with random features and targets.
PointCloud line_cloud(Index n, Index features, Index targets, std::uint64_t seed);

// Access entries of a depth-1 model with c = 4, m = 8, k = 1 on the 16-point line.
std::vector<AccessEntry> access_pattern_fixture(std::uint64_t seed = 0);

// Distinct keys per (branch, query).
std::map<std::pair<Branch, Index>, Index> access_columns(const std::vector<AccessEntry>& entries);

// node,x,y,z,influence
void write_influence_csv(std::ostream& os, const PointCloud& cloud, const InfluenceMap& map);
// n,time,count,c,expected,dense_time,dense_count,deterministic
void write_scaling_csv(std::ostream& os, const ScalingReport& report);
// hidden,steps,median_step_seconds,steps_per_sec,peak_bytes
void write_throughput_csv(std::ostream& os, const std::vector<std::pair<Index, ThroughputReport>>& rows);
// branch,query,key,weight
void write_access_csv(std::ostream& os, const std::vector<AccessEntry>& entries);

struct FigureData {
  const PointCloud* cloud = nullptr;
  const InfluenceMap* influence = nullptr;
  const ScalingReport* scaling = nullptr;
  const std::vector<AccessEntry>* access = nullptr;
};

// Writes influence.csv, scaling.csv and access_pattern.csv into dir for the
// parts that are present. Returns the files written.
std::vector<std::filesystem::path> export_figures_data(const std::filesystem::path& dir,
                                                       const FigureData& data);

}  // namespace ensa
