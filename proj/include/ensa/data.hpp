#pragma once

#include "ensa/balltree.hpp"
#include "ensa/train.hpp"

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace ensa {

enum class SyntheticTask { LocalDensity, GlobalCentroidOffset, Mixed };

SyntheticTask parse_task(const std::string& name);
const char* task_name(SyntheticTask task);
// 1 for local-density, 3 for global-centroid-offset, 4 for mixed.
Index task_target_dim(SyntheticTask task);

struct SyntheticTaskSpec {
  SyntheticTask task = SyntheticTask::GlobalCentroidOffset;
  Index n = 256;
  Index clusters = 2;
  double noise_sigma = 0.05;  // blob standard deviation
  double radius = 0.1;        // neighbourhood radius of the density target
  double box = 1.0;           // blob centres drawn from [-box, box]^3
  double min_separation = 0.8;
  std::uint64_t seed = 0;
  // Fixed blob centres (clusters x 3); drawn at random when empty.
  Matrix centers;

  void validate() const;
};

// Clouds of spec.n points split evenly over Gaussian blobs (point i belongs
// to blob i mod clusters). Features are the positions. Targets:
//   local-density: neighbours j != i with |p_j - p_i| <= radius, divided by n;
//   global-centroid-offset: centroid of the blob whose centroid is farthest
//     from p_i (ties to the lower blob) minus p_i;
//   mixed: [density | offset].
// Sample s draws from a generator seeded with spec.seed ^ s. All values are
// rounded to float so the binary format stores them exactly.
Dataset generate(const SyntheticTaskSpec& spec, Index count);

// Binary cloud records: "EPCD", n u32, F u32, T u32, then positions,
// features and targets as little-endian float32. A dataset file is a
// sequence of records.
void write_epcd(std::ostream& os, const PointCloud& cloud);
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);
Dataset read_dataset(std::istream& is, const std::string& source);

// CSV with header x,y,z,f1..fF[,t1..tT]; one cloud per file.
void write_csv(std::ostream& os, const PointCloud& cloud);
PointCloud read_csv(std::istream& is, const std::string& source);
void save_csv(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud load_csv(const std::filesystem::path& path);

}  // namespace ensa
