#pragma once

#include "ensa/data.hpp"
#include "ensa/model.hpp"
#include "ensa/train.hpp"

#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>
#include <vector>

namespace ensa {

// Unknown key, malformed line or bad value in a config file or override.
class ConfigError : public ValueError {
public:
  using ValueError::ValueError;
};

struct DataSettings {
  SyntheticTaskSpec spec;
  Index train_count = 200;
  Index val_count = 50;
};

struct BenchSettings {
  std::vector<Index> sizes{1024, 2048, 4096, 8192, 16384};
  Index repeats = 3;
  bool dense = true;
  Index throughput_steps = 20;
};

struct RunConfig {
  NsaConfig model;
  TrainOptions train;
  DataSettings data;
  BenchSettings bench;
  Index influence_node = 0;
};

// Applies one `key = value` assignment. Keys:
//   seed                       model, train and data seeds together
//   model.preset               cosmology | md | shapenet (architecture fields)
//   model.{local_size|m, compressed_size|c, top_k|k, depth, hidden, heads,
//          mlp_ratio, knn_k, bias_hidden, seed, use_compressed_in_sum, local_only}
//   train.{steps, lr, beta1, beta2, eps, clip, seed}
//   data.{task, n, clusters, noise_sigma, radius, box, min_separation, seed,
//         train_count, val_count}
//   bench.{sizes, repeats, dense, throughput_steps}
//   influence.node
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
// "key=value" form used by --set.
void apply_override(RunConfig& config, const std::string& assignment);

// Plain-text lines of `key = value`; '#' starts a comment.
void parse_config(std::istream& is, const std::string& source, RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);

// Input and output widths follow from the data task.
void sync_model_io(RunConfig& config);

// key = value lines that parse back to the same configuration.
std::string dump_config(const RunConfig& config);

}  // namespace ensa
