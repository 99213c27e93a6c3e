#include "ensa/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

namespace ensa {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
    throw ConfigError("bad value for '" + key + "': '" + value + "'");
  }
  return out;
}

Index parse_index(const std::string& key, const std::string& value) {
  return static_cast<Index>(parse_number<long long>(key, value));
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError("bad boolean for '" + key + "': '" + value + "'");
}

std::vector<Index> parse_sizes(const std::string& key, const std::string& value) {
  std::vector<Index> out;
  std::istringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_index(key, trim(item)));
  if (out.empty()) throw ConfigError("'" + key + "' needs at least one size");
  return out;
}

void apply_preset(NsaConfig& m, const std::string& value) {
  NsaConfig p;
  if (value == "cosmology") {
    p = NsaConfig::cosmology();
  } else if (value == "md" || value == "molecular_dynamics") {
    p = NsaConfig::molecular_dynamics();
  } else if (value == "shapenet") {
    p = NsaConfig::shapenet();
  } else {
    throw ConfigError("unknown model.preset '" + value + "' (cosmology, md, shapenet)");
  }
  m.local_size = p.local_size;
  m.compressed_size = p.compressed_size;
  m.top_k = p.top_k;
  m.depth = p.depth;
  m.hidden = p.hidden;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      const auto s = parse_number<std::uint64_t>(k, v);
      c.model.seed = s;
      c.train.seed = s;
      c.data.spec.seed = s;
    };
    t["model.preset"] = [](RunConfig& c, const std::string&, const std::string& v) {
      apply_preset(c.model, v);
    };
    auto model_index = [&t](std::initializer_list<const char*> keys, Index NsaConfig::*field) {
      for (const char* key : keys) {
        t[key] = [field](RunConfig& c, const std::string& k, const std::string& v) {
          c.model.*field = parse_index(k, v);
        };
      }
    };
    model_index({"model.local_size", "model.m"}, &NsaConfig::local_size);
    model_index({"model.compressed_size", "model.c"}, &NsaConfig::compressed_size);
    model_index({"model.top_k", "model.k"}, &NsaConfig::top_k);
    model_index({"model.depth"}, &NsaConfig::depth);
    model_index({"model.hidden"}, &NsaConfig::hidden);
    model_index({"model.heads"}, &NsaConfig::heads);
    model_index({"model.mlp_ratio"}, &NsaConfig::mlp_ratio);
    model_index({"model.knn_k"}, &NsaConfig::knn_k);
    model_index({"model.bias_hidden"}, &NsaConfig::bias_hidden);
    t["model.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.model.seed = parse_number<std::uint64_t>(k, v);
    };
    t["model.use_compressed_in_sum"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.model.use_compressed_in_sum = parse_bool(k, v);
    };
    t["model.local_only"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.model.local_only = parse_bool(k, v);
    };

    t["train.steps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.steps = parse_number<std::int64_t>(k, v);
    };
    auto adam_double = [&t](const char* key, double AdamOptions::*field) {
      t[key] = [field](RunConfig& c, const std::string& k, const std::string& v) {
        c.train.adam.*field = parse_number<double>(k, v);
      };
    };
    adam_double("train.lr", &AdamOptions::lr);
    adam_double("train.beta1", &AdamOptions::beta1);
    adam_double("train.beta2", &AdamOptions::beta2);
    adam_double("train.eps", &AdamOptions::eps);
    adam_double("train.clip", &AdamOptions::clip_norm);
    t["train.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.train.seed = parse_number<std::uint64_t>(k, v);
    };

    t["data.task"] = [](RunConfig& c, const std::string&, const std::string& v) {
      try {
        c.data.spec.task = parse_task(v);
      } catch (const ValueError& e) {
        throw ConfigError(e.what());
      }
    };
    t["data.n"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.data.spec.n = parse_index(k, v);
    };
    t["data.clusters"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.data.spec.clusters = parse_index(k, v);
    };
    auto spec_double = [&t](const char* key, double SyntheticTaskSpec::*field) {
      t[key] = [field](RunConfig& c, const std::string& k, const std::string& v) {
        c.data.spec.*field = parse_number<double>(k, v);
      };
    };
    spec_double("data.noise_sigma", &SyntheticTaskSpec::noise_sigma);
    spec_double("data.radius", &SyntheticTaskSpec::radius);
    spec_double("data.box", &SyntheticTaskSpec::box);
    spec_double("data.min_separation", &SyntheticTaskSpec::min_separation);
    t["data.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.data.spec.seed = parse_number<std::uint64_t>(k, v);
    };
    t["data.train_count"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.data.train_count = parse_index(k, v);
    };
    t["data.val_count"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.data.val_count = parse_index(k, v);
    };

    t["bench.sizes"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bench.sizes = parse_sizes(k, v);
    };
    t["bench.repeats"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bench.repeats = parse_index(k, v);
    };
    t["bench.dense"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bench.dense = parse_bool(k, v);
    };
    t["bench.throughput_steps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.bench.throughput_steps = parse_index(k, v);
    };
    t["influence.node"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.influence_node = parse_index(k, v);
    };
    return t;
  }();
  return table;
}

}  // namespace

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(config, key, value);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  apply_setting(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void parse_config(std::istream& is, const std::string& source, RunConfig& config) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  RunConfig config;
  parse_config(is, path.string(), config);
  return config;
}

void sync_model_io(RunConfig& config) {
  config.model.in_features = 3;
  config.model.out_features = task_target_dim(config.data.spec.task);
}

std::string dump_config(const RunConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17) << std::boolalpha;
  os << "model.local_size = " << c.model.local_size << '\n'
     << "model.compressed_size = " << c.model.compressed_size << '\n'
     << "model.top_k = " << c.model.top_k << '\n'
     << "model.depth = " << c.model.depth << '\n'
     << "model.hidden = " << c.model.hidden << '\n'
     << "model.heads = " << c.model.heads << '\n'
     << "model.mlp_ratio = " << c.model.mlp_ratio << '\n'
     << "model.knn_k = " << c.model.knn_k << '\n'
     << "model.bias_hidden = " << c.model.bias_hidden << '\n'
     << "model.seed = " << c.model.seed << '\n'
     << "model.use_compressed_in_sum = " << c.model.use_compressed_in_sum << '\n'
     << "model.local_only = " << c.model.local_only << '\n'
     << "train.steps = " << c.train.steps << '\n'
     << "train.lr = " << c.train.adam.lr << '\n'
     << "train.beta1 = " << c.train.adam.beta1 << '\n'
     << "train.beta2 = " << c.train.adam.beta2 << '\n'
     << "train.eps = " << c.train.adam.eps << '\n'
     << "train.clip = " << c.train.adam.clip_norm << '\n'
     << "train.seed = " << c.train.seed << '\n'
     << "data.task = " << task_name(c.data.spec.task) << '\n'
     << "data.n = " << c.data.spec.n << '\n'
     << "data.clusters = " << c.data.spec.clusters << '\n'
     << "data.noise_sigma = " << c.data.spec.noise_sigma << '\n'
     << "data.radius = " << c.data.spec.radius << '\n'
     << "data.box = " << c.data.spec.box << '\n'
     << "data.min_separation = " << c.data.spec.min_separation << '\n'
     << "data.seed = " << c.data.spec.seed << '\n'
     << "data.train_count = " << c.data.train_count << '\n'
     << "data.val_count = " << c.data.val_count << '\n';
  os << "bench.sizes = ";
  for (std::size_t i = 0; i < c.bench.sizes.size(); ++i) os << (i ? "," : "") << c.bench.sizes[i];
  os << '\n'
     << "bench.repeats = " << c.bench.repeats << '\n'
     << "bench.dense = " << c.bench.dense << '\n'
     << "bench.throughput_steps = " << c.bench.throughput_steps << '\n'
     << "influence.node = " << c.influence_node << '\n';
  return os.str();
}

}  // namespace ensa
