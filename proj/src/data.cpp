#include "ensa/data.hpp"

#include "binary_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace ensa {

SyntheticTask parse_task(const std::string& name) {
  if (name == "local-density") return SyntheticTask::LocalDensity;
  if (name == "global-centroid-offset") return SyntheticTask::GlobalCentroidOffset;
  if (name == "mixed") return SyntheticTask::Mixed;
  throw ValueError("unknown task '" + name +
                   "' (expected local-density, global-centroid-offset or mixed)");
}

const char* task_name(SyntheticTask task) {
  switch (task) {
    case SyntheticTask::LocalDensity: return "local-density";
    case SyntheticTask::GlobalCentroidOffset: return "global-centroid-offset";
    case SyntheticTask::Mixed: return "mixed";
  }
  return "?";
}

Index task_target_dim(SyntheticTask task) {
  switch (task) {
    case SyntheticTask::LocalDensity: return 1;
    case SyntheticTask::GlobalCentroidOffset: return 3;
    case SyntheticTask::Mixed: return 4;
  }
  return 0;
}

void SyntheticTaskSpec::validate() const {
  if (clusters < 1 || n < clusters) {
    throw ValueError("synthetic task needs n >= clusters >= 1, got n=" + std::to_string(n) +
                     ", clusters=" + std::to_string(clusters));
  }
  if (!(noise_sigma >= 0.0) || !(radius >= 0.0) || !(box > 0.0)) {
    throw ValueError("synthetic task needs noise_sigma >= 0, radius >= 0, box > 0");
  }
  if (centers.size() != 0 && (centers.rows() != clusters || centers.cols() != 3)) {
    throw ShapeError("synthetic task centers must be clusters x 3, got " + shape_str(centers));
  }
}

namespace {

// Through a volatile: g++ 11 -O3 vectorises the plain round trip away.
double to_float(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

Matrix draw_centers(const SyntheticTaskSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> uni(-spec.box, spec.box);
  Matrix centers(spec.clusters, 3);
  for (Index b = 0; b < spec.clusters; ++b) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      for (int a = 0; a < 3; ++a) centers(b, a) = uni(rng);
      bool ok = true;
      for (Index o = 0; o < b && ok; ++o) {
        ok = (centers.row(b) - centers.row(o)).norm() >= spec.min_separation;
      }
      if (ok) break;
    }
  }
  return centers;
}

PointCloud generate_one(const SyntheticTaskSpec& spec, Index sample) {
  Rng rng(spec.seed ^ static_cast<std::uint64_t>(sample));
  const Matrix centers = spec.centers.size() != 0 ? spec.centers : draw_centers(spec, rng);
  std::normal_distribution<double> normal(0.0, 1.0);

  const Index n = spec.n;
  PointCloud cloud;
  cloud.positions.resize(n, 3);
  std::vector<Index> blob(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Index b = i % spec.clusters;
    blob[static_cast<std::size_t>(i)] = b;
    for (int a = 0; a < 3; ++a) {
      cloud.positions(i, a) = to_float(centers(b, a) + spec.noise_sigma * normal(rng));
    }
  }
  cloud.features = cloud.positions;

  Matrix centroid = Matrix::Zero(spec.clusters, 3);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(spec.clusters);
  for (Index i = 0; i < n; ++i) {
    centroid.row(blob[static_cast<std::size_t>(i)]) += cloud.positions.row(i);
    count(blob[static_cast<std::size_t>(i)]) += 1.0;
  }
  for (Index b = 0; b < spec.clusters; ++b) centroid.row(b) /= count(b);

  Matrix density(n, 1);
  if (spec.task != SyntheticTask::GlobalCentroidOffset) {
    const double r2 = spec.radius * spec.radius;
    for (Index i = 0; i < n; ++i) {
      Index hits = 0;
      for (Index j = 0; j < n; ++j) {
        if (j != i && (cloud.positions.row(j) - cloud.positions.row(i)).squaredNorm() <= r2) ++hits;
      }
      density(i, 0) = to_float(static_cast<double>(hits) / static_cast<double>(n));
    }
  }
  Matrix offset(n, 3);
  if (spec.task != SyntheticTask::LocalDensity) {
    for (Index i = 0; i < n; ++i) {
      Index far = 0;
      double best = -1.0;
      for (Index b = 0; b < spec.clusters; ++b) {
        const double d = (centroid.row(b) - cloud.positions.row(i)).squaredNorm();
        if (d > best) {
          best = d;
          far = b;
        }
      }
      for (int a = 0; a < 3; ++a) offset(i, a) = to_float(centroid(far, a) - cloud.positions(i, a));
    }
  }
  switch (spec.task) {
    case SyntheticTask::LocalDensity: cloud.targets = density; break;
    case SyntheticTask::GlobalCentroidOffset: cloud.targets = offset; break;
    case SyntheticTask::Mixed:
      cloud.targets.resize(n, 4);
      cloud.targets << density, offset;
      break;
  }
  return cloud;
}

}  // namespace

Dataset generate(const SyntheticTaskSpec& spec, Index count) {
  spec.validate();
  if (count < 1) throw ValueError("generate: count must be >= 1");
  Dataset data;
  data.reserve(static_cast<std::size_t>(count));
  for (Index s = 0; s < count; ++s) data.push_back(generate_one(spec, s));
  return data;
}

namespace {
constexpr char kCloudMagic[4] = {'E', 'P', 'C', 'D'};

void write_block(std::ostream& os, const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) detail::write_le<float>(os, static_cast<float>(m.data()[i]));
}

Matrix read_block(detail::LeReader& in, Index rows, Index cols, const char* what) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = in.read<float>(what);
  return m;
}
}  // namespace

void write_epcd(std::ostream& os, const PointCloud& cloud) {
  cloud.validate();
  os.write(kCloudMagic, 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cloud.size()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cloud.feature_dim()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cloud.target_dim()));
  write_block(os, cloud.positions);
  write_block(os, cloud.features);
  write_block(os, cloud.targets);
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  for (const PointCloud& c : data) write_epcd(os, c);
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Dataset read_dataset(std::istream& is, const std::string& source) {
  detail::LeReader in(is, source);
  Dataset data;
  while (!in.at_eof()) {
    const std::string magic = in.read_bytes(4, "magic");
    if (magic != std::string(kCloudMagic, 4)) {
      in.fail_at("bad magic, expected \"EPCD\"", in.offset() - 4);
    }
    const auto n = in.read<std::uint32_t>("point count");
    const auto f = in.read<std::uint32_t>("feature count");
    const auto t = in.read<std::uint32_t>("target count");
    if (n == 0) in.fail_at("record with zero points", in.offset() - 12);
    PointCloud c;
    c.positions = read_block(in, n, 3, "positions");
    c.features = read_block(in, n, f, "features");
    c.targets = read_block(in, n, t, "targets");
    data.push_back(std::move(c));
  }
  return data;
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return read_dataset(is, path.string());
}

void write_csv(std::ostream& os, const PointCloud& cloud) {
  cloud.validate();
  os << "x,y,z";
  for (Index j = 0; j < cloud.feature_dim(); ++j) os << ",f" << j + 1;
  for (Index j = 0; j < cloud.target_dim(); ++j) os << ",t" << j + 1;
  os << '\n';
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Index i = 0; i < cloud.size(); ++i) {
    os << cloud.positions(i, 0) << ',' << cloud.positions(i, 1) << ',' << cloud.positions(i, 2);
    for (Index j = 0; j < cloud.feature_dim(); ++j) os << ',' << cloud.features(i, j);
    for (Index j = 0; j < cloud.target_dim(); ++j) os << ',' << cloud.targets(i, j);
    os << '\n';
  }
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

PointCloud read_csv(std::istream& is, const std::string& source) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError(source + ": missing header line", 1);
  const std::vector<std::string> header = split_commas(line);
  std::map<std::string, Index> col;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (!col.emplace(header[j], static_cast<Index>(j)).second) {
      throw ParseError(source + ": duplicate column '" + header[j] + "'", 1);
    }
  }
  for (const char* name : {"x", "y", "z"}) {
    if (!col.count(name)) throw ParseError(source + ": missing column '" + std::string(name) + "'", 1);
  }
  auto count_prefixed = [&](char prefix) {
    Index count = 0, highest = 0;
    for (const auto& [name, j] : col) {
      if (name.size() < 2 || name[0] != prefix) continue;
      Index k = 0;
      auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), k);
      if (ec != std::errc() || ptr != name.data() + name.size() || k < 1) continue;
      ++count;
      highest = std::max(highest, k);
    }
    for (Index k = 1; k <= highest; ++k) {
      const std::string name = std::string(1, prefix) + std::to_string(k);
      if (!col.count(name)) throw ParseError(source + ": missing column '" + name + "'", 1);
    }
    return count;
  };
  const Index F = count_prefixed('f');
  const Index T = count_prefixed('t');
  if (static_cast<Index>(header.size()) != 3 + F + T) {
    for (const std::string& h : header) {
      const bool known = h == "x" || h == "y" || h == "z" ||
                         ((h[0] == 'f' || h[0] == 't') && h.size() > 1 &&
                          h.find_first_not_of("0123456789", 1) == std::string::npos);
      if (!known) throw ParseError(source + ": unexpected column '" + h + "'", 1);
    }
  }

  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split_commas(line);
    if (cells.size() != header.size()) {
      throw ParseError(source + ": line " + std::to_string(line_no) + " has " +
                           std::to_string(cells.size()) + " fields, header has " +
                           std::to_string(header.size()),
                       line_no);
    }
    std::vector<double> values(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const std::string& s = cells[j];
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), values[j]);
      if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw ParseError(source + ": line " + std::to_string(line_no) + ", column '" + header[j] +
                             "': cannot parse '" + s + "'",
                         line_no);
      }
    }
    rows.push_back(std::move(values));
  }

  const auto n = static_cast<Index>(rows.size());
  PointCloud c;
  c.positions.resize(n, 3);
  c.features.resize(n, F);
  c.targets.resize(n, T);
  for (Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    c.positions(i, 0) = r[static_cast<std::size_t>(col["x"])];
    c.positions(i, 1) = r[static_cast<std::size_t>(col["y"])];
    c.positions(i, 2) = r[static_cast<std::size_t>(col["z"])];
    for (Index j = 0; j < F; ++j) {
      c.features(i, j) = r[static_cast<std::size_t>(col["f" + std::to_string(j + 1)])];
    }
    for (Index j = 0; j < T; ++j) {
      c.targets(i, j) = r[static_cast<std::size_t>(col["t" + std::to_string(j + 1)])];
    }
  }
  return c;
}

void save_csv(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_csv(os, cloud);
}

PointCloud load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return read_csv(is, path.string());
}

}  // namespace ensa
