#include "ensa/param_store.hpp"

#include "binary_io.hpp"

#include <fstream>
#include <limits>

namespace ensa {

namespace detail {
void LeReader::fail_at(const std::string& msg, std::size_t offset) const {
  throw ParseError(source_ + ": " + msg + " at byte offset " + std::to_string(offset), offset);
}
}  // namespace detail

namespace {
constexpr char kMagic[4] = {'E', 'N', 'S', 'A'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void ParamStore::create(const std::string& name, Matrix init) {
  if (name.empty()) throw ValueError("parameter name must be non-empty");
  if (entries_.count(name)) throw ValueError("duplicate parameter name '" + name + "'");
  if (!all_finite(init)) throw NumericError("non-finite initial value for '" + name + "'");
  const Index r = init.rows(), c = init.cols();
  entries_.emplace(name, Entry{Tensor2(std::move(init)), Tensor2(r, c)});
}

bool ParamStore::contains(const std::string& name) const { return entries_.count(name) != 0; }

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ValueError("unknown parameter '" + name + "'");
  return it->second;
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ValueError("unknown parameter '" + name + "'");
  return it->second;
}

const Matrix& ParamStore::value(const std::string& name) const { return entry(name).value.mat(); }

void ParamStore::set(const std::string& name, const Matrix& value) {
  Entry& e = entry(name);
  if (value.rows() != e.value.rows() || value.cols() != e.value.cols()) {
    throw ShapeError("parameter '" + name + "' has shape " + shape_str(e.value.mat()) +
                     ", got " + shape_str(value));
  }
  e.value.mat() = value;
}

Matrix& ParamStore::mutable_value(const std::string& name) { return entry(name).value.mat(); }

const Matrix& ParamStore::grad(const std::string& name) const { return entry(name).grad.mat(); }

void ParamStore::accumulate_grad(const std::string& name, const Matrix& g) {
  Entry& e = entry(name);
  if (g.rows() != e.grad.rows() || g.cols() != e.grad.cols()) {
    throw ShapeError("gradient for '" + name + "' has shape " + shape_str(g) + ", expected " +
                     shape_str(e.grad.mat()));
  }
  e.grad.mat() += g;
}

void ParamStore::zero_grad() {
  for (auto& [name, e] : entries_) e.grad.mat().setZero();
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

Index ParamStore::element_count() const {
  Index n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    const Matrix& x = a->second.value.mat();
    const Matrix& y = b->second.value.mat();
    if (x.rows() != y.rows() || x.cols() != y.cols() || x != y) return false;
  }
  return true;
}

void ParamStore::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 4);
  detail::write_le<std::uint32_t>(os, kVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ValueError("parameter name too long: " + name);
    }
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Matrix& v = e.value.mat();
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v.rows()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v.cols()));
    for (Index i = 0; i < v.size(); ++i) detail::write_le<double>(os, v.data()[i]);
  }
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

ParamStore ParamStore::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  detail::LeReader in(is, path.string());
  const std::string magic = in.read_bytes(4, "magic");
  if (magic != std::string(kMagic, 4)) in.fail_at("bad magic, expected \"ENSA\"", 0);
  const auto version = in.read<std::uint32_t>("version");
  if (version != kVersion) in.fail_at("unsupported version " + std::to_string(version), 4);
  const auto count = in.read<std::uint32_t>("entry count");
  ParamStore store;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = in.read<std::uint16_t>("name length");
    std::string name = in.read_bytes(len, "name");
    const auto rows = in.read<std::uint32_t>("rows");
    const auto cols = in.read<std::uint32_t>("cols");
    Matrix v(rows, cols);
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = in.read<double>("value");
    if (store.contains(name)) in.fail("duplicate entry '" + name + "'");
    store.create(name, std::move(v));
  }
  if (!in.at_eof()) in.fail("trailing bytes after last entry");
  return store;
}

}  // namespace ensa
