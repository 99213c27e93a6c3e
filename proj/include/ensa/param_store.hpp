#pragma once

#include "ensa/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ensa {

// Named learnable arrays with gradient accumulators. Names are unique and a
// shape is fixed once the entry exists. Gradients are only cleared by
// zero_grad().
class ParamStore {
public:
  void create(const std::string& name, Matrix init);
  bool contains(const std::string& name) const;

  const Matrix& value(const std::string& name) const;
  // Overwrites an entry; the new value must have the stored shape.
  void set(const std::string& name, const Matrix& value);
  // Entry-wise write access; shape stays fixed.
  Matrix& mutable_value(const std::string& name);

  const Matrix& grad(const std::string& name) const;
  void accumulate_grad(const std::string& name, const Matrix& g);
  void zero_grad();

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  Index element_count() const;

  void save(const std::filesystem::path& path) const;
  static ParamStore load(const std::filesystem::path& path);

  bool operator==(const ParamStore& other) const;

private:
  struct Entry {
    Tensor2 value;
    Tensor2 grad;
  };
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);

  std::map<std::string, Entry> entries_;
};

}  // namespace ensa
