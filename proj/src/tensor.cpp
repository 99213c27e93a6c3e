#include "ensa/tensor.hpp"

#include <utility>

namespace ensa {

namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

std::string shape_str(Index rows, Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

void MemoryTracker::add(std::size_t bytes) {
  const std::size_t now = g_current.fetch_add(bytes) + bytes;
  std::size_t prev = g_peak.load();
  while (now > prev && !g_peak.compare_exchange_weak(prev, now)) {
  }
}

void MemoryTracker::remove(std::size_t bytes) { g_current.fetch_sub(bytes); }
std::size_t MemoryTracker::current() { return g_current.load(); }
std::size_t MemoryTracker::peak() { return g_peak.load(); }
void MemoryTracker::reset_peak() { g_peak.store(g_current.load()); }

Tensor2::Tensor2(Index rows, Index cols) : data_(Matrix::Zero(rows, cols)) { track(); }

Tensor2::Tensor2(Matrix value) : data_(std::move(value)) { track(); }

Tensor2::Tensor2(const Tensor2& other) : data_(other.data_) { track(); }

Tensor2::Tensor2(Tensor2&& other) noexcept
    : data_(std::move(other.data_)), tracked_(other.tracked_) {
  other.tracked_ = 0;
  other.data_.resize(0, 0);
}

Tensor2& Tensor2::operator=(const Tensor2& other) {
  if (this != &other) {
    untrack();
    data_ = other.data_;
    track();
  }
  return *this;
}

Tensor2& Tensor2::operator=(Tensor2&& other) noexcept {
  if (this != &other) {
    untrack();
    data_ = std::move(other.data_);
    tracked_ = other.tracked_;
    other.tracked_ = 0;
    other.data_.resize(0, 0);
  }
  return *this;
}

Tensor2::~Tensor2() { untrack(); }

void Tensor2::track() {
  tracked_ = static_cast<std::size_t>(data_.size()) * sizeof(double);
  MemoryTracker::add(tracked_);
}

void Tensor2::untrack() {
  MemoryTracker::remove(tracked_);
  tracked_ = 0;
}

}  // namespace ensa
