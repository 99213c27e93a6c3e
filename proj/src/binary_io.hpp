#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace ensa::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    std::memcpy(&v, buf, sizeof(T));
  }
  return v;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

// Reads with a running byte offset so parse failures can point at the spot.
class LeReader {
public:
  LeReader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}

  template <typename T>
  T read(const char* what) {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(T))) {
      fail(std::string("truncated input while reading ") + what);
    }
    offset_ += sizeof(T);
    return byteswap_if_big(v);
  }

  std::string read_bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (is_.gcount() != static_cast<std::streamsize>(n)) {
      fail(std::string("truncated input while reading ") + what);
    }
    offset_ += n;
    return s;
  }

  bool at_eof() { return is_.peek() == std::char_traits<char>::eof(); }
  std::size_t offset() const { return offset_; }
  [[noreturn]] void fail(const std::string& msg) const { fail_at(msg, offset_); }
  [[noreturn]] void fail_at(const std::string& msg, std::size_t offset) const;

private:
  std::istream& is_;
  std::string source_;
  std::size_t offset_ = 0;
};

}  // namespace ensa::detail
