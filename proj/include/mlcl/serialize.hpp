#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "mlcl/tensor.hpp"

// Minimal binary IO helpers shared by the checkpoint, buffer-snapshot, and
// run-snapshot containers. Native byte order; these files are working state
// for a single machine, not an interchange format.
namespace mlcl::io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("serialize: write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw std::runtime_error("serialize: unexpected end of stream");
  }
}

template <class T>
void write_pod(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  write_bytes(os, &v, sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v;
  read_bytes(is, &v, sizeof(T));
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  const auto len = read_pod<std::uint32_t>(is);
  if (len > (1u << 24)) throw std::runtime_error("serialize: implausible string length");
  std::string s(len, '\0');
  if (len > 0) read_bytes(is, s.data(), len);
  return s;
}

template <class T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_pod<std::uint8_t>(os, dtype_tag<T>());
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) write_pod<std::int32_t>(os, d);
  write_bytes(os, t.values().data(), t.size() * sizeof(T));
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
  const auto tag = read_pod<std::uint8_t>(is);
  if (tag != dtype_tag<T>()) {
    throw std::runtime_error("serialize: tensor dtype tag " + std::to_string(tag) +
                             " does not match the requested element type");
  }
  const auto ndim = read_pod<std::uint32_t>(is);
  if (ndim > 8) throw std::runtime_error("serialize: implausible tensor rank");
  Shape shape(ndim);
  for (auto& d : shape) d = read_pod<std::int32_t>(is);
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), false);
  read_bytes(is, t.values_mut().data(), t.size() * sizeof(T));
  return t;
}

// FNV-1a over raw bytes; used for parameter freeze audits.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace mlcl::io
