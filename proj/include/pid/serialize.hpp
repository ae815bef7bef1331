#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pid/tensor.hpp"

// Tensor container format, magic "TSR1":
//   u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u32 little-endian extents,
//   then the payload as little-endian row-major values.
// Checkpoint container, magic "PIDCKPT1":
//   u32 record count, then per record: u16 name length, name bytes, a TSR1 blob.
// Loads convert between f32 and f64 payloads as requested by the caller.

namespace pid {

namespace detail {

inline void read_exact(std::istream& is, void* dst, std::size_t n, std::size_t& offset,
                       const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw std::runtime_error(std::string(what) + ": truncated at byte offset " +
                             std::to_string(offset + static_cast<std::size_t>(is.gcount())));
  }
  offset += n;
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint16_t read_u16(std::istream& is, std::size_t& offset, const char* what) {
  unsigned char b[2];
  read_exact(is, b, 2, offset, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32(std::istream& is, std::size_t& offset, const char* what) {
  unsigned char b[4];
  read_exact(is, b, 4, offset, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <typename S>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "tensors are f32 or f64");
  return std::is_same_v<S, float> ? 0 : 1;
}

}  // namespace detail

template <typename S>
void write_tsr1(std::ostream& os, const Tensor<S>& t) {
  os.write("TSR1", 4);
  const std::uint8_t dtype = detail::dtype_code<S>();
  const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
  os.write(reinterpret_cast<const char*>(&dtype), 1);
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < t.rank(); ++i) {
    const std::int64_t d = t.dim(i);
    if (d < 0 || d > 0xffffffffll) {
      throw std::runtime_error("tsr1: extent out of range: " + std::to_string(d));
    }
    detail::write_u32(os, static_cast<std::uint32_t>(d));
  }
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(S)));
  if (!os) throw std::runtime_error("tsr1: write failed");
}

// `offset` is advanced past the blob; pass a fresh zero for standalone files.
template <typename S>
Tensor<S> read_tsr1(std::istream& is, std::size_t& offset) {
  char magic[4];
  detail::read_exact(is, magic, 4, offset, "tsr1");
  if (std::memcmp(magic, "TSR1", 4) != 0) {
    throw std::runtime_error("tsr1: bad magic at byte offset " + std::to_string(offset - 4));
  }
  std::uint8_t dtype = 0, rank = 0;
  detail::read_exact(is, &dtype, 1, offset, "tsr1");
  detail::read_exact(is, &rank, 1, offset, "tsr1");
  if (dtype > 1) throw std::runtime_error("tsr1: unknown dtype code " + std::to_string(dtype));
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) {
    shape[static_cast<std::size_t>(i)] = detail::read_u32(is, offset, "tsr1");
  }
  const std::int64_t n = shape_numel(shape);
  std::vector<S> data(static_cast<std::size_t>(n));
  if (dtype == detail::dtype_code<S>()) {
    detail::read_exact(is, data.data(), static_cast<std::size_t>(n) * sizeof(S), offset, "tsr1");
  } else if (dtype == 0) {
    std::vector<float> raw(static_cast<std::size_t>(n));
    detail::read_exact(is, raw.data(), raw.size() * sizeof(float), offset, "tsr1");
    for (std::size_t i = 0; i < raw.size(); ++i) data[i] = static_cast<S>(raw[i]);
  } else {
    std::vector<double> raw(static_cast<std::size_t>(n));
    detail::read_exact(is, raw.data(), raw.size() * sizeof(double), offset, "tsr1");
    for (std::size_t i = 0; i < raw.size(); ++i) data[i] = static_cast<S>(raw[i]);
  }
  return Tensor<S>::from_data(std::move(shape), std::move(data));
}

template <typename S>
void save_tsr1(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tsr1: cannot open for write: " + path);
  write_tsr1(os, t);
}

template <typename S>
Tensor<S> load_tsr1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tsr1: cannot open: " + path);
  std::size_t offset = 0;
  return read_tsr1<S>(is, offset);
}

template <typename S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

template <typename S>
void save_checkpoint(const std::string& path, const NamedTensors<S>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write("PIDCKPT1", 8);
  detail::write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (name.size() > 0xffff) throw std::runtime_error("checkpoint: name too long: " + name);
    detail::write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tsr1(os, tensor);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

template <typename S>
NamedTensors<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::size_t offset = 0;
  char magic[8];
  detail::read_exact(is, magic, 8, offset, "checkpoint");
  if (std::memcmp(magic, "PIDCKPT1", 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t count = detail::read_u32(is, offset, "checkpoint");
  NamedTensors<S> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = detail::read_u16(is, offset, "checkpoint");
    std::string name(len, '\0');
    detail::read_exact(is, name.data(), len, offset, "checkpoint");
    entries.emplace_back(std::move(name), read_tsr1<S>(is, offset));
  }
  return entries;
}

template <typename S>
const Tensor<S>& checkpoint_get(const NamedTensors<S>& entries, const std::string& name) {
  for (const auto& [n, t] : entries) {
    if (n == name) return t;
  }
  throw std::runtime_error("checkpoint: missing entry: " + name);
}

template <typename S>
bool checkpoint_has(const NamedTensors<S>& entries, const std::string& name) {
  for (const auto& [n, t] : entries) {
    if (n == name) return true;
  }
  return false;
}

}  // namespace pid
