// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint layout (all integers little-endian):
//   "DROA" | u32 version | records... | u32 CRC32 of every preceding byte
// record: u32 name_len | name | u8 dtype | u32 rank | rank x u32 extents | payload
// The first record, "__arch__" (dtype u8), holds the canonical architecture string.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "droaug/data_io.hpp"
#include "droaug/models.hpp"

namespace droaug {

inline constexpr char kCheckpointMagic[4] = {'D', 'R', 'O', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  if constexpr (std::is_same_v<T, double>) return DType::f64;
  return DType::u8;
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}
  bool done() const { return pos_ == end_; }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw FormatError("checkpoint record runs past end of data");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 8;
};

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const Model<T>& model) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, kCheckpointVersion);
  auto record = [&](const std::string& name, DType dt, const Shape& shape, const void* data,
                    std::size_t nbytes) {
    detail::put_u32(out, std::uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(std::uint8_t(dt));
    detail::put_u32(out, std::uint32_t(shape.size()));
    for (auto e : shape) detail::put_u32(out, std::uint32_t(e));
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + nbytes);
  };
  const std::string arch = model.descriptor();
  record("__arch__", DType::u8, Shape{arch.size()}, arch.data(), arch.size());
  for (const auto& [name, v] : model.params()) {
    record(name, detail::dtype_of<T>(), v.shape(), v.value().raw(), v.size() * sizeof(T));
  }
  detail::put_u32(out, std::uint32_t(crc32(0L, out.data(), uInt(out.size()))));
  return out;
}

/// Parses checkpoint bytes. Parameters stored in another float width are converted.
template <class T>
Model<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) throw FormatError("checkpoint too short");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) stored_crc |= std::uint32_t(bytes[body + i]) << (8 * i);
  detail::Reader r(bytes, body);
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  if (std::uint32_t(crc32(0L, bytes.data(), uInt(body))) != stored_crc) {
    throw FormatError("checkpoint CRC mismatch");
  }
  std::string arch;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  while (!r.done()) {
    const std::uint32_t name_len = r.u32();
    const auto* np = r.take(name_len);
    std::string name(reinterpret_cast<const char*>(np), name_len);
    const auto dt = DType(r.u8());
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    const std::size_t n = numel(shape);
    if (dt == DType::u8) {
      const auto* p = r.take(n);
      if (name == "__arch__") arch.assign(reinterpret_cast<const char*>(p), n);
      continue;
    }
    std::vector<T> vals(n);
    if (dt == DType::f32) {
      const auto* p = r.take(n * 4);
      for (std::size_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, p + 4 * i, 4);
        vals[i] = T(f);
      }
    } else if (dt == DType::f64) {
      const auto* p = r.take(n * 8);
      for (std::size_t i = 0; i < n; ++i) {
        double d;
        std::memcpy(&d, p + 8 * i, 8);
        vals[i] = T(d);
      }
    } else {
      throw FormatError("unknown dtype tag in checkpoint");
    }
    tensors.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(vals)));
  }
  if (arch.empty()) throw FormatError("checkpoint lacks an architecture record");
  Model<T> model(parse_architecture(arch));
  if (tensors.size() != model.params().size()) throw FormatError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, v] = model.params()[i];
    if (tensors[i].first != name || tensors[i].second.shape() != v.shape()) {
      throw FormatError("checkpoint parameter '" + tensors[i].first + "' does not match the architecture");
    }
    v.mutable_value() = std::move(tensors[i].second);
  }
  return model;
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(model));
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes);
}

}  // namespace droaug
