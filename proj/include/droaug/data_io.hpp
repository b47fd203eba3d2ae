// Copyright 2026 The droaug Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// IDX (MNIST-style, big-endian) and CIFAR binary readers/writers.
// Readers accept gzip-compressed files transparently.

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "droaug/data.hpp"
#include "droaug/errors.hpp"

namespace droaug {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImage4dMagic = 0x00000804;

/// Reads a whole file, inflating it when it carries a gzip header.
inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("corrupt compressed stream in " + path.string());
  return out;
}

/// Writes bytes verbatim, or gzip-compressed when the path ends in ".gz".
inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "wb9");
    if (f == nullptr) throw IoError("cannot write " + path.string());
    const int written = bytes.empty() ? 0 : gzwrite(f, bytes.data(), unsigned(bytes.size()));
    gzclose(f);
    if (written != int(bytes.size())) throw IoError("short write to " + path.string());
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw IoError("short write to " + path.string());
}

/// Raw IDX container: unsigned-byte payload with its dimension list.
struct IdxArray {
  std::uint32_t magic = kIdxImageMagic;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

namespace detail {
inline std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}
inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}
}  // namespace detail

inline IdxArray parse_idx(const std::vector<std::uint8_t>& bytes, std::uint32_t expected_magic,
                          const std::string& what) {
  if (bytes.size() < 4) throw FormatError(what + ": truncated IDX header");
  IdxArray a;
  a.magic = detail::read_be32(bytes.data());
  if (a.magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), ": bad IDX magic 0x%08x (expected 0x%08x)", a.magic, expected_magic);
    throw FormatError(what + buf);
  }
  const std::size_t rank = a.magic & 0xffu;
  if (bytes.size() < 4 + 4 * rank) throw FormatError(what + ": truncated IDX header");
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(detail::read_be32(bytes.data() + 4 + 4 * i));
    count *= a.dims.back();
  }
  const std::size_t offset = 4 + 4 * rank;
  if (bytes.size() - offset != count) {
    throw FormatError(what + ": payload has " + std::to_string(bytes.size() - offset) +
                      " bytes, header implies " + std::to_string(count));
  }
  a.payload.assign(bytes.begin() + std::ptrdiff_t(offset), bytes.end());
  return a;
}

inline std::vector<std::uint8_t> serialize_idx(const IdxArray& a) {
  std::vector<std::uint8_t> out;
  detail::append_be32(out, a.magic);
  for (auto d : a.dims) detail::append_be32(out, d);
  out.insert(out.end(), a.payload.begin(), a.payload.end());
  return out;
}

inline std::uint8_t quantize_pixel(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return std::uint8_t(std::lround(c * 255.0f));
}

/// Images as an IDX array: [N,H,W] (magic 0x803) for one channel, else [N,C,H,W] (0x804).
inline IdxArray images_to_idx(const Dataset& d) {
  IdxArray a;
  const Shape& s = d.images.shape();
  if (s[1] == 1) {
    a.magic = kIdxImageMagic;
    a.dims = {std::uint32_t(s[0]), std::uint32_t(s[2]), std::uint32_t(s[3])};
  } else {
    a.magic = kIdxImage4dMagic;
    a.dims = {std::uint32_t(s[0]), std::uint32_t(s[1]), std::uint32_t(s[2]), std::uint32_t(s[3])};
  }
  a.payload.resize(d.images.size());
  for (std::size_t i = 0; i < d.images.size(); ++i) a.payload[i] = quantize_pixel(d.images[i]);
  return a;
}

inline IdxArray labels_to_idx(const Dataset& d) {
  IdxArray a;
  a.magic = kIdxLabelMagic;
  a.dims = {std::uint32_t(d.size())};
  for (int l : d.labels) a.payload.push_back(std::uint8_t(l));
  return a;
}

inline Tensor<float> idx_to_images(const IdxArray& a) {
  Shape shape;
  if (a.dims.size() == 3) {
    shape = {a.dims[0], 1, a.dims[1], a.dims[2]};
  } else if (a.dims.size() == 4) {
    shape = {a.dims[0], a.dims[1], a.dims[2], a.dims[3]};
  } else {
    throw FormatError("IDX image array must have 3 or 4 dimensions");
  }
  std::vector<float> px(a.payload.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = float(a.payload[i]) / 255.0f;
  return Tensor<float>(shape, std::move(px));
}

/// Reads an IDX images file (0x803, or 0x804 for multi-channel) and its labels file (0x801).
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, std::size_t num_classes = 10) {
  const auto img_bytes = read_file_bytes(images_path);
  const std::uint32_t magic = img_bytes.size() >= 4 ? detail::read_be32(img_bytes.data()) : 0;
  const IdxArray img =
      parse_idx(img_bytes, magic == kIdxImage4dMagic ? kIdxImage4dMagic : kIdxImageMagic,
                images_path.string());
  const IdxArray lab = parse_idx(read_file_bytes(labels_path), kIdxLabelMagic, labels_path.string());
  if (img.dims[0] != lab.dims[0]) {
    throw FormatError("image count " + std::to_string(img.dims[0]) + " != label count " +
                      std::to_string(lab.dims[0]));
  }
  Dataset d;
  d.images = idx_to_images(img);
  d.num_classes = num_classes;
  d.labels.reserve(lab.payload.size());
  for (auto b : lab.payload) {
    if (b >= num_classes) throw FormatError("label " + std::to_string(b) + " out of range");
    d.labels.push_back(int(b));
  }
  return d;
}

inline void save_idx(const Dataset& d, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  write_file_bytes(images_path, serialize_idx(images_to_idx(d)));
  write_file_bytes(labels_path, serialize_idx(labels_to_idx(d)));
}

enum class CifarVariant { cifar10, cifar100 };

/// CIFAR binary records: label byte(s) followed by 3072 channel-major pixels.
/// CIFAR-100 records carry (coarse, fine); the fine label is used.
inline Dataset load_cifar_binary(const std::filesystem::path& path,
                                 CifarVariant variant = CifarVariant::cifar10) {
  const auto bytes = read_file_bytes(path);
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t record = label_bytes + 3072;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of the " + std::to_string(record) + "-byte record");
  }
  const std::size_t n = bytes.size() / record;
  Dataset d;
  d.num_classes = variant == CifarVariant::cifar10 ? 10 : 100;
  std::vector<float> px(n * 3072);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    const int label = rec[label_bytes - 1];
    if (std::size_t(label) >= d.num_classes) throw FormatError("CIFAR label out of range");
    d.labels[i] = label;
    for (std::size_t j = 0; j < 3072; ++j) px[i * 3072 + j] = float(rec[label_bytes + j]) / 255.0f;
  }
  d.images = Tensor<float>(Shape{n, 3, 32, 32}, std::move(px));
  return d;
}

}  // namespace droaug
