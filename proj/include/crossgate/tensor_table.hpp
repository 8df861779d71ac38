/*
 * Copyright (c) 2026 The crossgate Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crossgate/tensor.hpp"

namespace crossgate {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary container of named f64 tensors plus named text sections.
///
/// Layout (all integers little-endian):
///   magic "CROSSGT\0" | u32 version | str kind
///   u32 section count | { str name | str text }*
///   u32 tensor count  | { str name | u32 rank | u64 extent* | f64 value* }*
///   u64 FNV-1a hash of every preceding byte
/// where str is a u32 byte length followed by UTF-8 bytes.
struct TensorTable {
  static constexpr char kMagic[8] = {'C', 'R', 'O', 'S', 'S', 'G', 'T', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  std::map<std::string, std::string> sections;
  std::vector<std::pair<std::string, Tensor<double>>> tensors;
  std::vector<std::size_t> offsets;  // byte offset of each tensor record, filled on load

  const Tensor<double>& tensor(std::string_view name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw std::out_of_range("TensorTable: no tensor named '" + std::string(name) + "'");
  }

  bool has_tensor(std::string_view name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }

  const std::string& section(const std::string& name) const {
    auto it = sections.find(name);
    if (it == sections.end()) throw FormatError("TensorTable: missing section '" + name + "'");
    return it->second;
  }

  std::vector<std::uint8_t> to_bytes() const;
  static TensorTable from_bytes(std::span<const std::uint8_t> bytes, std::string_view expected_kind = {});

  void save(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
  }

  static TensorTable load(const std::filesystem::path& path, std::string_view expected_kind = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(bytes, expected_kind);
  }
};

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes.insert(bytes.end(), p, p + n); }

  std::vector<std::uint8_t> bytes;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(get(8, what)); }
  std::string str(const char* what) {
    const auto n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError("tensor table: " + msg + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) fail(std::string("truncated while reading ") + what);
  }
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> TensorTable::to_bytes() const {
  detail::ByteWriter w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.str(kind);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, text] : sections) {
    w.str(name);
    w.str(text);
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape().dims()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  w.u64(fnv1a64(w.bytes));
  return std::move(w.bytes);
}

inline TensorTable TensorTable::from_bytes(std::span<const std::uint8_t> bytes, std::string_view expected_kind) {
  detail::ByteReader r(bytes);
  const auto magic = r.raw(sizeof kMagic, "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) throw FormatError("tensor table: bad magic at byte 0");
  const auto version = r.u32("version");
  if (version != kVersion)
    throw FormatError("tensor table: unsupported version " + std::to_string(version) + " at byte 8");
  if (bytes.size() < 8 + sizeof kMagic + 4) r.fail("file too short for checksum");
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body.size() + static_cast<std::size_t>(i)]) << (8 * i);
  if (fnv1a64(body) != stored)
    throw FormatError("tensor table: checksum mismatch (file corrupt or truncated) over bytes [0, " + std::to_string(body.size()) + ")");

  detail::ByteReader rb(body);
  rb.raw(sizeof kMagic + 4, "header");
  TensorTable t;
  t.kind = rb.str("kind");
  if (!expected_kind.empty() && t.kind != expected_kind)
    throw FormatError("tensor table: expected kind '" + std::string(expected_kind) + "', found '" + t.kind + "'");
  const auto nsec = rb.u32("section count");
  for (std::uint32_t i = 0; i < nsec; ++i) {
    auto name = rb.str("section name");
    t.sections[std::move(name)] = rb.str("section text");
  }
  const auto ntensors = rb.u32("tensor count");
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    t.offsets.push_back(rb.pos());
    auto name = rb.str("tensor name");
    const auto rank = rb.u32("rank");
    if (rank > 16) rb.fail("implausible rank " + std::to_string(rank) + " for '" + name + "'");
    std::vector<std::size_t> dims;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = rb.u64("extent");
      if (d == 0) rb.fail("zero extent in '" + name + "'");
      dims.push_back(static_cast<std::size_t>(d));
    }
    Shape shape(std::move(dims));
    if (shape.numel() * 8 > rb.remaining()) rb.fail("truncated data for '" + name + "'");
    std::vector<double> values(shape.numel());
    for (auto& v : values) v = rb.f64("tensor data");
    t.tensors.emplace_back(std::move(name), Tensor<double>(std::move(shape), std::move(values)));
  }
  if (rb.remaining() != 0) rb.fail("trailing bytes after tensor table");
  return t;
}

}  // namespace crossgate
