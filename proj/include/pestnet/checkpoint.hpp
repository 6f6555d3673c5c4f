/*
 * Copyright 2026 The pestnet Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "pestnet/error.hpp"

namespace pestnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// One named array. `offset` is where the record starts in the file it was
/// read from (0 for records built in memory).
struct Record {
  std::string name;
  Shape shape;
  std::vector<double> values;
  std::size_t offset = 0;
};

using Section = std::vector<Record>;

/// File layout: "PGCK", u32 version, then four sections (tensors,
/// optimizer, counters, rng). Each section is a u64 record count followed by
/// records of u64 name length, name bytes, u64 rank, rank x u64 dims and
/// product(dims) x f64 values, all little-endian.
struct Checkpoint {
  static constexpr char kMagic[4] = {'P', 'G', 'C', 'K'};
  static constexpr std::uint32_t kVersion = 1;

  Section tensors, optimizer, counters, rng;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

inline void put_section(std::string& out, const Section& s) {
  put_u64(out, s.size());
  for (const auto& r : s) {
    std::size_t n = 1;
    for (auto d : r.shape) n *= d;
    if (n != r.values.size()) {
      throw ContractError("checkpoint: record '" + r.name + "' has " + std::to_string(r.values.size()) +
                          " values for shape " + shape_str(r.shape));
    }
    put_u64(out, r.name.size());
    out += r.name;
    put_u64(out, r.shape.size());
    for (auto d : r.shape) put_u64(out, d);
    out.append(reinterpret_cast<const char*>(r.values.data()), r.values.size() * 8);
  }
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : b_(bytes), source_(std::move(source)) {}

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(source_, pos_, what); }

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v;
    std::memcpy(&v, b_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, b_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<double> f64s(std::size_t n) {
    if (n > (b_.size() - pos_) / 8) fail("truncated values");
    std::vector<double> v(n);
    std::memcpy(v.data(), b_.data() + pos_, n * 8);
    pos_ += n * 8;
    return v;
  }

  Section section(const char* label) {
    const std::uint64_t count = u64("record count");
    // Each record needs at least 16 bytes, which bounds plausible counts.
    if (count > (b_.size() - pos_) / 16) fail(std::string(label) + ": record count exceeds file size");
    Section s;
    for (std::uint64_t i = 0; i < count; ++i) {
      Record r;
      r.offset = pos_;
      const std::uint64_t len = u64("name length");
      r.name = bytes(len, "name");
      const std::uint64_t rank = u64("rank");
      if (rank > 8) fail("record '" + r.name + "' has implausible rank " + std::to_string(rank));
      std::uint64_t n = 1;
      for (std::uint64_t d = 0; d < rank; ++d) {
        const std::uint64_t dim = u64("dims");
        if (dim == 0 || n > UINT64_MAX / dim) fail("record '" + r.name + "' has invalid dims");
        r.shape.push_back(dim);
        n *= dim;
      }
      r.values = f64s(n);
      s.push_back(std::move(r));
    }
    return s;
  }

 private:
  const std::string& b_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  std::string out(Checkpoint::kMagic, 4);
  const std::uint32_t v = Checkpoint::kVersion;
  out.append(reinterpret_cast<const char*>(&v), 4);
  for (const Section* s : {&c.tensors, &c.optimizer, &c.counters, &c.rng}) detail::put_section(out, *s);
  return out;
}

inline Checkpoint deserialize(const std::string& bytes, const std::string& source = "checkpoint") {
  detail::Reader r(bytes, source);
  if (r.bytes(4, "magic") != std::string(Checkpoint::kMagic, 4)) {
    throw ParseError(source, 0, "bad magic (expected PGCK)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != Checkpoint::kVersion) {
    throw ParseError(source, 4, "unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  c.tensors = r.section("tensors");
  c.optimizer = r.section("optimizer");
  c.counters = r.section("counters");
  c.rng = r.section("rng");
  if (!r.done()) r.fail("trailing bytes after rng section");
  return c;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& c) { write_file(path, serialize(c)); }

inline Checkpoint load_checkpoint_file(const std::string& path) { return deserialize(read_file(path), path); }

/// Finds a record by name or reports the section and name that is missing.
inline const Record& find_record(const Section& s, const std::string& name, const std::string& source) {
  for (const auto& r : s) {
    if (r.name == name) return r;
  }
  throw ParseError(source, 0, "missing record '" + name + "'");
}

/// u64 words stored losslessly as pairs of 32-bit halves.
inline std::vector<double> words_to_values(const std::vector<std::uint64_t>& w) {
  std::vector<double> v;
  v.reserve(w.size() * 2);
  for (auto x : w) {
    v.push_back(static_cast<double>(x & 0xffffffffu));
    v.push_back(static_cast<double>(x >> 32));
  }
  return v;
}

inline std::vector<std::uint64_t> values_to_words(const std::vector<double>& v) {
  std::vector<std::uint64_t> w;
  for (std::size_t i = 0; i + 1 < v.size(); i += 2) {
    w.push_back(static_cast<std::uint64_t>(v[i]) | (static_cast<std::uint64_t>(v[i + 1]) << 32));
  }
  return w;
}

}  // namespace pestnet
