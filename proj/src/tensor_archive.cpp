/*
 * Copyright 2026 The mitobench Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "mitobench/tensor_archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mitobench/errors.hpp"
#include "mitobench/hash.hpp"

namespace mitobench {
namespace {

constexpr char kMagic[4] = {'M', 'B', 'T', 'A'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw IoError("tensor archive truncated");
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::int64_t ArchiveTensor::element_count() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::uint64_t payload_checksum(const std::vector<float>& data) {
  Fnv1a64 h;
  std::uint8_t le[4];
  for (float f : data) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) le[i] = static_cast<std::uint8_t>(bits >> (8 * i));
    h.update(std::as_bytes(std::span<const std::uint8_t>(le, 4)));
  }
  return h.digest();
}

std::vector<std::uint8_t> TensorArchive::serialize(bool with_checksums) const {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (t.element_count() != static_cast<std::int64_t>(t.data.size())) {
      throw ShapeError("tensor '" + name + "': shape does not match payload size");
    }
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(static_cast<std::uint64_t>(d));
    w.u8(with_checksums ? 1 : 0);
    if (with_checksums) w.u64(payload_checksum(t.data));
    for (float f : t.data) w.f32(f);
  }
  return w.take();
}

TensorArchive TensorArchive::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  for (char c : kMagic) {
    if (r.u8() != static_cast<std::uint8_t>(c)) throw IoError("not a tensor archive (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("unsupported tensor archive version " + std::to_string(version));
  }
  TensorArchive archive;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    archive.metadata[k] = r.str();
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    ArchiveTensor t;
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(static_cast<std::int64_t>(r.u64()));
    if (r.u8() != 0) t.checksum = r.u64();
    const std::int64_t count = t.element_count();
    t.data.resize(static_cast<std::size_t>(count));
    for (auto& f : t.data) f = r.f32();
    if (t.checksum && *t.checksum != payload_checksum(t.data)) {
      throw IoError("checksum failure for tensor '" + name + "'");
    }
    archive.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw IoError("trailing bytes after tensor archive");
  return archive;
}

void TensorArchive::write(const std::filesystem::path& path, bool with_checksums) const {
  const auto bytes = serialize(with_checksums);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace mitobench
