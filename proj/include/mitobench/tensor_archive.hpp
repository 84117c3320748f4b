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

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mitobench {

// Tensor archive layout (all integers little-endian):
//
//   "MBTA" u32:version
//   u32:metadata_count { u32:len key  u32:len value }*
//   u32:tensor_count   { u32:len name u32:ndim u64:dim* u8:has_checksum
//                        [u64:fnv1a64 of payload] float32-LE payload }*
//
// Metadata carries small string values (configs, seeds, digests); tensors
// carry float32 payloads in row-major order.
struct ArchiveTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;
  // Declared payload checksum; verified on read when present.
  std::optional<std::uint64_t> checksum;

  std::int64_t element_count() const;
};

struct TensorArchive {
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> metadata;
  std::map<std::string, ArchiveTensor> tensors;

  std::vector<std::uint8_t> serialize(bool with_checksums = true) const;
  static TensorArchive deserialize(const std::vector<std::uint8_t>& bytes);

  void write(const std::filesystem::path& path, bool with_checksums = true) const;
  static TensorArchive read(const std::filesystem::path& path);
};

std::uint64_t payload_checksum(const std::vector<float>& data);

}  // namespace mitobench
