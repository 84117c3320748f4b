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
#include <string>
#include <vector>

#include "mitobench/backbone.hpp"
#include "mitobench/random.hpp"

namespace mitobench::testing {

// Small ViT geometry registered through the validating registry.
inline BackboneHandle small_vit(const std::string& name, int depth, int width, int heads, int mlp, int grid,
                                int input, EmbeddingRule rule = EmbeddingRule::kClassToken, int registers = 0) {
  BackboneSpec s;
  s.name = name;
  s.depth = depth;
  s.width = width;
  s.heads = heads;
  s.mlp_dim = mlp;
  s.patch_grid = grid;
  s.input_size = input;
  s.register_tokens = registers;
  s.embedding_rule = rule;
  s.feature_dim = rule == EmbeddingRule::kClassToken ? width : 2 * width;
  s.weights_source = "seed:1";
  BackboneRegistry r;
  return r.register_backbone(std::move(s));
}

template <typename T>
std::vector<T> random_image(const BackboneSpec& spec, Rng& rng) {
  std::vector<T> image(static_cast<std::size_t>(3) * spec.input_size * spec.input_size);
  for (auto& v : image) v = static_cast<T>(standard_normal(rng));
  return image;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("mitobench-" + tag + "-" + std::to_string(rng() % 1000000007));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mitobench::testing
