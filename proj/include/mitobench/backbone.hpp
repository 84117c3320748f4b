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

#include <array>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace mitobench {

// How a fixed-length embedding is read off the final token sequence.
enum class EmbeddingRule {
  kClassToken,          // n = width
  kClassPlusMeanPatch,  // n = 2 * width: [class token || mean of the patch tokens]
};

enum class Architecture {
  kVit,
  // Pooled convolutional feature extractor. Its pooled feature vector plays
  // the role of the class token; no token sequence is exposed.
  kConv,
};

std::string_view to_string(EmbeddingRule rule);
EmbeddingRule parse_embedding_rule(std::string_view text);
std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view text);

struct BackboneSpec {
  std::string name;
  Architecture architecture = Architecture::kVit;
  int depth = 0;
  int width = 0;
  int heads = 1;
  int mlp_dim = 0;
  int patch_grid = 0;  // number of spatial patch tokens P (a perfect square)
  int input_size = 224;
  // Extra learned tokens placed after the class token. They never enter the
  // patch mean.
  int register_tokens = 0;
  int feature_dim = 0;
  EmbeddingRule embedding_rule = EmbeddingRule::kClassToken;
  std::array<double, 3> norm_mean{0.485, 0.456, 0.406};
  std::array<double, 3> norm_std{0.229, 0.224, 0.225};
  // "seed:<n>" for seeded random weights, a tensor-archive path, or empty
  // when the weights have to be supplied by the user.
  std::string weights_source;
  // Checkpoint tensor name -> canonical tensor name, for published layouts.
  std::map<std::string, std::string> name_map;

  int patch_side() const;  // pixels per patch edge
  int grid_side() const;   // patches per image edge
  int token_count() const { return 1 + register_tokens + patch_grid; }
  int head_dim() const { return heads > 0 ? width / heads : 0; }
};

// Field-level invariant violations; empty when the spec is valid.
std::vector<std::string> validate(const BackboneSpec& spec);

// Published embedding width implied by the geometry and embedding rule.
int expected_feature_dim(const BackboneSpec& spec);

using BackboneHandle = std::shared_ptr<const BackboneSpec>;

class BackboneRegistry {
 public:
  // Throws ValidationError on a duplicate name or an invalid spec.
  BackboneHandle register_backbone(BackboneSpec spec);
  BackboneHandle find(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::vector<std::string> names() const;

  // Foundation models, ImageNet baselines and the seeded toy family.
  static BackboneRegistry builtin();

 private:
  std::map<std::string, BackboneHandle, std::less<>> entries_;
};

}  // namespace mitobench
