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

#include "mitobench/backbone.hpp"

#include <cmath>

#include "mitobench/errors.hpp"

namespace mitobench {
namespace {

constexpr std::array<double, 3> kImageNetMean{0.485, 0.456, 0.406};
constexpr std::array<double, 3> kImageNetStd{0.229, 0.224, 0.225};

int isqrt_exact(int v) {
  if (v <= 0) return -1;
  const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(v))));
  return r * r == v ? r : -1;
}

BackboneSpec vit(std::string name, int depth, int width, int heads, int mlp, int grid,
                 EmbeddingRule rule, int registers = 0,
                 std::array<double, 3> mean = kImageNetMean,
                 std::array<double, 3> std = kImageNetStd) {
  BackboneSpec s;
  s.name = std::move(name);
  s.architecture = Architecture::kVit;
  s.depth = depth;
  s.width = width;
  s.heads = heads;
  s.mlp_dim = mlp;
  s.patch_grid = grid;
  s.register_tokens = registers;
  s.embedding_rule = rule;
  s.norm_mean = mean;
  s.norm_std = std;
  s.feature_dim = expected_feature_dim(s);
  return s;
}

}  // namespace

std::string_view to_string(EmbeddingRule rule) {
  return rule == EmbeddingRule::kClassToken ? "class_token" : "class_plus_mean_patch";
}

EmbeddingRule parse_embedding_rule(std::string_view text) {
  if (text == "class_token") return EmbeddingRule::kClassToken;
  if (text == "class_plus_mean_patch") return EmbeddingRule::kClassPlusMeanPatch;
  throw ValidationError("unknown embedding rule '" + std::string(text) + "'");
}

std::string_view to_string(Architecture arch) { return arch == Architecture::kVit ? "vit" : "conv"; }

Architecture parse_architecture(std::string_view text) {
  if (text == "vit") return Architecture::kVit;
  if (text == "conv") return Architecture::kConv;
  throw ValidationError("unknown architecture '" + std::string(text) + "'");
}

int BackboneSpec::grid_side() const { return isqrt_exact(patch_grid); }

int BackboneSpec::patch_side() const {
  const int g = grid_side();
  return g > 0 ? input_size / g : -1;
}

int expected_feature_dim(const BackboneSpec& spec) {
  return spec.embedding_rule == EmbeddingRule::kClassToken ? spec.width : 2 * spec.width;
}

std::vector<std::string> validate(const BackboneSpec& spec) {
  std::vector<std::string> errors;
  auto fail = [&](const std::string& field, const std::string& msg) {
    errors.push_back(field + ": " + msg);
  };
  if (spec.name.empty()) fail("name", "must be nonempty");
  if (spec.depth < 1) fail("depth", "must be >= 1");
  if (spec.width < 1) fail("width", "must be >= 1");
  if (spec.heads < 1) {
    fail("heads", "must be >= 1");
  } else if (spec.width % spec.heads != 0) {
    fail("width", "width " + std::to_string(spec.width) + " not divisible by heads " +
                      std::to_string(spec.heads));
  }
  if (spec.mlp_dim < 1) fail("mlp_dim", "must be >= 1");
  if (spec.register_tokens < 0) fail("register_tokens", "must be >= 0");
  if (spec.input_size < 1) fail("input_size", "must be >= 1");
  const int g = isqrt_exact(spec.patch_grid);
  if (g < 0) {
    fail("patch_grid", "must be a positive perfect square");
  } else if (spec.input_size % g != 0) {
    fail("patch_grid", "input_size " + std::to_string(spec.input_size) +
                           " not divisible into a " + std::to_string(g) + "x" +
                           std::to_string(g) + " grid");
  }
  if (spec.architecture == Architecture::kConv) {
    if (spec.embedding_rule != EmbeddingRule::kClassToken) {
      fail("embedding_rule", "conv backbones expose a pooled vector and use class_token");
    }
    if (spec.register_tokens != 0) fail("register_tokens", "conv backbones have no tokens");
  }
  if (spec.feature_dim != expected_feature_dim(spec)) {
    fail("feature_dim", std::to_string(spec.feature_dim) + " inconsistent with rule " +
                            std::string(to_string(spec.embedding_rule)) + " (expected " +
                            std::to_string(expected_feature_dim(spec)) + ")");
  }
  for (int c = 0; c < 3; ++c) {
    if (!(spec.norm_mean[c] >= 0.0 && spec.norm_mean[c] <= 1.0)) {
      fail("norm_mean", "channel " + std::to_string(c) + " outside [0,1]");
    }
    if (!(spec.norm_std[c] > 0.0 && spec.norm_std[c] <= 1.0)) {
      fail("norm_std", "channel " + std::to_string(c) + " must be in (0,1]");
    }
  }
  return errors;
}

BackboneHandle BackboneRegistry::register_backbone(BackboneSpec spec) {
  const auto errors = validate(spec);
  if (!errors.empty()) {
    std::string msg = "invalid backbone spec '" + spec.name + "':";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ValidationError(msg);
  }
  if (entries_.contains(spec.name)) {
    throw ValidationError("backbone '" + spec.name + "' already registered");
  }
  auto handle = std::make_shared<const BackboneSpec>(std::move(spec));
  entries_.emplace(handle->name, handle);
  return handle;
}

BackboneHandle BackboneRegistry::find(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ValidationError("unknown backbone '" + std::string(name) + "'");
  return it->second;
}

bool BackboneRegistry::contains(std::string_view name) const { return entries_.contains(name); }

std::vector<std::string> BackboneRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

BackboneRegistry BackboneRegistry::builtin() {
  using enum EmbeddingRule;
  BackboneRegistry r;
  // Foundation models. Weights are external artifacts; supply a path via
  // weights_source or the experiment config.
  r.register_backbone(vit("phikon", 12, 768, 12, 3072, 196, kClassToken));
  r.register_backbone(vit("uni", 24, 1024, 16, 4096, 196, kClassToken));
  r.register_backbone(vit("virchow", 32, 1280, 16, 5120, 256, kClassPlusMeanPatch));
  r.register_backbone(vit("virchow2", 32, 1280, 16, 5120, 256, kClassPlusMeanPatch, 4));
  r.register_backbone(vit("h-optimus-0", 40, 1536, 24, 6144, 256, kClassToken, 4,
                          {0.707223, 0.578729, 0.703617}, {0.211883, 0.230117, 0.177517}));
  r.register_backbone(vit("prov-gigapath", 40, 1536, 24, 6144, 256, kClassToken));

  // ImageNet baselines.
  r.register_backbone(vit("vit-b-imagenet", 12, 768, 12, 3072, 196, kClassToken));
  r.register_backbone(vit("vit-h-imagenet", 32, 1280, 16, 5120, 256, kClassToken));
  {
    BackboneSpec s;
    s.name = "resnet50-imagenet";
    s.architecture = Architecture::kConv;
    s.depth = 1;
    s.width = 2048;
    s.heads = 1;
    s.mlp_dim = 1024;
    s.patch_grid = 49 * 16;  // 28x28 stem grid
    s.feature_dim = 2048;
    r.register_backbone(std::move(s));
  }

  // Toy family with seeded random weights.
  auto toy = [&](std::string name, int depth, int width, int heads, int mlp, int grid,
                 EmbeddingRule rule, int seed) {
    auto s = vit(std::move(name), depth, width, heads, mlp, grid, rule);
    s.weights_source = "seed:" + std::to_string(seed);
    r.register_backbone(std::move(s));
  };
  toy("toy-vit", 2, 32, 4, 64, 16, kClassToken, 1);
  toy("toy-vit-cm", 2, 32, 4, 64, 16, kClassPlusMeanPatch, 2);
  toy("toy-vit-l", 4, 64, 4, 128, 16, kClassToken, 3);
  {
    BackboneSpec s;
    s.name = "toy-conv";
    s.architecture = Architecture::kConv;
    s.depth = 1;
    s.width = 32;
    s.heads = 1;
    s.mlp_dim = 32;
    s.patch_grid = 16;
    s.feature_dim = 32;
    s.weights_source = "seed:4";
    r.register_backbone(std::move(s));
  }
  return r;
}

}  // namespace mitobench
