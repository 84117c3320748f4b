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

#include "json.hpp"
#include "mitobench/adapt.hpp"
#include "mitobench/splits.hpp"
#include "mitobench/train.hpp"

namespace mitobench {

inline constexpr const char* kImageRootEnv = "MITOBENCH_IMAGE_ROOT";

enum class ProbeRecipe {
  kLogistic,  // closed-loop logistic regression on cached embeddings
  kSgd,       // the shared sampler/schedule/optimizer recipe
};

enum class StdEstimator { kPopulation, kSample };

enum class AugmentPreset {
  kDefault,    // flips, rotations, color jitter, blur
  kGeometric,  // flips and rotations only
  kNone,
};

struct ExperimentConfig {
  TrainConfig train;
  LoraConfig lora;
  ProbeRecipe probe_recipe = ProbeRecipe::kLogistic;
  ProbeFitConfig probe_fit;
  AugmentPreset augment_preset = AugmentPreset::kDefault;
  bool head_bias = true;
  std::vector<double> fractions = kDefaultFractions;
  int folds = 5;
  int runs = 5;
  double test_fraction = 0.2;
  double val_fraction = 0.2;
  double holdout = 0.2;
  StdEstimator std_estimator = StdEstimator::kPopulation;
  std::uint64_t seed = 0;
};

AugmentPolicy augment_policy(AugmentPreset preset);

nlohmann::json to_json(const LoraConfig& config);
LoraConfig lora_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const ExperimentConfig& config);

// Flat object keyed by field name: batch_size, pseudo_epochs, epoch_length,
// beta1, beta2, eps, max_lr, pct_start, div_factor, final_div, seed, augment,
// select_best, p_mitotic, p_hard_negative, p_random, rank, alpha, gamma,
// dropout_p, targets, lora_seed and the experiment keys. Missing keys keep
// their defaults; unknown keys and invalid values throw ValidationError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Image root: the environment override when set, else the manifest's root
// resolved against the manifest's directory.
std::filesystem::path resolve_image_root(const std::string& manifest_root, const std::filesystem::path& manifest_path);

}  // namespace mitobench
