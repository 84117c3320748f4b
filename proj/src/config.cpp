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


#include "mitobench/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "mitobench/errors.hpp"

namespace mitobench {

using nlohmann::json;

AugmentPolicy augment_policy(AugmentPreset preset) {
  switch (preset) {
    case AugmentPreset::kDefault: return AugmentPolicy{};
    case AugmentPreset::kGeometric: {
      AugmentPolicy p;
      p.p_color_jitter = 0.0;
      p.p_blur = 0.0;
      return p;
    }
    case AugmentPreset::kNone: return AugmentPolicy::identity();
  }
  return AugmentPolicy{};
}

json to_json(const LoraConfig& c) {
  std::vector<std::string> targets;
  for (auto t : c.targets) targets.emplace_back(to_string(t));
  json j{{"rank", c.rank}, {"alpha", c.alpha}, {"dropout_p", c.dropout_p}, {"targets", targets}, {"lora_seed", c.seed}};
  j["gamma"] = c.gamma ? json(*c.gamma) : json(nullptr);
  return j;
}

LoraConfig lora_config_from_json(const json& j) {
  LoraConfig c;
  try {
    if (j.contains("rank")) c.rank = j.at("rank").get<int>();
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("gamma") && !j.at("gamma").is_null()) c.gamma = j.at("gamma").get<double>();
    if (j.contains("dropout_p")) c.dropout_p = j.at("dropout_p").get<double>();
    if (j.contains("lora_seed")) c.seed = j.at("lora_seed").get<std::uint64_t>();
    if (j.contains("targets")) {
      c.targets.clear();
      for (const auto& t : j.at("targets")) c.targets.insert(parse_lora_target(t.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid LoRA config: ") + e.what());
  }
  if (const auto errors = validate(c); !errors.empty()) throw ValidationError("invalid LoRA config: " + errors.front());
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"pseudo_epochs", c.pseudo_epochs},
              {"epoch_length", c.epoch_length},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"max_lr", c.max_lr},
              {"pct_start", c.schedule.pct_start},
              {"div_factor", c.schedule.div_factor},
              {"final_div", c.schedule.final_div},
              {"seed", c.seed},
              {"augment", c.augment},
              {"select_best", c.select_best},
              {"p_mitotic", c.sampler.p_mitotic},
              {"p_hard_negative", c.sampler.p_hard_negative},
              {"p_random", c.sampler.p_random}};
}

namespace {

std::string_view to_string(ProbeRecipe r) { return r == ProbeRecipe::kLogistic ? "logistic" : "sgd"; }
std::string_view to_string(StdEstimator s) { return s == StdEstimator::kPopulation ? "population" : "sample"; }
std::string_view to_string(AugmentPreset p) {
  switch (p) {
    case AugmentPreset::kDefault: return "default";
    case AugmentPreset::kGeometric: return "geometric";
    case AugmentPreset::kNone: return "none";
  }
  return "default";
}

const std::set<std::string> kKnownKeys{
    "batch_size", "pseudo_epochs", "epoch_length", "beta1", "beta2", "eps", "max_lr", "pct_start", "div_factor",
    "final_div", "seed", "augment", "select_best", "p_mitotic", "p_hard_negative", "p_random", "rank", "alpha",
    "gamma", "dropout_p", "targets", "lora_seed", "probe_recipe", "probe_l2", "augment_preset", "head_bias",
    "fractions", "folds", "runs", "test_fraction", "val_fraction", "holdout", "std"};

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json j = to_json(c.train);
  j.update(to_json(c.lora));
  j["probe_recipe"] = to_string(c.probe_recipe);
  j["probe_l2"] = c.probe_fit.l2;
  j["augment_preset"] = to_string(c.augment_preset);
  j["head_bias"] = c.head_bias;
  j["fractions"] = c.fractions;
  j["folds"] = c.folds;
  j["runs"] = c.runs;
  j["test_fraction"] = c.test_fraction;
  j["val_fraction"] = c.val_fraction;
  j["holdout"] = c.holdout;
  j["std"] = to_string(c.std_estimator);
  return j;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKnownKeys.contains(key)) throw ValidationError("unknown config key '" + key + "'");
  }
  ExperimentConfig c;
  try {
    auto& t = c.train;
    read(j, "batch_size", t.batch_size);
    read(j, "pseudo_epochs", t.pseudo_epochs);
    read(j, "epoch_length", t.epoch_length);
    read(j, "beta1", t.beta1);
    read(j, "beta2", t.beta2);
    read(j, "eps", t.eps);
    read(j, "max_lr", t.max_lr);
    read(j, "pct_start", t.schedule.pct_start);
    read(j, "div_factor", t.schedule.div_factor);
    read(j, "final_div", t.schedule.final_div);
    read(j, "seed", t.seed);
    read(j, "augment", t.augment);
    read(j, "select_best", t.select_best);
    read(j, "p_mitotic", t.sampler.p_mitotic);
    read(j, "p_hard_negative", t.sampler.p_hard_negative);
    read(j, "p_random", t.sampler.p_random);
    c.seed = t.seed;
    c.lora = lora_config_from_json(j);
    if (j.contains("probe_recipe")) {
      const auto r = j.at("probe_recipe").get<std::string>();
      if (r == "logistic") c.probe_recipe = ProbeRecipe::kLogistic;
      else if (r == "sgd") c.probe_recipe = ProbeRecipe::kSgd;
      else throw ValidationError("probe_recipe: expected logistic or sgd");
    }
    read(j, "probe_l2", c.probe_fit.l2);
    if (j.contains("augment_preset")) {
      const auto p = j.at("augment_preset").get<std::string>();
      if (p == "default") c.augment_preset = AugmentPreset::kDefault;
      else if (p == "geometric") c.augment_preset = AugmentPreset::kGeometric;
      else if (p == "none") c.augment_preset = AugmentPreset::kNone;
      else throw ValidationError("augment_preset: expected default, geometric or none");
    }
    read(j, "head_bias", c.head_bias);
    read(j, "fractions", c.fractions);
    read(j, "folds", c.folds);
    read(j, "runs", c.runs);
    read(j, "test_fraction", c.test_fraction);
    read(j, "val_fraction", c.val_fraction);
    read(j, "holdout", c.holdout);
    if (j.contains("std")) {
      const auto s = j.at("std").get<std::string>();
      if (s == "population") c.std_estimator = StdEstimator::kPopulation;
      else if (s == "sample") c.std_estimator = StdEstimator::kSample;
      else throw ValidationError("std: expected population or sample");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid config: ") + e.what());
  }
  c.train.augment_policy = augment_policy(c.augment_preset);
  if (const auto errors = validate(c.train); !errors.empty()) throw ValidationError("invalid config: " + errors.front());
  if (c.folds < 1) throw ValidationError("folds: must be >= 1");
  if (c.runs < 1) throw ValidationError("runs: must be >= 1");
  if (!(c.probe_fit.l2 >= 0.0)) throw ValidationError("probe_l2: must be >= 0");
  for (double f : c.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ValidationError("fractions: values must lie in (0, 1]");
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return experiment_config_from_json(json::parse(buf.str()));
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::filesystem::path resolve_image_root(const std::string& manifest_root, const std::filesystem::path& manifest_path) {
  if (const char* env = std::getenv(kImageRootEnv); env && *env) return env;
  std::filesystem::path root(manifest_root);
  if (root.is_relative()) root = manifest_path.parent_path() / root;
  return root;
}

}  // namespace mitobench
