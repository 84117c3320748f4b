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
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mitobench/network.hpp"
#include "mitobench/tensor_archive.hpp"

namespace mitobench {

struct LoraConfig {
  int rank = 16;
  double alpha = 16.0;
  // Explicit scale override. When unset the scale is alpha / rank.
  std::optional<double> gamma;
  double dropout_p = 0.1;
  std::set<LoraTarget> targets{LoraTarget::kQProj, LoraTarget::kKProj, LoraTarget::kVProj,
                               LoraTarget::kOProj, LoraTarget::kMlpFc1, LoraTarget::kMlpFc2};
  std::uint64_t seed = 0;

  double effective_gamma() const { return gamma ? *gamma : alpha / rank; }
};

// Config-only checks; the rank bound against weight shapes is checked at injection.
std::vector<std::string> validate(const LoraConfig& config);

enum class AdaptMode { kLinearProbe, kLora, kFullFinetune };

std::string_view to_string(AdaptMode mode);  // "probe" | "lora" | "full"
AdaptMode parse_adapt_mode(std::string_view text);

// Linear classifier y = W z (+ b) over backbone embeddings, two classes.
template <typename T>
struct ProbeHead {
  static constexpr int kClasses = 2;

  Parameter<T> weight;  // classes x features
  Parameter<T> bias;    // 1 x classes; meaningful only when has_bias
  bool has_bias = false;

  int classes() const { return static_cast<int>(weight.value.rows()); }
  int features() const { return static_cast<int>(weight.value.cols()); }
  std::int64_t parameter_count() const { return weight.size() + (has_bias ? bias.size() : 0); }
  void collect(std::vector<Parameter<T>*>& out);
};

// Uniform(-1/sqrt(n), 1/sqrt(n)) init, matching a fresh dense layer.
template <typename T>
ProbeHead<T> make_probe_head(int features, bool with_bias, std::uint64_t seed);

template <typename T>
ProbeHead<T> probe_head_from_weights(const Matrix<T>& weight, std::optional<RowVector<T>> bias = std::nullopt);

template <typename T>
RowVector<T> probe_predict(const ProbeHead<T>& head, const RowVector<T>& z);

struct ProbeFitConfig {
  double l2 = 1e-4;       // on the weights, never on the intercept
  bool add_bias = true;   // appends a constant feature
  int max_iterations = 100;
  double gradient_tolerance = 1e-10;
};

// L2-regularized logistic regression on the mean loss, solved by damped
// Newton iterations. The resulting two-logit head has rows (-w/2, +w/2), so the
// softmax over its logits equals the sigmoid of w.z.
template <typename T>
ProbeHead<T> fit_probe(const Matrix<T>& features, std::span<const int> labels, const ProbeFitConfig& config = {});

template <typename T>
class AdaptedModel {
 public:
  struct Saved {
    std::unique_ptr<Activations> backbone;
    RowVector<T> embedding;
  };

  AdaptedModel(std::unique_ptr<Backbone<T>> backbone, AdaptMode mode, ProbeHead<T> head);
  AdaptedModel(const AdaptedModel& other);
  AdaptedModel& operator=(const AdaptedModel& other);
  AdaptedModel(AdaptedModel&&) noexcept = default;
  AdaptedModel& operator=(AdaptedModel&&) noexcept = default;

  AdaptMode mode() const { return mode_; }
  const BackboneSpec& spec() const { return backbone_->spec(); }
  Backbone<T>& backbone() { return *backbone_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  ProbeHead<T>& head() { return head_; }
  const ProbeHead<T>& head() const { return head_; }
  bool merged() const { return merged_; }
  const std::optional<LoraConfig>& lora_config() const { return lora_config_; }

  // 1 x classes logits for one normalized image.
  RowVector<T> logits(std::span<const T> image, const RunOptions& opts, Saved* saved) const;
  RowVector<T> head_logits(const RowVector<T>& embedding) const { return probe_predict(head_, embedding); }
  // Accumulates gradients of every trainable tensor given d(loss)/d(logits).
  void backward(const Saved& saved, const RowVector<T>& grad_logits);
  // Head-only backward for cached embeddings.
  void backward_head(const RowVector<T>& embedding, const RowVector<T>& grad_logits);

  std::vector<Parameter<T>*> parameters();
  std::vector<Parameter<T>*> trainable_parameters();
  std::vector<const Parameter<T>*> frozen_parameters() const;
  std::int64_t trainable_count();
  // Adapted layers keyed by path, e.g. "blocks.0.attn.q_proj".
  std::map<std::string, LoraLayer<T>*> adapters();
  void zero_grad();

  // Used by inject_lora / merge_lora.
  void attach_lora(const LoraConfig& config) { lora_config_ = config; }
  void mark_merged() { merged_ = true; }

 private:
  void apply_trainable_flags();

  std::unique_ptr<Backbone<T>> backbone_;
  AdaptMode mode_;
  ProbeHead<T> head_;
  std::optional<LoraConfig> lora_config_;
  bool merged_ = false;
};

template <typename T>
AdaptedModel<T> make_linear_probe(std::unique_ptr<Backbone<T>> backbone, ProbeHead<T> head);

template <typename T>
AdaptedModel<T> make_full_finetune(std::unique_ptr<Backbone<T>> backbone, ProbeHead<T> head);

// Wraps every targeted weight in every block with zero-initialized adapters.
// Base weights stay bit-identical; only adapters and head are trainable.
template <typename T>
AdaptedModel<T> inject_lora(std::unique_ptr<Backbone<T>> backbone, const LoraConfig& config, ProbeHead<T> head);

// Folds W + gamma * B * A into each adapted weight and removes the adapters.
// Returns a copy of the resulting plain backbone. A second call throws.
template <typename T>
std::unique_ptr<Backbone<T>> merge_lora(AdaptedModel<T>& model);

// Closed-form adapter parameter count: depth * sum over targets of r * (in + out).
std::int64_t lora_parameter_count(const BackboneSpec& spec, const LoraConfig& config);

// Adapter checkpoint: adapter factors and head only, plus the LoRA config,
// scale and backbone name as metadata. Loadable onto any weights matching the spec.
template <typename T>
TensorArchive save_adapter(AdaptedModel<T>& model);

template <typename T>
AdaptedModel<T> load_adapter(const TensorArchive& archive, std::unique_ptr<Backbone<T>> backbone);

// Trainable-tensor snapshot used for checkpoints.
template <typename T>
TensorArchive snapshot_parameters(const std::vector<Parameter<T>*>& params);

template <typename T>
void restore_parameters(const TensorArchive& snapshot, const std::vector<Parameter<T>*>& params);

}  // namespace mitobench
