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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mitobench/adapt.hpp"
#include "mitobench/errors.hpp"
#include "mitobench/ingest.hpp"
#include "mitobench/metrics.hpp"

namespace mitobench {

struct SamplerPolicy {
  double p_mitotic = 0.5;
  double p_hard_negative = 0.25;
  double p_random = 0.25;
};

std::vector<std::string> validate(const SamplerPolicy& policy);

struct OneCyclePolicy {
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div = 1e4;
};

enum class LogitMode { kTwoLogitSoftmax, kSingleLogitSigmoid };

struct TrainConfig {
  int batch_size = 16;
  int pseudo_epochs = 100;
  int epoch_length = 1280;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_lr = 1e-4;
  OneCyclePolicy schedule;
  std::uint64_t seed = 0;
  SamplerPolicy sampler;
  AugmentPolicy augment_policy;
  bool augment = true;
  // Keep the checkpoint with minimal validation loss; otherwise keep the last.
  bool select_best = true;

  int steps_per_epoch() const { return epoch_length / batch_size; }
  std::int64_t total_steps() const { return static_cast<std::int64_t>(pseudo_epochs) * steps_per_epoch(); }
};

std::vector<std::string> validate(const TrainConfig& config);

// Warmup from max_lr / div_factor to max_lr at floor(pct_start * total_steps),
// then cosine annealing to max_lr / final_div at the last step. Both phases
// follow a half cosine; the three anchor steps return their values exactly.
double one_cycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr, const OneCyclePolicy& policy = {});

struct LossResult {
  double loss = 0.0;
  Matrix<double> grad;  // d(mean loss) / d(logits), same shape as the logits
};

// Mean binary cross-entropy. Two-logit mode takes B x 2 logits under a
// softmax; single-logit mode takes B x 1 logits under a sigmoid.
LossResult bce_loss(const Matrix<double>& logits, std::span<const int> labels,
                    LogitMode mode = LogitMode::kTwoLogitSoftmax);

// ---------------------------------------------------------------------------
// Sampling

enum class SampleSource { kMitotic, kHardNegative, kRandom };

struct SampleDraw {
  SampleSource source = SampleSource::kMitotic;
  AnnotationRecord record;  // synthetic for random patches
  std::optional<RawPatch> patch;  // already cut for random patches
  int label = 0;
};

struct TrainingSample {
  std::vector<float> image;  // normalized CHW
  int label = 0;
  SampleSource source = SampleSource::kMitotic;
  std::string annotation_id;
};

class PatchSampler {
 public:
  // `context` lists every known annotation of the training images; random
  // patches keep clear of its mitotic figures. Empty means `pool`.
  PatchSampler(const ImageStore& store, std::vector<AnnotationRecord> pool, PatchSpec patch, SamplerPolicy policy,
               std::vector<AnnotationRecord> context = {});

  // Policy after reallocating an empty hard-negative class to random patches.
  const SamplerPolicy& effective_policy() const { return policy_; }

  SampleSource draw_source(Rng& rng) const;
  SampleDraw draw(Rng& rng) const;
  // Extracts, optionally augments, and normalizes.
  TrainingSample materialize(const SampleDraw& draw, Rng& rng, const AugmentPolicy* augment) const;
  std::vector<TrainingSample> next_batch(int batch_size, Rng& rng, const AugmentPolicy* augment) const;

 private:
  const ImageStore& store_;
  PatchSpec patch_;
  SamplerPolicy policy_;
  std::vector<AnnotationRecord> mitotic_;
  std::vector<AnnotationRecord> hard_negative_;
  std::vector<std::string> images_;
  std::map<std::string, std::vector<AnnotationRecord>> by_image_;
};

// ---------------------------------------------------------------------------
// Optimization

template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Matrix<T>> m_;
  std::vector<Matrix<T>> v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Embeddings of annotation patches for a frozen backbone, keyed by backbone
// name, weights checksum and patch spec. A key change clears the cache.
class FeatureCache {
 public:
  static std::string make_key(const BackboneSpec& spec, std::uint64_t weights_checksum, const PatchSpec& patch);

  void bind(const std::string& key);
  const std::string& key() const { return key_; }
  const std::vector<double>* find(const std::string& annotation_id) const;
  void insert(const std::string& annotation_id, std::vector<double> features);
  std::size_t size() const { return features_.size(); }

 private:
  std::string key_;
  std::map<std::string, std::vector<double>> features_;
};

// Embedding for each record through the cache, computing missing entries.
template <typename T>
Matrix<T> cached_embeddings(const Backbone<T>& backbone, const ImageStore& store,
                            const std::vector<AnnotationRecord>& records, const PatchSpec& patch, FeatureCache& cache);

struct TraceEntry {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double validation_loss = 0.0;
};

template <typename T>
struct Checkpoint {
  int epoch = 0;
  std::vector<std::string> names;
  std::vector<Matrix<T>> values;  // trainable tensors, bit-exact copies
  std::optional<double> validation_loss;  // empty when trained without validation
  std::optional<EvalResult> metrics;
};

template <typename T>
Checkpoint<T> capture(AdaptedModel<T>& model, int epoch, std::optional<double> validation_loss);
template <typename T>
void restore(AdaptedModel<T>& model, const Checkpoint<T>& checkpoint);

struct TrainData {
  const ImageStore* store = nullptr;
  std::vector<AnnotationRecord> train;
  std::vector<AnnotationRecord> validation;
  std::vector<AnnotationRecord> context;
  PatchSpec patch;
};

template <typename T>
struct TrainResult {
  Checkpoint<T> best;
  std::vector<TraceEntry> trace;
  std::vector<EpochRecord> epochs;
  std::optional<double> initial_validation_loss;
  std::int64_t steps = 0;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::vector<TraceEntry> trace)
      : NumericError(what), trace_(std::move(trace)) {}
  const std::vector<TraceEntry>& trace() const { return trace_; }

 private:
  std::vector<TraceEntry> trace_;
};

// Mean validation loss over all records, no augmentation, with the metric
// snapshot at threshold 0.5.
template <typename T>
std::pair<double, EvalResult> validation_pass(const AdaptedModel<T>& model, const ImageStore& store,
                                              const std::vector<AnnotationRecord>& records, const PatchSpec& patch);

// Runs pseudo_epochs * (epoch_length / batch_size) Adam steps and leaves the
// model at the returned checkpoint. In LINEAR_PROBE mode a cache, when given,
// supplies annotation embeddings and augmentation is skipped.
template <typename T>
TrainResult<T> train(AdaptedModel<T>& model, const TrainData& data, const TrainConfig& config,
                     FeatureCache* cache = nullptr);

std::uint64_t trace_digest(const std::vector<TraceEntry>& trace);
std::string trace_jsonl(const std::vector<TraceEntry>& trace);

// ---------------------------------------------------------------------------
// Model assembly and checkpoint files

template <typename T>
AdaptedModel<T> build_model(std::unique_ptr<Backbone<T>> backbone, AdaptMode mode, const LoraConfig& lora,
                            bool head_bias, std::uint64_t seed);

struct CheckpointMeta {
  std::string model;
  std::string weights_source;
  AdaptMode mode = AdaptMode::kLinearProbe;
  std::optional<LoraConfig> lora;
  bool head_bias = true;
  int epoch = 0;
  std::optional<double> validation_loss;
  std::uint64_t seed = 0;
  std::string config_json;
  std::uint64_t trace_digest = 0;
};

// Trainable tensors of `model` plus metadata.
template <typename T>
TensorArchive make_checkpoint_archive(AdaptedModel<T>& model, const CheckpointMeta& meta);
CheckpointMeta read_checkpoint_meta(const TensorArchive& archive);

// Rebuilds the model from its registry entry and weights, then restores the
// trainable tensors.
template <typename T>
AdaptedModel<T> model_from_checkpoint(const TensorArchive& archive, const BackboneRegistry& registry);

}  // namespace mitobench
