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


#include "mitobench/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mitobench/config.hpp"

namespace mitobench {

using nlohmann::json;

std::vector<std::string> validate(const SamplerPolicy& p) {
  std::vector<std::string> errors;
  if (p.p_mitotic < 0 || p.p_hard_negative < 0 || p.p_random < 0) errors.push_back("sampler: probabilities must be >= 0");
  if (std::abs(p.p_mitotic + p.p_hard_negative + p.p_random - 1.0) > 1e-9) {
    errors.push_back("sampler: probabilities must sum to 1");
  }
  return errors;
}

std::vector<std::string> validate(const TrainConfig& c) {
  std::vector<std::string> errors;
  if (c.batch_size < 1) errors.push_back("batch_size: must be >= 1");
  if (c.pseudo_epochs < 1) errors.push_back("pseudo_epochs: must be >= 1");
  if (c.epoch_length < 1 || (c.batch_size > 0 && c.epoch_length % c.batch_size != 0)) {
    errors.push_back("epoch_length: must be a positive multiple of batch_size");
  }
  if (!(c.max_lr > 0.0) || !std::isfinite(c.max_lr)) errors.push_back("max_lr: must be positive");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) errors.push_back("beta1/beta2: must be in [0, 1)");
  if (!(c.eps > 0)) errors.push_back("eps: must be positive");
  if (!(c.schedule.pct_start >= 0 && c.schedule.pct_start <= 1)) errors.push_back("pct_start: must be in [0, 1]");
  if (!(c.schedule.div_factor > 0) || !(c.schedule.final_div > 0)) errors.push_back("div_factor/final_div: must be positive");
  for (auto& e : validate(c.sampler)) errors.push_back(std::move(e));
  return errors;
}

double one_cycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr, const OneCyclePolicy& policy) {
  if (total_steps < 1 || step < 0 || step >= total_steps) {
    throw ValidationError("schedule step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  const double initial = max_lr / policy.div_factor;
  const double minimum = max_lr / policy.final_div;
  const auto peak = static_cast<std::int64_t>(std::floor(policy.pct_start * static_cast<double>(total_steps)));
  const std::int64_t last = total_steps - 1;
  if (step == peak) return max_lr;
  if (step < peak) {
    if (step == 0) return initial;
    const double t = static_cast<double>(step) / static_cast<double>(peak);
    return max_lr + (initial - max_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  if (step == last) return minimum;
  const double t = static_cast<double>(step - peak) / static_cast<double>(last - peak);
  return minimum + (max_lr - minimum) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

LossResult bce_loss(const Matrix<double>& logits, std::span<const int> labels, LogitMode mode) {
  const auto n = logits.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw ShapeError("logits and labels differ in length");
  const Eigen::Index want = mode == LogitMode::kTwoLogitSoftmax ? 2 : 1;
  if (logits.cols() != want) throw ShapeError("expected " + std::to_string(want) + " logits per sample");
  LossResult r;
  r.grad = Matrix<double>::Zero(n, want);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y != 0 && y != 1) throw ValidationError("label outside {0, 1}");
    if (mode == LogitMode::kTwoLogitSoftmax) {
      const double z0 = logits(i, 0), z1 = logits(i, 1);
      const double m = std::max(z0, z1);
      const double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
      total += lse - (y == 1 ? z1 : z0);
      const double p1 = std::exp(z1 - lse);
      const double p0 = std::exp(z0 - lse);
      r.grad(i, 0) = p0 - (y == 0 ? 1.0 : 0.0);
      r.grad(i, 1) = p1 - (y == 1 ? 1.0 : 0.0);
    } else {
      const double z = logits(i, 0);
      total += std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
      const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      r.grad(i, 0) = s - y;
    }
  }
  r.loss = total / static_cast<double>(n);
  r.grad /= static_cast<double>(n);
  return r;
}

// ---------------------------------------------------------------------------

PatchSampler::PatchSampler(const ImageStore& store, std::vector<AnnotationRecord> pool, PatchSpec patch,
                           SamplerPolicy policy, std::vector<AnnotationRecord> context)
    : store_(store), patch_(std::move(patch)), policy_(policy) {
  if (const auto errors = validate(policy_); !errors.empty()) throw ValidationError(errors.front());
  std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.annotation_id < b.annotation_id; });
  std::set<std::string> images;
  for (auto& r : pool) {
    images.insert(r.image_ref);
    (r.label == Label::kMitoticFigure ? mitotic_ : hard_negative_).push_back(r);
  }
  if (mitotic_.empty()) throw ValidationError("training pool holds no mitotic figures");
  if (hard_negative_.empty()) {
    policy_.p_random += policy_.p_hard_negative;
    policy_.p_hard_negative = 0.0;
  }
  images_.assign(images.begin(), images.end());
  for (auto& r : context.empty() ? pool : context) by_image_[r.image_ref].push_back(r);
}

SampleSource PatchSampler::draw_source(Rng& rng) const {
  const double u = uniform01(rng);
  if (u < policy_.p_mitotic) return SampleSource::kMitotic;
  if (u < policy_.p_mitotic + policy_.p_hard_negative) return SampleSource::kHardNegative;
  return SampleSource::kRandom;
}

SampleDraw PatchSampler::draw(Rng& rng) const {
  SampleDraw d;
  d.source = draw_source(rng);
  switch (d.source) {
    case SampleSource::kMitotic:
      d.record = mitotic_[uniform_index(rng, mitotic_.size())];
      d.label = 1;
      break;
    case SampleSource::kHardNegative:
      d.record = hard_negative_[uniform_index(rng, hard_negative_.size())];
      d.label = 0;
      break;
    case SampleSource::kRandom: {
      const auto& ref = images_[uniform_index(rng, images_.size())];
      auto it = by_image_.find(ref);
      static const std::vector<AnnotationRecord> kNone;
      auto rp = sample_random_patch(store_, ref, it == by_image_.end() ? kNone : it->second, rng, patch_);
      d.record = std::move(rp.record);
      d.patch = std::move(rp.patch);
      d.label = 0;
      break;
    }
  }
  return d;
}

TrainingSample PatchSampler::materialize(const SampleDraw& draw, Rng& rng, const AugmentPolicy* policy) const {
  RawPatch raw = draw.patch ? *draw.patch : extract_patch(store_, draw.record, patch_).patch;
  if (policy) raw = augment(raw, rng, *policy);
  return {normalize(raw, patch_), draw.label, draw.source, draw.record.annotation_id};
}

std::vector<TrainingSample> PatchSampler::next_batch(int batch_size, Rng& rng, const AugmentPolicy* policy) const {
  std::vector<TrainingSample> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) out.push_back(materialize(draw(rng), rng, policy));
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
  const T step_size = static_cast<T>(lr / c1);
  const T sqrt_c2 = static_cast<T>(std::sqrt(c2));
  const T eps = static_cast<T>(eps_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    m_[i] = b1 * m_[i] + (T(1) - b1) * p->grad;
    v_[i] = b2 * v_[i] + (T(1) - b2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() / sqrt_c2 + eps);
  }
}

// ---------------------------------------------------------------------------

std::string FeatureCache::make_key(const BackboneSpec& spec, std::uint64_t weights_checksum, const PatchSpec& patch) {
  std::ostringstream key;
  key.precision(17);
  key << spec.name << '/' << to_hex(weights_checksum) << '/' << patch.size;
  for (double v : patch.norm_mean) key << ',' << v;
  for (double v : patch.norm_std) key << ',' << v;
  return key.str();
}

void FeatureCache::bind(const std::string& key) {
  if (key != key_) {
    features_.clear();
    key_ = key;
  }
}

const std::vector<double>* FeatureCache::find(const std::string& annotation_id) const {
  auto it = features_.find(annotation_id);
  return it == features_.end() ? nullptr : &it->second;
}

void FeatureCache::insert(const std::string& annotation_id, std::vector<double> features) {
  features_[annotation_id] = std::move(features);
}

namespace {

template <typename T>
std::vector<T> to_input(const std::vector<float>& image) {
  return std::vector<T>(image.begin(), image.end());
}

template <typename T>
std::string cache_key(const Backbone<T>& backbone, const PatchSpec& patch) {
  return FeatureCache::make_key(backbone.spec(), parameter_checksum(backbone.parameters()), patch);
}

template <typename T>
RowVector<T> cached_embedding(const Backbone<T>& backbone, const ImageStore& store, const AnnotationRecord& record,
                              const PatchSpec& patch, FeatureCache& cache) {
  if (const auto* f = cache.find(record.annotation_id)) {
    RowVector<T> z(static_cast<Eigen::Index>(f->size()));
    for (std::size_t i = 0; i < f->size(); ++i) z(static_cast<Eigen::Index>(i)) = static_cast<T>((*f)[i]);
    return z;
  }
  const auto image = to_input<T>(normalize(extract_patch(store, record, patch).patch, patch));
  RowVector<T> z = backbone.embed(image, RunOptions{}, nullptr);
  cache.insert(record.annotation_id, std::vector<double>(z.data(), z.data() + z.size()));
  return z;
}

double probability_of_one(double z0, double z1) {
  const double d = z1 - z0;
  return d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
}

template <typename T>
std::pair<double, EvalResult> validation_impl(const AdaptedModel<T>& model, const ImageStore& store,
                                              const std::vector<AnnotationRecord>& records, const PatchSpec& patch,
                                              FeatureCache* cache) {
  if (records.empty()) throw ValidationError("empty validation set");
  Matrix<double> logits(static_cast<Eigen::Index>(records.size()), 2);
  std::vector<double> scores(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    RowVector<T> z;
    if (cache) {
      z = model.head_logits(cached_embedding(model.backbone(), store, records[i], patch, *cache));
    } else {
      const auto image = to_input<T>(normalize(extract_patch(store, records[i], patch).patch, patch));
      z = model.logits(image, RunOptions{}, nullptr);
    }
    logits(static_cast<Eigen::Index>(i), 0) = static_cast<double>(z(0));
    logits(static_cast<Eigen::Index>(i), 1) = static_cast<double>(z(1));
    scores[i] = probability_of_one(logits(static_cast<Eigen::Index>(i), 0), logits(static_cast<Eigen::Index>(i), 1));
  }
  const auto labels = binary_labels(records);
  const double loss = bce_loss(logits, labels).loss;
  return {loss, evaluate_scores(labels, scores)};
}

}  // namespace

template <typename T>
Matrix<T> cached_embeddings(const Backbone<T>& backbone, const ImageStore& store,
                            const std::vector<AnnotationRecord>& records, const PatchSpec& patch, FeatureCache& cache) {
  cache.bind(cache_key(backbone, patch));
  Matrix<T> out(static_cast<Eigen::Index>(records.size()), backbone.spec().feature_dim);
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = cached_embedding(backbone, store, records[i], patch, cache);
  }
  return out;
}

template <typename T>
Checkpoint<T> capture(AdaptedModel<T>& model, int epoch, std::optional<double> validation_loss) {
  Checkpoint<T> c;
  c.epoch = epoch;
  c.validation_loss = validation_loss;
  for (auto* p : model.trainable_parameters()) {
    c.names.push_back(p->name);
    c.values.push_back(p->value);
  }
  return c;
}

template <typename T>
void restore(AdaptedModel<T>& model, const Checkpoint<T>& checkpoint) {
  auto params = model.trainable_parameters();
  if (params.size() != checkpoint.values.size()) throw ValidationError("checkpoint does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != checkpoint.names[i] || params[i]->value.rows() != checkpoint.values[i].rows() ||
        params[i]->value.cols() != checkpoint.values[i].cols()) {
      throw ValidationError("checkpoint tensor '" + checkpoint.names[i] + "' does not match the model");
    }
    params[i]->value = checkpoint.values[i];
  }
}

template <typename T>
std::pair<double, EvalResult> validation_pass(const AdaptedModel<T>& model, const ImageStore& store,
                                              const std::vector<AnnotationRecord>& records, const PatchSpec& patch) {
  return validation_impl(model, store, records, patch, nullptr);
}

template <typename T>
TrainResult<T> train(AdaptedModel<T>& model, const TrainData& data, const TrainConfig& config, FeatureCache* cache) {
  if (!data.store) throw ValidationError("training data has no image store");
  if (const auto errors = validate(config); !errors.empty()) throw ValidationError("invalid train config: " + errors.front());
  if (config.select_best && data.validation.empty()) {
    throw ValidationError("checkpoint selection needs a nonempty validation set");
  }
  const bool probe = model.mode() == AdaptMode::kLinearProbe;
  FeatureCache* features = probe ? cache : nullptr;
  if (features) features->bind(cache_key(model.backbone(), data.patch));

  PatchSampler sampler(*data.store, data.train, data.patch, config.sampler, data.context);
  Rng rng(derive_seed(config.seed, "sampler"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));
  const AugmentPolicy* policy = config.augment && !features ? &config.augment_policy : nullptr;
  auto params = model.trainable_parameters();
  Adam<T> adam(params, config.beta1, config.beta2, config.eps);

  TrainResult<T> result;
  auto validate_now = [&] { return validation_impl(model, *data.store, data.validation, data.patch, features); };
  if (!data.validation.empty()) result.initial_validation_loss = validate_now().first;

  const std::int64_t total = config.total_steps();
  const int batch = config.batch_size;
  std::optional<Checkpoint<T>> best;
  std::vector<typename AdaptedModel<T>::Saved> saved(static_cast<std::size_t>(batch));
  std::vector<RowVector<T>> embeddings(static_cast<std::size_t>(batch));
  Matrix<double> logits(batch, 2);
  std::vector<int> labels(static_cast<std::size_t>(batch));
  RunOptions opts{true, &dropout_rng};

  for (int epoch = 1; epoch <= config.pseudo_epochs; ++epoch) {
    for (int s = 0; s < config.steps_per_epoch(); ++s) {
      const std::int64_t step = result.steps;
      const double lr = one_cycle_lr(step, total, config.max_lr, config.schedule);
      for (auto* p : params) p->zero_grad();
      for (int i = 0; i < batch; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const SampleDraw d = sampler.draw(rng);
        labels[ui] = d.label;
        RowVector<T> z;
        if (features && !d.patch) {
          embeddings[ui] = cached_embedding(model.backbone(), *data.store, d.record, data.patch, *features);
          z = model.head_logits(embeddings[ui]);
        } else if (features) {
          const auto image = to_input<T>(sampler.materialize(d, rng, nullptr).image);
          embeddings[ui] = model.backbone().embed(image, RunOptions{}, nullptr);
          z = model.head_logits(embeddings[ui]);
        } else {
          const auto image = to_input<T>(sampler.materialize(d, rng, policy).image);
          z = model.logits(image, opts, &saved[ui]);
        }
        logits(i, 0) = static_cast<double>(z(0));
        logits(i, 1) = static_cast<double>(z(1));
      }
      const LossResult loss = bce_loss(logits, labels);
      if (!std::isfinite(loss.loss)) {
        result.trace.push_back({step, lr, loss.loss});
        throw TrainingDiverged("non-finite training loss at step " + std::to_string(step), result.trace);
      }
      for (int i = 0; i < batch; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const RowVector<T> g = loss.grad.row(i).cast<T>();
        if (features) model.backward_head(embeddings[ui], g);
        else model.backward(saved[ui], g);
      }
      adam.step(lr);
      result.trace.push_back({step, lr, loss.loss});
      ++result.steps;
    }
    if (!data.validation.empty()) {
      const auto [vloss, metrics] = validate_now();
      if (!std::isfinite(vloss)) throw TrainingDiverged("non-finite validation loss", result.trace);
      result.epochs.push_back({epoch, vloss});
      if (config.select_best && (!best || vloss < *best->validation_loss)) {
        best = capture(model, epoch, vloss);
        best->metrics = metrics;
      }
      if (!config.select_best && epoch == config.pseudo_epochs) {
        best = capture(model, epoch, vloss);
        best->metrics = metrics;
      }
    } else if (epoch == config.pseudo_epochs) {
      best = capture(model, epoch, std::nullopt);
    }
  }
  restore(model, *best);
  result.best = std::move(*best);
  return result;
}

std::string trace_jsonl(const std::vector<TraceEntry>& trace) {
  std::string out;
  for (const auto& t : trace) {
    out += json{{"step", t.step}, {"lr", t.lr}, {"loss", t.loss}}.dump();
    out += '\n';
  }
  return out;
}

std::uint64_t trace_digest(const std::vector<TraceEntry>& trace) { return fnv1a64(trace_jsonl(trace)); }

// ---------------------------------------------------------------------------

template <typename T>
AdaptedModel<T> build_model(std::unique_ptr<Backbone<T>> backbone, AdaptMode mode, const LoraConfig& lora,
                            bool head_bias, std::uint64_t seed) {
  auto head = make_probe_head<T>(backbone->spec().feature_dim, head_bias, derive_seed(seed, "head"));
  switch (mode) {
    case AdaptMode::kLinearProbe: return make_linear_probe(std::move(backbone), std::move(head));
    case AdaptMode::kLora: return inject_lora(std::move(backbone), lora, std::move(head));
    case AdaptMode::kFullFinetune: return make_full_finetune(std::move(backbone), std::move(head));
  }
  throw ValidationError("unknown adaptation mode");
}

template <typename T>
TensorArchive make_checkpoint_archive(AdaptedModel<T>& model, const CheckpointMeta& meta) {
  TensorArchive archive = snapshot_parameters(model.trainable_parameters());
  archive.metadata["kind"] = "checkpoint";
  archive.metadata["model"] = meta.model;
  archive.metadata["weights_source"] = meta.weights_source;
  archive.metadata["mode"] = std::string(to_string(meta.mode));
  if (meta.lora) archive.metadata["lora_config"] = to_json(*meta.lora).dump();
  archive.metadata["head_bias"] = meta.head_bias ? "1" : "0";
  archive.metadata["epoch"] = std::to_string(meta.epoch);
  archive.metadata["validation_loss"] = meta.validation_loss ? json(*meta.validation_loss).dump() : "null";
  archive.metadata["seed"] = std::to_string(meta.seed);
  archive.metadata["config"] = meta.config_json;
  archive.metadata["trace_digest"] = to_hex(meta.trace_digest);
  return archive;
}

CheckpointMeta read_checkpoint_meta(const TensorArchive& archive) {
  const auto& md = archive.metadata;
  auto kind = md.find("kind");
  if (kind == md.end() || kind->second != "checkpoint") throw ValidationError("archive is not a training checkpoint");
  CheckpointMeta meta;
  try {
    meta.model = md.at("model");
    meta.weights_source = md.at("weights_source");
    meta.mode = parse_adapt_mode(md.at("mode"));
    if (auto it = md.find("lora_config"); it != md.end()) meta.lora = lora_config_from_json(json::parse(it->second));
    meta.head_bias = md.at("head_bias") == "1";
    meta.epoch = std::stoi(md.at("epoch"));
    const auto vl = json::parse(md.at("validation_loss"));
    if (!vl.is_null()) meta.validation_loss = vl.get<double>();
    meta.seed = std::stoull(md.at("seed"));
    meta.config_json = md.at("config");
    meta.trace_digest = std::stoull(md.at("trace_digest"), nullptr, 16);
  } catch (const std::out_of_range& e) {
    throw ValidationError(std::string("checkpoint metadata incomplete: ") + e.what());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint metadata malformed: ") + e.what());
  }
  return meta;
}

template <typename T>
AdaptedModel<T> model_from_checkpoint(const TensorArchive& archive, const BackboneRegistry& registry) {
  const auto meta = read_checkpoint_meta(archive);
  auto spec = registry.find(meta.model);
  auto backbone = load_weights<T>(spec, meta.weights_source);
  auto model = build_model(std::move(backbone), meta.mode, meta.lora.value_or(LoraConfig{}), meta.head_bias, meta.seed);
  restore_parameters(archive, model.trainable_parameters());
  return model;
}

#define MITOBENCH_INSTANTIATE(T)                                                                                  \
  template class Adam<T>;                                                                                         \
  template Matrix<T> cached_embeddings(const Backbone<T>&, const ImageStore&, const std::vector<AnnotationRecord>&, \
                                       const PatchSpec&, FeatureCache&);                                          \
  template Checkpoint<T> capture(AdaptedModel<T>&, int, std::optional<double>);                                   \
  template void restore(AdaptedModel<T>&, const Checkpoint<T>&);                                                  \
  template std::pair<double, EvalResult> validation_pass(const AdaptedModel<T>&, const ImageStore&,               \
                                                         const std::vector<AnnotationRecord>&, const PatchSpec&); \
  template TrainResult<T> train(AdaptedModel<T>&, const TrainData&, const TrainConfig&, FeatureCache*);           \
  template AdaptedModel<T> build_model(std::unique_ptr<Backbone<T>>, AdaptMode, const LoraConfig&, bool,          \
                                       std::uint64_t);                                                            \
  template TensorArchive make_checkpoint_archive(AdaptedModel<T>&, const CheckpointMeta&);                        \
  template AdaptedModel<T> model_from_checkpoint(const TensorArchive&, const BackboneRegistry&);

MITOBENCH_INSTANTIATE(float)
MITOBENCH_INSTANTIATE(double)

}  // namespace mitobench
