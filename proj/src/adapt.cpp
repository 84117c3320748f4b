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

#include "mitobench/adapt.hpp"

#include <cmath>

#include "json.hpp"
#include "mitobench/config.hpp"
#include "mitobench/errors.hpp"

namespace mitobench {
namespace {

template <typename T>
void check_unmerged_lora(const AdaptedModel<T>& model, const char* op) {
  if (model.mode() != AdaptMode::kLora) {
    throw ValidationError(std::string(op) + ": model is not in LoRA mode");
  }
  if (model.merged()) throw ValidationError(std::string(op) + ": adapters were already merged");
}

}  // namespace

std::vector<std::string> validate(const LoraConfig& c) {
  std::vector<std::string> errors;
  if (c.rank < 1) errors.push_back("rank: must be >= 1");
  if (!(c.alpha > 0.0)) errors.push_back("alpha: must be positive");
  if (c.gamma && !std::isfinite(*c.gamma)) errors.push_back("gamma: must be finite");
  if (!(c.dropout_p >= 0.0 && c.dropout_p < 1.0)) errors.push_back("dropout_p: must be in [0, 1)");
  if (c.targets.empty()) errors.push_back("targets: must be nonempty");
  return errors;
}

std::string_view to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::kLinearProbe: return "probe";
    case AdaptMode::kLora: return "lora";
    case AdaptMode::kFullFinetune: return "full";
  }
  return "?";
}

AdaptMode parse_adapt_mode(std::string_view text) {
  if (text == "probe" || text == "linear_probe") return AdaptMode::kLinearProbe;
  if (text == "lora") return AdaptMode::kLora;
  if (text == "full" || text == "full_finetune") return AdaptMode::kFullFinetune;
  throw ValidationError("unknown adaptation mode '" + std::string(text) + "'");
}

template <typename T>
void ProbeHead<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

template <typename T>
ProbeHead<T> make_probe_head(int features, bool with_bias, std::uint64_t seed) {
  if (features < 1) throw ValidationError("probe head needs at least one input feature");
  ProbeHead<T> head;
  head.weight = Parameter<T>("head.weight", ProbeHead<T>::kClasses, features);
  head.bias = Parameter<T>("head.bias", 1, ProbeHead<T>::kClasses);
  head.has_bias = with_bias;
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  for (Eigen::Index i = 0; i < head.weight.value.size(); ++i) {
    head.weight.value.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
  }
  if (with_bias) {
    for (Eigen::Index i = 0; i < head.bias.value.size(); ++i) {
      head.bias.value.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
    }
  }
  return head;
}

template <typename T>
ProbeHead<T> probe_head_from_weights(const Matrix<T>& weight, std::optional<RowVector<T>> bias) {
  if (weight.rows() != ProbeHead<T>::kClasses) {
    throw ShapeError("probe head must have exactly " + std::to_string(ProbeHead<T>::kClasses) + " rows");
  }
  ProbeHead<T> head;
  head.weight = Parameter<T>("head.weight", weight.rows(), weight.cols());
  head.weight.value = weight;
  head.bias = Parameter<T>("head.bias", 1, weight.rows());
  if (bias) {
    if (bias->size() != weight.rows()) throw ShapeError("probe head bias size must equal class count");
    head.bias.value.row(0) = *bias;
    head.has_bias = true;
  }
  return head;
}

template <typename T>
RowVector<T> probe_predict(const ProbeHead<T>& head, const RowVector<T>& z) {
  if (z.size() != head.features()) {
    throw ShapeError("probe head expects " + std::to_string(head.features()) + " features, got " +
                     std::to_string(z.size()));
  }
  RowVector<T> y = z * head.weight.value.transpose();
  if (head.has_bias) y += head.bias.value.row(0);
  return y;
}

template <typename T>
ProbeHead<T> fit_probe(const Matrix<T>& features, std::span<const int> labels, const ProbeFitConfig& config) {
  const Eigen::Index n_rows = features.rows();
  if (n_rows != static_cast<Eigen::Index>(labels.size())) {
    throw ShapeError("fit_probe: feature rows and labels differ in length");
  }
  if (n_rows < 2) throw ValidationError("fit_probe: need at least two samples");
  if (!features.allFinite()) throw ValidationError("fit_probe: features contain non-finite values");
  int positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("fit_probe: labels must be 0 or 1");
    positives += y;
  }
  if (positives == 0 || positives == n_rows) throw ValidationError("fit_probe: labels contain a single class");

  using Md = Eigen::MatrixXd;
  using Vd = Eigen::VectorXd;
  const Eigen::Index n_feat = features.cols();
  const Eigen::Index dim = n_feat + (config.add_bias ? 1 : 0);
  Md x(n_rows, dim);
  x.leftCols(n_feat) = features.template cast<double>();
  if (config.add_bias) x.col(n_feat).setOnes();
  Vd y(n_rows);
  for (Eigen::Index i = 0; i < n_rows; ++i) y[i] = labels[i];
  Vd reg = Vd::Constant(dim, config.l2);
  if (config.add_bias) reg[n_feat] = 0.0;

  const double inv_n = 1.0 / static_cast<double>(n_rows);
  auto objective = [&](const Vd& w) {
    const Vd m = x * w;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n_rows; ++i) {
      // log(1 + exp(-s m)) with s = +-1, in a stable form.
      const double s = y[i] > 0.5 ? m[i] : -m[i];
      loss += s > 0 ? std::log1p(std::exp(-s)) : -s + std::log1p(std::exp(s));
    }
    return loss * inv_n + 0.5 * (reg.array() * w.array().square()).sum();
  };

  Vd w = Vd::Zero(dim);
  double f = objective(w);
  for (int iter = 0; iter < config.max_iterations; ++iter) {
    const Vd m = x * w;
    Vd p(n_rows), s(n_rows);
    for (Eigen::Index i = 0; i < n_rows; ++i) {
      p[i] = m[i] >= 0 ? 1.0 / (1.0 + std::exp(-m[i])) : std::exp(m[i]) / (1.0 + std::exp(m[i]));
      s[i] = p[i] * (1.0 - p[i]);
    }
    const Vd grad = x.transpose() * (p - y) * inv_n + (reg.array() * w.array()).matrix();
    if (grad.lpNorm<Eigen::Infinity>() <= config.gradient_tolerance) break;
    Md hess = x.transpose() * s.asDiagonal() * x * inv_n;
    hess.diagonal() += reg;
    hess.diagonal().array() += 1e-12;
    const Vd step = hess.ldlt().solve(grad);
    double t = 1.0;
    Vd candidate = w - step;
    double fc = objective(candidate);
    while (fc > f + 1e-4 * t * grad.dot(-step) && t > 1e-10) {
      t *= 0.5;
      candidate = w - t * step;
      fc = objective(candidate);
    }
    if (!(fc <= f)) break;
    w = std::move(candidate);
    f = fc;
  }

  Matrix<T> weight(2, n_feat);
  weight.row(1) = (0.5 * w.head(n_feat)).transpose().template cast<T>();
  weight.row(0) = -weight.row(1);
  std::optional<RowVector<T>> bias;
  if (config.add_bias) {
    RowVector<T> b(2);
    b[1] = static_cast<T>(0.5 * w[n_feat]);
    b[0] = -b[1];
    bias = b;
  }
  return probe_head_from_weights<T>(weight, bias);
}

// ---------------------------------------------------------------------------

template <typename T>
AdaptedModel<T>::AdaptedModel(std::unique_ptr<Backbone<T>> backbone, AdaptMode mode, ProbeHead<T> head)
    : backbone_(std::move(backbone)), mode_(mode), head_(std::move(head)) {
  if (!backbone_) throw ValidationError("adapted model requires a backbone");
  if (head_.classes() != ProbeHead<T>::kClasses) throw ShapeError("probe head must have two classes");
  if (head_.features() != backbone_->spec().feature_dim) {
    throw ShapeError("probe head input " + std::to_string(head_.features()) + " != backbone feature_dim " +
                     std::to_string(backbone_->spec().feature_dim));
  }
  apply_trainable_flags();
}

template <typename T>
AdaptedModel<T>::AdaptedModel(const AdaptedModel& other)
    : backbone_(other.backbone_->clone()),
      mode_(other.mode_),
      head_(other.head_),
      lora_config_(other.lora_config_),
      merged_(other.merged_) {}

template <typename T>
AdaptedModel<T>& AdaptedModel<T>::operator=(const AdaptedModel& other) {
  if (this != &other) *this = AdaptedModel(other);
  return *this;
}

template <typename T>
void AdaptedModel<T>::apply_trainable_flags() {
  for (auto* p : backbone_->parameters()) p->trainable = mode_ == AdaptMode::kFullFinetune;
  for (auto& [_, layer] : adapters()) {
    layer->a.trainable = true;
    layer->b.trainable = true;
  }
  head_.weight.trainable = true;
  head_.bias.trainable = head_.has_bias;
}

template <typename T>
RowVector<T> AdaptedModel<T>::logits(std::span<const T> image, const RunOptions& opts, Saved* saved) const {
  const bool keep = saved && mode_ != AdaptMode::kLinearProbe;
  RowVector<T> z = backbone_->embed(image, opts, keep ? &saved->backbone : nullptr);
  RowVector<T> y = probe_predict(head_, z);
  if (saved) saved->embedding = std::move(z);
  return y;
}

template <typename T>
void AdaptedModel<T>::backward_head(const RowVector<T>& embedding, const RowVector<T>& grad_logits) {
  head_.weight.grad.noalias() += grad_logits.transpose() * embedding;
  if (head_.has_bias) head_.bias.grad.row(0) += grad_logits;
}

template <typename T>
void AdaptedModel<T>::backward(const Saved& saved, const RowVector<T>& grad_logits) {
  backward_head(saved.embedding, grad_logits);
  if (mode_ == AdaptMode::kLinearProbe) return;
  if (!saved.backbone) throw ValidationError("backward: forward pass did not keep activations");
  const RowVector<T> dz = grad_logits * head_.weight.value;
  backbone_->backward(*saved.backbone, dz);
}

template <typename T>
std::vector<Parameter<T>*> AdaptedModel<T>::parameters() {
  auto out = backbone_->parameters();
  head_.collect(out);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> AdaptedModel<T>::trainable_parameters() {
  std::vector<Parameter<T>*> out;
  for (auto* p : parameters()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> AdaptedModel<T>::frozen_parameters() const {
  std::vector<const Parameter<T>*> out;
  for (auto* p : const_cast<AdaptedModel*>(this)->parameters()) {
    if (!p->trainable) out.push_back(p);
  }
  return out;
}

template <typename T>
std::int64_t AdaptedModel<T>::trainable_count() {
  std::int64_t n = 0;
  for (auto* p : trainable_parameters()) n += p->size();
  return n;
}

template <typename T>
std::map<std::string, LoraLayer<T>*> AdaptedModel<T>::adapters() {
  std::map<std::string, LoraLayer<T>*> out;
  for (auto& entry : backbone_->adaptable_layers()) {
    if (entry.layer->lora) out.emplace(entry.path, &*entry.layer->lora);
  }
  return out;
}

template <typename T>
void AdaptedModel<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
AdaptedModel<T> make_linear_probe(std::unique_ptr<Backbone<T>> backbone, ProbeHead<T> head) {
  return AdaptedModel<T>(std::move(backbone), AdaptMode::kLinearProbe, std::move(head));
}

template <typename T>
AdaptedModel<T> make_full_finetune(std::unique_ptr<Backbone<T>> backbone, ProbeHead<T> head) {
  return AdaptedModel<T>(std::move(backbone), AdaptMode::kFullFinetune, std::move(head));
}

template <typename T>
AdaptedModel<T> inject_lora(std::unique_ptr<Backbone<T>> backbone, const LoraConfig& config, ProbeHead<T> head) {
  if (const auto errors = validate(config); !errors.empty()) {
    throw ValidationError("invalid LoRA config: " + errors.front());
  }
  auto layers = backbone->adaptable_layers();
  if (layers.empty()) {
    throw UnsupportedModeError("backbone '" + backbone->spec().name +
                               "' has no attention or MLP projections; LoRA is unsupported");
  }
  for (const auto& entry : layers) {
    if (!config.targets.contains(entry.target)) continue;
    const int bound = std::min(entry.layer->in_features(), entry.layer->out_features());
    if (config.rank > bound) {
      throw ValidationError("LoRA rank " + std::to_string(config.rank) + " exceeds min dimension " +
                            std::to_string(bound) + " of '" + entry.path + "'");
    }
    if (entry.layer->lora) throw ValidationError("'" + entry.path + "' already carries an adapter");
  }
  Rng rng(config.seed);
  const T gamma = static_cast<T>(config.effective_gamma());
  for (const auto& entry : layers) {
    if (!config.targets.contains(entry.target)) continue;
    const int in = entry.layer->in_features();
    const int out = entry.layer->out_features();
    LoraLayer<T> lora;
    lora.a = Parameter<T>(entry.path + ".lora_a", config.rank, in);
    lora.b = Parameter<T>(entry.path + ".lora_b", out, config.rank);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < lora.a.value.size(); ++i) {
      lora.a.value.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
    }
    lora.gamma = gamma;
    lora.dropout_p = config.dropout_p;
    entry.layer->lora = std::move(lora);
  }
  AdaptedModel<T> model(std::move(backbone), AdaptMode::kLora, std::move(head));
  model.attach_lora(config);
  return model;
}

template <typename T>
std::unique_ptr<Backbone<T>> merge_lora(AdaptedModel<T>& model) {
  check_unmerged_lora(model, "merge_lora");
  for (auto& entry : model.backbone().adaptable_layers()) {
    auto& layer = *entry.layer;
    if (!layer.lora) continue;
    layer.weight.value.noalias() += layer.lora->gamma * (layer.lora->b.value * layer.lora->a.value);
    layer.lora.reset();
  }
  model.mark_merged();
  auto plain = model.backbone().clone();
  plain->set_trainable(false);
  return plain;
}

std::int64_t lora_parameter_count(const BackboneSpec& spec, const LoraConfig& config) {
  if (spec.architecture != Architecture::kVit) return 0;
  std::int64_t per_block = 0;
  const std::int64_t d = spec.width;
  const std::int64_t m = spec.mlp_dim;
  for (LoraTarget t : config.targets) {
    switch (t) {
      case LoraTarget::kQProj:
      case LoraTarget::kKProj:
      case LoraTarget::kVProj:
      case LoraTarget::kOProj: per_block += config.rank * (d + d); break;
      case LoraTarget::kMlpFc1:
      case LoraTarget::kMlpFc2: per_block += config.rank * (d + m); break;
    }
  }
  return spec.depth * per_block;
}

template <typename T>
static ArchiveTensor to_archive_tensor(const Matrix<T>& m) {
  ArchiveTensor t;
  t.shape = {m.rows(), m.cols()};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(m.data()[i]);
  return t;
}

template <typename T>
static void from_archive_tensor(const ArchiveTensor& t, Matrix<T>& m, const std::string& name) {
  if (t.element_count() != m.size() || (t.shape.size() == 2 && (t.shape[0] != m.rows() || t.shape[1] != m.cols()))) {
    throw ShapeError("tensor '" + name + "' does not match the expected shape " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()));
  }
  for (std::size_t i = 0; i < t.data.size(); ++i) m.data()[i] = static_cast<T>(t.data[i]);
}

template <typename T>
TensorArchive save_adapter(AdaptedModel<T>& model) {
  check_unmerged_lora(model, "save_adapter");
  TensorArchive archive;
  archive.metadata["kind"] = "lora_adapter";
  archive.metadata["backbone"] = model.spec().name;
  archive.metadata["lora_config"] = to_json(*model.lora_config()).dump();
  archive.metadata["gamma"] = nlohmann::json(model.lora_config()->effective_gamma()).dump();
  archive.metadata["head_bias"] = model.head().has_bias ? "1" : "0";
  for (auto& [path, layer] : model.adapters()) {
    archive.tensors[path + ".lora_a"] = to_archive_tensor(layer->a.value);
    archive.tensors[path + ".lora_b"] = to_archive_tensor(layer->b.value);
  }
  archive.tensors["head.weight"] = to_archive_tensor(model.head().weight.value);
  if (model.head().has_bias) archive.tensors["head.bias"] = to_archive_tensor(model.head().bias.value);
  return archive;
}

template <typename T>
AdaptedModel<T> load_adapter(const TensorArchive& archive, std::unique_ptr<Backbone<T>> backbone) {
  auto kind = archive.metadata.find("kind");
  if (kind == archive.metadata.end() || kind->second != "lora_adapter") {
    throw ValidationError("archive is not a LoRA adapter checkpoint");
  }
  if (archive.metadata.at("backbone") != backbone->spec().name) {
    throw ValidationError("adapter was trained for backbone '" + archive.metadata.at("backbone") + "', not '" +
                          backbone->spec().name + "'");
  }
  const LoraConfig config = lora_config_from_json(nlohmann::json::parse(archive.metadata.at("lora_config")));
  const bool bias = archive.metadata.at("head_bias") == "1";
  auto head = make_probe_head<T>(backbone->spec().feature_dim, bias, 0);
  from_archive_tensor(archive.tensors.at("head.weight"), head.weight.value, "head.weight");
  if (bias) from_archive_tensor(archive.tensors.at("head.bias"), head.bias.value, "head.bias");
  auto model = inject_lora<T>(std::move(backbone), config, std::move(head));
  for (auto& [path, layer] : model.adapters()) {
    auto a = archive.tensors.find(path + ".lora_a");
    auto b = archive.tensors.find(path + ".lora_b");
    if (a == archive.tensors.end() || b == archive.tensors.end()) {
      throw ValidationError("adapter checkpoint is missing factors for '" + path + "'");
    }
    from_archive_tensor(a->second, layer->a.value, a->first);
    from_archive_tensor(b->second, layer->b.value, b->first);
  }
  return model;
}

template <typename T>
TensorArchive snapshot_parameters(const std::vector<Parameter<T>*>& params) {
  TensorArchive archive;
  for (const auto* p : params) archive.tensors[p->name] = to_archive_tensor(p->value);
  return archive;
}

template <typename T>
void restore_parameters(const TensorArchive& snapshot, const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) {
    auto it = snapshot.tensors.find(p->name);
    if (it == snapshot.tensors.end()) throw ValidationError("snapshot lacks tensor '" + p->name + "'");
    from_archive_tensor(it->second, p->value, p->name);
  }
}

#define MITOBENCH_INSTANTIATE(T)                                                                          \
  template struct ProbeHead<T>;                                                                           \
  template class AdaptedModel<T>;                                                                         \
  template ProbeHead<T> make_probe_head<T>(int, bool, std::uint64_t);                                     \
  template ProbeHead<T> probe_head_from_weights<T>(const Matrix<T>&, std::optional<RowVector<T>>);        \
  template RowVector<T> probe_predict(const ProbeHead<T>&, const RowVector<T>&);                          \
  template ProbeHead<T> fit_probe(const Matrix<T>&, std::span<const int>, const ProbeFitConfig&);         \
  template AdaptedModel<T> make_linear_probe(std::unique_ptr<Backbone<T>>, ProbeHead<T>);                 \
  template AdaptedModel<T> make_full_finetune(std::unique_ptr<Backbone<T>>, ProbeHead<T>);                \
  template AdaptedModel<T> inject_lora(std::unique_ptr<Backbone<T>>, const LoraConfig&, ProbeHead<T>);    \
  template std::unique_ptr<Backbone<T>> merge_lora(AdaptedModel<T>&);                                     \
  template TensorArchive save_adapter(AdaptedModel<T>&);                                                  \
  template AdaptedModel<T> load_adapter(const TensorArchive&, std::unique_ptr<Backbone<T>>);              \
  template TensorArchive snapshot_parameters(const std::vector<Parameter<T>*>&);                          \
  template void restore_parameters(const TensorArchive&, const std::vector<Parameter<T>*>&);

MITOBENCH_INSTANTIATE(float)
MITOBENCH_INSTANTIATE(double)
#undef MITOBENCH_INSTANTIATE

}  // namespace mitobench
