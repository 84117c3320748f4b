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
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mitobench/backbone.hpp"
#include "mitobench/random.hpp"
#include "mitobench/tensor.hpp"
#include "mitobench/tensor_archive.hpp"

namespace mitobench {

struct RunOptions {
  // Training mode activates adapter dropout; inference is deterministic.
  bool training = false;
  Rng* rng = nullptr;
};

// Adapter factors for one frozen weight W (out x in):
//   h = W x + gamma * B (A dropout(x))
template <typename T>
struct LoraLayer {
  Parameter<T> a;  // rank x in
  Parameter<T> b;  // out x rank
  T gamma = T(1);
  double dropout_p = 0.0;

  int rank() const { return static_cast<int>(a.value.rows()); }
};

// Affine map over token rows, optionally carrying a LoRA adapter.
template <typename T>
class Linear {
 public:
  struct Saved {
    Matrix<T> input;
    Matrix<T> dropped;  // adapter-branch input after dropout
    Matrix<T> mask;     // inverted-dropout multipliers; empty when inactive
    Matrix<T> down;     // dropped * A^T
  };

  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features);

  int in_features() const { return static_cast<int>(weight.value.cols()); }
  int out_features() const { return static_cast<int>(weight.value.rows()); }

  Matrix<T> forward(const Matrix<T>& x, const RunOptions& opts, Saved* saved) const;
  // Accumulates parameter gradients; returns d(loss)/d(input) when requested.
  Matrix<T> backward(const Saved& saved, const Matrix<T>& grad_out, bool want_input_grad);

  void collect(std::vector<Parameter<T>*>& out);

  Parameter<T> weight;
  Parameter<T> bias;
  std::optional<LoraLayer<T>> lora;
};

template <typename T>
class LayerNorm {
 public:
  struct Saved {
    Matrix<T> normalized;
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, int width);

  Matrix<T> forward(const Matrix<T>& x, Saved* saved) const;
  Matrix<T> backward(const Saved& saved, const Matrix<T>& grad_out);
  void collect(std::vector<Parameter<T>*>& out);

  Parameter<T> weight;
  Parameter<T> bias;
  T eps = T(1e-6);
};

enum class LoraTarget { kQProj, kKProj, kVProj, kOProj, kMlpFc1, kMlpFc2 };

std::string_view to_string(LoraTarget target);
LoraTarget parse_lora_target(std::string_view text);
bool is_attention_target(LoraTarget target);

template <typename T>
struct AdaptableLinear {
  std::string path;  // e.g. "blocks.0.attn.q_proj"
  LoraTarget target;
  Linear<T>* layer;
};

// Opaque per-sample activation record kept for the backward pass.
class Activations {
 public:
  virtual ~Activations() = default;
};

// An executable feature extractor. Instances are immutable during inference
// and may be shared read-only across threads; training mutates gradients.
template <typename T>
class Backbone {
 public:
  explicit Backbone(BackboneHandle spec) : spec_(std::move(spec)) {}
  virtual ~Backbone() = default;

  const BackboneSpec& spec() const { return *spec_; }
  const BackboneHandle& handle() const { return spec_; }

  virtual bool has_tokens() const = 0;
  // Final token sequence (1 + registers + P) x width for one normalized CHW
  // image. Throws UnsupportedModeError for architectures without tokens.
  virtual Matrix<T> tokens(std::span<const T> image, const RunOptions& opts) const = 0;
  // 1 x feature_dim. When `saved` is non-null the activations needed by
  // backward() are stored there.
  virtual RowVector<T> embed(std::span<const T> image, const RunOptions& opts,
                             std::unique_ptr<Activations>* saved) const = 0;
  virtual void backward(const Activations& saved, const RowVector<T>& grad_embedding) = 0;

  virtual std::vector<Parameter<T>*> parameters() = 0;
  std::vector<const Parameter<T>*> parameters() const;
  virtual std::vector<AdaptableLinear<T>> adaptable_layers() { return {}; }
  virtual std::unique_ptr<Backbone<T>> clone() const = 0;

  void set_trainable(bool trainable);

 protected:
  void check_image(std::span<const T> image) const;

 private:
  BackboneHandle spec_;
};

// Images are stored as B contiguous normalized CHW planes.
template <typename T>
struct ImageBatch {
  int batch = 0;
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  std::span<const T> image(int i) const {
    const std::size_t n = static_cast<std::size_t>(channels) * height * width;
    return {data.data() + n * i, n};
  }
};

// B x (1 + registers + P) x width. Errors on shape mismatch or non-finite output.
template <typename T>
std::vector<Matrix<T>> forward_tokens(const Backbone<T>& backbone, const ImageBatch<T>& images);

// B x feature_dim under the backbone's embedding rule.
template <typename T>
Matrix<T> embed(const Backbone<T>& backbone, const ImageBatch<T>& images);

// Applies an embedding rule to a final token sequence laid out as
// [class, registers..., patches...]. Register tokens are excluded from the mean.
template <typename T>
RowVector<T> embed_tokens(const Matrix<T>& tokens, EmbeddingRule rule, int register_tokens);

// Seeded random initialization; all parameters frozen.
template <typename T>
std::unique_ptr<Backbone<T>> make_backbone(BackboneHandle spec, std::uint64_t seed);

// Loads weights from an archive, applying the spec's name map. Every expected
// tensor must be present with matching shape; unexpected tensors are rejected.
template <typename T>
std::unique_ptr<Backbone<T>> load_weights(BackboneHandle spec, const TensorArchive& archive);

// Resolves "seed:<n>" or a tensor-archive path.
template <typename T>
std::unique_ptr<Backbone<T>> load_weights(BackboneHandle spec, const std::string& source);

template <typename T>
TensorArchive save_weights(const Backbone<T>& backbone);

// Digest over every parameter name and float32 value, in parameter order.
template <typename T>
std::uint64_t parameter_checksum(const std::vector<const Parameter<T>*>& params);

// Converts between precisions (same architecture and parameter set).
template <typename To, typename From>
std::unique_ptr<Backbone<To>> convert_backbone(const Backbone<From>& backbone);

}  // namespace mitobench
