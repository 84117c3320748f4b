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

#include "mitobench/network.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

#include "mitobench/errors.hpp"
#include "mitobench/hash.hpp"

namespace mitobench {
namespace {

template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
void init_uniform(Parameter<T>& p, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
  }
}

template <typename T>
void init_normal(Parameter<T>& p, double std, Rng& rng) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = static_cast<T>(std * standard_normal(rng));
  }
}

template <typename T>
void init_linear(Linear<T>& layer, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in_features()));
  init_uniform(layer.weight, bound, rng);
  init_uniform(layer.bias, bound, rng);
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <typename T>
void softmax_rows(Matrix<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

// Splits a normalized CHW image into P rows of flattened (c, y, x) patches.
template <typename T>
Matrix<T> patchify(std::span<const T> image, const BackboneSpec& spec) {
  const int g = spec.grid_side();
  const int ps = spec.patch_side();
  const int size = spec.input_size;
  Matrix<T> out(spec.patch_grid, 3 * ps * ps);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const int p = gy * g + gx;
      T* dst = out.row(p).data();
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < ps; ++y) {
          const T* src = image.data() + (static_cast<std::size_t>(c) * size + gy * ps + y) * size + gx * ps;
          std::memcpy(dst, src, sizeof(T) * ps);
          dst += ps;
        }
      }
    }
  }
  return out;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

// ---------------------------------------------------------------------------
// Vision transformer: pre-norm blocks, separate Q/K/V projections, GELU MLP.

template <typename T>
struct Block {
  LayerNorm<T> norm1;
  Linear<T> q_proj, k_proj, v_proj, out_proj;
  LayerNorm<T> norm2;
  Linear<T> fc1, fc2;

  struct Saved {
    typename LayerNorm<T>::Saved norm1;
    typename Linear<T>::Saved q, k, v, out;
    Matrix<T> queries, keys, values;
    std::vector<Matrix<T>> probs;  // per head, tokens x tokens
    typename LayerNorm<T>::Saved norm2;
    typename Linear<T>::Saved fc1, fc2;
    Matrix<T> pre_activation;
  };

  Block(const std::string& prefix, int width, int mlp)
      : norm1(prefix + ".norm1", width),
        q_proj(prefix + ".attn.q_proj", width, width),
        k_proj(prefix + ".attn.k_proj", width, width),
        v_proj(prefix + ".attn.v_proj", width, width),
        out_proj(prefix + ".attn.out_proj", width, width),
        norm2(prefix + ".norm2", width),
        fc1(prefix + ".mlp.fc1", width, mlp),
        fc2(prefix + ".mlp.fc2", mlp, width) {}

  Matrix<T> forward(const Matrix<T>& x, int heads, const RunOptions& opts, Saved* s) const {
    typename LayerNorm<T>::Saved* sn1 = s ? &s->norm1 : nullptr;
    const Matrix<T> h1 = norm1.forward(x, sn1);
    Matrix<T> q = q_proj.forward(h1, opts, s ? &s->q : nullptr);
    Matrix<T> k = k_proj.forward(h1, opts, s ? &s->k : nullptr);
    Matrix<T> v = v_proj.forward(h1, opts, s ? &s->v : nullptr);

    const Eigen::Index n = x.rows();
    const int dh = static_cast<int>(x.cols()) / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Matrix<T> context(n, x.cols());
    if (s) s->probs.resize(heads);
    for (int h = 0; h < heads; ++h) {
      Matrix<T> scores = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
      softmax_rows(scores);
      context.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
      if (s) s->probs[h] = std::move(scores);
    }
    Matrix<T> x1 = x + out_proj.forward(context, opts, s ? &s->out : nullptr);

    const Matrix<T> h2 = norm2.forward(x1, s ? &s->norm2 : nullptr);
    Matrix<T> u = fc1.forward(h2, opts, s ? &s->fc1 : nullptr);
    Matrix<T> g = u.unaryExpr([](T t) { return gelu(t); });
    x1 += fc2.forward(g, opts, s ? &s->fc2 : nullptr);
    if (s) {
      s->queries = std::move(q);
      s->keys = std::move(k);
      s->values = std::move(v);
      s->pre_activation = std::move(u);
    }
    return x1;
  }

  Matrix<T> backward(const Saved& s, const Matrix<T>& grad_out, int heads) {
    // MLP branch.
    Matrix<T> dg = fc2.backward(s.fc2, grad_out, true);
    dg.array() *= s.pre_activation.unaryExpr([](T t) { return gelu_grad(t); }).array();
    const Matrix<T> dh2 = fc1.backward(s.fc1, dg, true);
    Matrix<T> dx1 = grad_out + norm2.backward(s.norm2, dh2);

    // Attention branch.
    const Matrix<T> dcontext = out_proj.backward(s.out, dx1, true);
    const Eigen::Index n = dx1.rows();
    const int width = static_cast<int>(dx1.cols());
    const int dh = width / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Matrix<T> dq(n, width), dk(n, width), dv(n, width);
    for (int h = 0; h < heads; ++h) {
      const Matrix<T>& p = s.probs[h];
      const auto dctx = dcontext.middleCols(h * dh, dh);
      const Matrix<T> dp = dctx * s.values.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = p.transpose() * dctx;
      const ColVector<T> row_dot = (dp.array() * p.array()).rowwise().sum();
      Matrix<T> ds = p.array() * (dp.colwise() - row_dot).array();
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() = ds * s.keys.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * s.queries.middleCols(h * dh, dh);
    }
    Matrix<T> dh1 = q_proj.backward(s.q, dq, true);
    dh1 += k_proj.backward(s.k, dk, true);
    dh1 += v_proj.backward(s.v, dv, true);
    return dx1 + norm1.backward(s.norm1, dh1);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    norm1.collect(out);
    q_proj.collect(out);
    k_proj.collect(out);
    v_proj.collect(out);
    out_proj.collect(out);
    norm2.collect(out);
    fc1.collect(out);
    fc2.collect(out);
  }
};

template <typename T>
class VisionTransformer final : public Backbone<T> {
 public:
  struct Saved : Activations {
    typename Linear<T>::Saved patch;
    std::vector<typename Block<T>::Saved> blocks;
    typename LayerNorm<T>::Saved norm;
  };

  explicit VisionTransformer(BackboneHandle handle)
      : Backbone<T>(std::move(handle)),
        patch_embed_("patch_embed", 3 * this->spec().patch_side() * this->spec().patch_side(),
                     this->spec().width),
        cls_token_("cls_token", 1, this->spec().width),
        register_tokens_("register_tokens", this->spec().register_tokens, this->spec().width),
        pos_embed_("pos_embed", 1 + this->spec().patch_grid, this->spec().width),
        norm_("norm", this->spec().width) {
    const auto& s = this->spec();
    blocks_.reserve(s.depth);
    for (int i = 0; i < s.depth; ++i) {
      blocks_.emplace_back("blocks." + std::to_string(i), s.width, s.mlp_dim);
    }
  }

  void randomize(Rng& rng) {
    init_linear(patch_embed_, rng);
    init_normal(cls_token_, 0.02, rng);
    init_normal(register_tokens_, 0.02, rng);
    init_normal(pos_embed_, 0.02, rng);
    for (auto& b : blocks_) {
      for (Linear<T>* l : {&b.q_proj, &b.k_proj, &b.v_proj, &b.out_proj, &b.fc1, &b.fc2}) {
        init_linear(*l, rng);
      }
    }
  }

  bool has_tokens() const override { return true; }

  Matrix<T> tokens(std::span<const T> image, const RunOptions& opts) const override {
    this->check_image(image);
    return run(image, opts, nullptr);
  }

  RowVector<T> embed(std::span<const T> image, const RunOptions& opts,
                     std::unique_ptr<Activations>* saved) const override {
    this->check_image(image);
    std::unique_ptr<Saved> s;
    if (saved) s = std::make_unique<Saved>();
    const Matrix<T> toks = run(image, opts, s.get());
    RowVector<T> out = embed_tokens(toks, this->spec().embedding_rule, this->spec().register_tokens);
    if (!out.allFinite()) throw NumericError("non-finite embedding from '" + this->spec().name + "'");
    if (saved) *saved = std::move(s);
    return out;
  }

  void backward(const Activations& saved, const RowVector<T>& grad) override {
    const auto& s = static_cast<const Saved&>(saved);
    const auto& spec = this->spec();
    const int d = spec.width;
    const int first_patch = 1 + spec.register_tokens;
    Matrix<T> dtok = Matrix<T>::Zero(spec.token_count(), d);
    dtok.row(0) = grad.head(d);
    if (spec.embedding_rule == EmbeddingRule::kClassPlusMeanPatch) {
      const RowVector<T> share = grad.segment(d, d) / static_cast<T>(spec.patch_grid);
      dtok.middleRows(first_patch, spec.patch_grid).rowwise() = share;
    }
    Matrix<T> dx = norm_.backward(s.norm, dtok);
    for (int i = static_cast<int>(blocks_.size()) - 1; i >= 0; --i) {
      dx = blocks_[i].backward(s.blocks[i], dx, spec.heads);
    }
    if (cls_token_.trainable) cls_token_.grad += dx.row(0);
    if (register_tokens_.trainable && spec.register_tokens > 0) {
      register_tokens_.grad += dx.middleRows(1, spec.register_tokens);
    }
    if (pos_embed_.trainable) {
      pos_embed_.grad.row(0) += dx.row(0);
      pos_embed_.grad.bottomRows(spec.patch_grid) += dx.middleRows(first_patch, spec.patch_grid);
    }
    if (patch_embed_.weight.trainable || patch_embed_.bias.trainable || patch_embed_.lora) {
      patch_embed_.backward(s.patch, dx.middleRows(first_patch, spec.patch_grid), false);
    }
  }

  std::vector<Parameter<T>*> parameters() override {
    std::vector<Parameter<T>*> out;
    patch_embed_.collect(out);
    out.push_back(&cls_token_);
    if (this->spec().register_tokens > 0) out.push_back(&register_tokens_);
    out.push_back(&pos_embed_);
    for (auto& b : blocks_) b.collect(out);
    norm_.collect(out);
    return out;
  }

  std::vector<AdaptableLinear<T>> adaptable_layers() override {
    std::vector<AdaptableLinear<T>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i);
      auto& b = blocks_[i];
      out.push_back({p + ".attn.q_proj", LoraTarget::kQProj, &b.q_proj});
      out.push_back({p + ".attn.k_proj", LoraTarget::kKProj, &b.k_proj});
      out.push_back({p + ".attn.v_proj", LoraTarget::kVProj, &b.v_proj});
      out.push_back({p + ".attn.out_proj", LoraTarget::kOProj, &b.out_proj});
      out.push_back({p + ".mlp.fc1", LoraTarget::kMlpFc1, &b.fc1});
      out.push_back({p + ".mlp.fc2", LoraTarget::kMlpFc2, &b.fc2});
    }
    return out;
  }

  std::unique_ptr<Backbone<T>> clone() const override {
    return std::make_unique<VisionTransformer>(*this);
  }

 private:
  Matrix<T> run(std::span<const T> image, const RunOptions& opts, Saved* s) const {
    const auto& spec = this->spec();
    const int first_patch = 1 + spec.register_tokens;
    const Matrix<T> patches = patchify(image, spec);
    const Matrix<T> embedded = patch_embed_.forward(patches, opts, s ? &s->patch : nullptr);
    Matrix<T> x(spec.token_count(), spec.width);
    x.row(0) = cls_token_.value + pos_embed_.value.row(0);
    if (spec.register_tokens > 0) x.middleRows(1, spec.register_tokens) = register_tokens_.value;
    x.middleRows(first_patch, spec.patch_grid) = embedded + pos_embed_.value.bottomRows(spec.patch_grid);
    if (s) s->blocks.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = blocks_[i].forward(x, spec.heads, opts, s ? &s->blocks[i] : nullptr);
    }
    Matrix<T> out = norm_.forward(x, s ? &s->norm : nullptr);
    if (!all_finite(out)) throw NumericError("non-finite tokens from '" + spec.name + "'");
    return out;
  }

  Linear<T> patch_embed_;
  Parameter<T> cls_token_;
  Parameter<T> register_tokens_;
  Parameter<T> pos_embed_;
  std::vector<Block<T>> blocks_;
  LayerNorm<T> norm_;
};

// ---------------------------------------------------------------------------
// Pooled convolutional extractor: a stride-equals-kernel convolution stem,
// a 1x1 convolution, ReLU after each, then global average pooling.

template <typename T>
class PooledConvNet final : public Backbone<T> {
 public:
  struct Saved : Activations {
    typename Linear<T>::Saved stem, proj;
    Matrix<T> stem_out, proj_out;  // post-activation
  };

  explicit PooledConvNet(BackboneHandle handle)
      : Backbone<T>(std::move(handle)),
        stem_("stem", 3 * this->spec().patch_side() * this->spec().patch_side(), this->spec().mlp_dim),
        proj_("proj", this->spec().mlp_dim, this->spec().width) {}

  void randomize(Rng& rng) {
    init_linear(stem_, rng);
    init_linear(proj_, rng);
  }

  bool has_tokens() const override { return false; }

  Matrix<T> tokens(std::span<const T>, const RunOptions&) const override {
    throw UnsupportedModeError("backbone '" + this->spec().name +
                               "' is convolutional and exposes no token sequence");
  }

  RowVector<T> embed(std::span<const T> image, const RunOptions& opts,
                     std::unique_ptr<Activations>* saved) const override {
    this->check_image(image);
    std::unique_ptr<Saved> s;
    if (saved) s = std::make_unique<Saved>();
    const Matrix<T> patches = patchify(image, this->spec());
    Matrix<T> a = stem_.forward(patches, opts, s ? &s->stem : nullptr).cwiseMax(T(0));
    Matrix<T> b = proj_.forward(a, opts, s ? &s->proj : nullptr).cwiseMax(T(0));
    RowVector<T> out = b.colwise().mean();
    if (!out.allFinite()) throw NumericError("non-finite embedding from '" + this->spec().name + "'");
    if (s) {
      s->stem_out = std::move(a);
      s->proj_out = std::move(b);
      *saved = std::move(s);
    }
    return out;
  }

  void backward(const Activations& saved, const RowVector<T>& grad) override {
    const auto& s = static_cast<const Saved&>(saved);
    const Eigen::Index p = s.proj_out.rows();
    Matrix<T> db(p, grad.size());
    db.rowwise() = grad / static_cast<T>(p);
    db = (s.proj_out.array() > T(0)).select(db, T(0));
    Matrix<T> da = proj_.backward(s.proj, db, true);
    da = (s.stem_out.array() > T(0)).select(da, T(0));
    stem_.backward(s.stem, da, false);
  }

  std::vector<Parameter<T>*> parameters() override {
    std::vector<Parameter<T>*> out;
    stem_.collect(out);
    proj_.collect(out);
    return out;
  }

  std::unique_ptr<Backbone<T>> clone() const override { return std::make_unique<PooledConvNet>(*this); }

 private:
  Linear<T> stem_;
  Linear<T> proj_;
};

template <typename T>
std::unique_ptr<Backbone<T>> construct(BackboneHandle spec) {
  const auto errors = validate(*spec);
  if (!errors.empty()) throw ValidationError("invalid backbone spec '" + spec->name + "': " + errors.front());
  if (spec->architecture == Architecture::kConv) return std::make_unique<PooledConvNet<T>>(std::move(spec));
  return std::make_unique<VisionTransformer<T>>(std::move(spec));
}

// "blocks.3.attn.q_proj.weight" -> 3, else -1.
int block_index(const std::string& name) {
  if (name.rfind("blocks.", 0) != 0) return -1;
  return std::atoi(name.c_str() + 7);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(LoraTarget target) {
  switch (target) {
    case LoraTarget::kQProj: return "q_proj";
    case LoraTarget::kKProj: return "k_proj";
    case LoraTarget::kVProj: return "v_proj";
    case LoraTarget::kOProj: return "o_proj";
    case LoraTarget::kMlpFc1: return "mlp_fc1";
    case LoraTarget::kMlpFc2: return "mlp_fc2";
  }
  return "?";
}

LoraTarget parse_lora_target(std::string_view text) {
  for (auto t : {LoraTarget::kQProj, LoraTarget::kKProj, LoraTarget::kVProj, LoraTarget::kOProj,
                 LoraTarget::kMlpFc1, LoraTarget::kMlpFc2}) {
    if (to_string(t) == text) return t;
  }
  throw ValidationError("unknown LoRA target '" + std::string(text) + "'");
}

bool is_attention_target(LoraTarget target) {
  return target == LoraTarget::kQProj || target == LoraTarget::kKProj ||
         target == LoraTarget::kVProj || target == LoraTarget::kOProj;
}

template <typename T>
Linear<T>::Linear(const std::string& name, int in_features, int out_features)
    : weight(name + ".weight", out_features, in_features), bias(name + ".bias", 1, out_features) {}

template <typename T>
Matrix<T> Linear<T>::forward(const Matrix<T>& x, const RunOptions& opts, Saved* saved) const {
  if (x.cols() != in_features()) {
    throw ShapeError("linear '" + weight.name + "': input width " + std::to_string(x.cols()) +
                     " != " + std::to_string(in_features()));
  }
  Matrix<T> y = x * weight.value.transpose();
  y.rowwise() += bias.value.row(0);
  if (saved) saved->input = x;
  if (lora) {
    Matrix<T> mask;
    const bool drop = opts.training && lora->dropout_p > 0.0;
    if (drop) {
      if (!opts.rng) throw ValidationError("adapter dropout in training mode requires an rng");
      const T keep_scale = T(1) / static_cast<T>(1.0 - lora->dropout_p);
      mask.resize(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = bernoulli(*opts.rng, lora->dropout_p) ? T(0) : keep_scale;
      }
    }
    Matrix<T> dropped = drop ? Matrix<T>(x.cwiseProduct(mask)) : x;
    Matrix<T> down = dropped * lora->a.value.transpose();
    y.noalias() += lora->gamma * (down * lora->b.value.transpose());
    if (saved) {
      saved->dropped = std::move(dropped);
      saved->mask = std::move(mask);
      saved->down = std::move(down);
    }
  }
  return y;
}

template <typename T>
Matrix<T> Linear<T>::backward(const Saved& saved, const Matrix<T>& grad_out, bool want_input_grad) {
  if (weight.trainable) weight.grad.noalias() += grad_out.transpose() * saved.input;
  if (bias.trainable) bias.grad.row(0) += grad_out.colwise().sum();
  Matrix<T> dx;
  if (want_input_grad) dx = grad_out * weight.value;
  if (lora) {
    // d(down) = gamma * grad_out * B, shared by dA and the input gradient.
    const Matrix<T> ddown = lora->gamma * (grad_out * lora->b.value);
    if (lora->b.trainable) lora->b.grad.noalias() += lora->gamma * (grad_out.transpose() * saved.down);
    if (lora->a.trainable) lora->a.grad.noalias() += ddown.transpose() * saved.dropped;
    if (want_input_grad) {
      Matrix<T> dbranch = ddown * lora->a.value;
      if (saved.mask.size() > 0) dbranch.array() *= saved.mask.array();
      dx += dbranch;
    }
  }
  return dx;
}

template <typename T>
void Linear<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
  if (lora) {
    out.push_back(&lora->a);
    out.push_back(&lora->b);
  }
}

template <typename T>
LayerNorm<T>::LayerNorm(const std::string& name, int width)
    : weight(name + ".weight", 1, width), bias(name + ".bias", 1, width) {
  weight.value.setOnes();
}

template <typename T>
Matrix<T> LayerNorm<T>::forward(const Matrix<T>& x, Saved* saved) const {
  const Eigen::Index d = x.cols();
  ColVector<T> mean = x.rowwise().mean();
  Matrix<T> centered = x.colwise() - mean;
  ColVector<T> var = centered.rowwise().squaredNorm() / static_cast<T>(d);
  ColVector<T> inv_std = (var.array() + eps).rsqrt();
  Matrix<T> normalized = centered.array().colwise() * inv_std.array();
  Matrix<T> y = normalized.array().rowwise() * weight.value.row(0).array();
  y.rowwise() += bias.value.row(0);
  if (saved) {
    saved->normalized = std::move(normalized);
    saved->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Matrix<T> LayerNorm<T>::backward(const Saved& s, const Matrix<T>& grad_out) {
  if (weight.trainable) weight.grad.row(0) += (grad_out.array() * s.normalized.array()).colwise().sum().matrix();
  if (bias.trainable) bias.grad.row(0) += grad_out.colwise().sum();
  const T d = static_cast<T>(grad_out.cols());
  Matrix<T> dxhat = grad_out.array().rowwise() * weight.value.row(0).array();
  const ColVector<T> mean_dxhat = dxhat.rowwise().sum() / d;
  const ColVector<T> mean_dxhat_xhat = (dxhat.array() * s.normalized.array()).rowwise().sum().matrix() / d;
  Matrix<T> dx = dxhat.colwise() - mean_dxhat;
  dx -= (s.normalized.array().colwise() * mean_dxhat_xhat.array()).matrix();
  return dx.array().colwise() * s.inv_std.array();
}

template <typename T>
void LayerNorm<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
std::vector<const Parameter<T>*> Backbone<T>::parameters() const {
  auto params = const_cast<Backbone<T>*>(this)->parameters();
  return {params.begin(), params.end()};
}

template <typename T>
void Backbone<T>::set_trainable(bool trainable) {
  for (auto* p : parameters()) p->trainable = trainable;
}

template <typename T>
void Backbone<T>::check_image(std::span<const T> image) const {
  const std::size_t expected = 3ull * spec().input_size * spec().input_size;
  if (image.size() != expected) {
    throw ShapeError("image has " + std::to_string(image.size()) + " values; backbone '" + spec().name +
                     "' expects 3x" + std::to_string(spec().input_size) + "x" +
                     std::to_string(spec().input_size));
  }
}

template <typename T>
static void check_batch(const Backbone<T>& backbone, const ImageBatch<T>& images) {
  const int s = backbone.spec().input_size;
  if (images.channels != 3 || images.height != s || images.width != s) {
    throw ShapeError("batch of " + std::to_string(images.channels) + "x" + std::to_string(images.height) +
                     "x" + std::to_string(images.width) + " images; backbone '" + backbone.spec().name +
                     "' expects 3x" + std::to_string(s) + "x" + std::to_string(s));
  }
  if (images.data.size() != static_cast<std::size_t>(images.batch) * 3 * s * s) {
    throw ShapeError("image batch payload size does not match its declared shape");
  }
}

template <typename T>
std::vector<Matrix<T>> forward_tokens(const Backbone<T>& backbone, const ImageBatch<T>& images) {
  check_batch(backbone, images);
  std::vector<Matrix<T>> out;
  out.reserve(images.batch);
  for (int i = 0; i < images.batch; ++i) out.push_back(backbone.tokens(images.image(i), {}));
  return out;
}

template <typename T>
Matrix<T> embed(const Backbone<T>& backbone, const ImageBatch<T>& images) {
  check_batch(backbone, images);
  Matrix<T> out(images.batch, backbone.spec().feature_dim);
  for (int i = 0; i < images.batch; ++i) out.row(i) = backbone.embed(images.image(i), {}, nullptr);
  return out;
}

template <typename T>
RowVector<T> embed_tokens(const Matrix<T>& tokens, EmbeddingRule rule, int register_tokens) {
  const Eigen::Index d = tokens.cols();
  if (rule == EmbeddingRule::kClassToken) return tokens.row(0);
  const Eigen::Index first_patch = 1 + register_tokens;
  const Eigen::Index patches = tokens.rows() - first_patch;
  if (patches < 1) throw ShapeError("token sequence has no patch tokens");
  RowVector<T> out(2 * d);
  out.head(d) = tokens.row(0);
  out.tail(d) = tokens.middleRows(first_patch, patches).colwise().mean();
  return out;
}

template <typename T>
std::unique_ptr<Backbone<T>> make_backbone(BackboneHandle spec, std::uint64_t seed) {
  auto model = construct<T>(spec);
  Rng rng(seed);
  if (auto* vit = dynamic_cast<VisionTransformer<T>*>(model.get())) vit->randomize(rng);
  if (auto* conv = dynamic_cast<PooledConvNet<T>*>(model.get())) conv->randomize(rng);
  model->set_trainable(false);
  return model;
}

template <typename T>
std::unique_ptr<Backbone<T>> load_weights(BackboneHandle spec, const TensorArchive& archive) {
  auto model = construct<T>(spec);
  std::map<std::string, const ArchiveTensor*> by_canonical;
  for (const auto& [name, tensor] : archive.tensors) {
    auto it = spec->name_map.find(name);
    by_canonical[it == spec->name_map.end() ? name : it->second] = &tensor;
  }
  auto params = model->parameters();
  for (auto* p : params) {
    auto it = by_canonical.find(p->name);
    if (it == by_canonical.end()) {
      const int b = block_index(p->name);
      std::string msg = "weights for '" + spec->name + "' are missing tensor '" + p->name + "'";
      if (b >= 0) msg += " (block " + std::to_string(b) + " absent)";
      throw ValidationError(msg);
    }
    const ArchiveTensor& t = *it->second;
    std::vector<std::int64_t> want{p->value.rows(), p->value.cols()};
    std::vector<std::int64_t> have = t.shape;
    if (have.size() == 1) have.insert(have.begin(), 1);
    if (have != want) {
      auto fmt = [](const std::vector<std::int64_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
        return out + "]";
      };
      throw ShapeError("tensor '" + p->name + "' has shape " + fmt(t.shape) + ", expected " + fmt(want));
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) p->value.data()[i] = static_cast<T>(t.data[i]);
    by_canonical.erase(it);
  }
  if (!by_canonical.empty()) {
    throw ValidationError("weights for '" + spec->name + "' contain unexpected tensor '" +
                          by_canonical.begin()->first + "'");
  }
  model->set_trainable(false);
  return model;
}

template <typename T>
std::unique_ptr<Backbone<T>> load_weights(BackboneHandle spec, const std::string& source) {
  if (source.rfind("seed:", 0) == 0) {
    return make_backbone<T>(std::move(spec), std::stoull(source.substr(5)));
  }
  if (source.empty()) throw ValidationError("no weights supplied for backbone '" + spec->name + "'");
  if (!std::filesystem::exists(source)) {
    throw ValidationError("weights for backbone '" + spec->name + "' not found at '" + source + "'");
  }
  return load_weights<T>(std::move(spec), TensorArchive::read(source));
}

template <typename T>
TensorArchive save_weights(const Backbone<T>& backbone) {
  TensorArchive archive;
  archive.metadata["backbone"] = backbone.spec().name;
  for (const auto* p : backbone.parameters()) {
    ArchiveTensor t;
    t.shape = {p->value.rows(), p->value.cols()};
    t.data.resize(static_cast<std::size_t>(p->value.size()));
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(p->value.data()[i]);
    archive.tensors.emplace(p->name, std::move(t));
  }
  return archive;
}

template <typename T>
std::uint64_t parameter_checksum(const std::vector<const Parameter<T>*>& params) {
  Fnv1a64 h;
  for (const auto* p : params) {
    h.update(p->name);
    h.update(std::as_bytes(std::span<const T>(p->value.data(), static_cast<std::size_t>(p->value.size()))));
  }
  return h.digest();
}

template <typename To, typename From>
std::unique_ptr<Backbone<To>> convert_backbone(const Backbone<From>& backbone) {
  auto out = construct<To>(backbone.handle());
  auto dst = out->parameters();
  auto src = backbone.parameters();
  if (dst.size() != src.size()) {
    throw ValidationError("convert_backbone: adapters must be merged or removed before conversion");
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<To>();
    dst[i]->grad.setZero(dst[i]->value.rows(), dst[i]->value.cols());
    dst[i]->trainable = src[i]->trainable;
  }
  return out;
}

#define MITOBENCH_INSTANTIATE(T)                                                                     \
  template class Linear<T>;                                                                          \
  template class LayerNorm<T>;                                                                       \
  template class Backbone<T>;                                                                        \
  template std::vector<Matrix<T>> forward_tokens(const Backbone<T>&, const ImageBatch<T>&);         \
  template Matrix<T> embed(const Backbone<T>&, const ImageBatch<T>&);                               \
  template RowVector<T> embed_tokens(const Matrix<T>&, EmbeddingRule, int);                         \
  template std::unique_ptr<Backbone<T>> make_backbone<T>(BackboneHandle, std::uint64_t);            \
  template std::unique_ptr<Backbone<T>> load_weights<T>(BackboneHandle, const TensorArchive&);      \
  template std::unique_ptr<Backbone<T>> load_weights<T>(BackboneHandle, const std::string&);        \
  template TensorArchive save_weights(const Backbone<T>&);                                           \
  template std::uint64_t parameter_checksum(const std::vector<const Parameter<T>*>&);

MITOBENCH_INSTANTIATE(float)
MITOBENCH_INSTANTIATE(double)
#undef MITOBENCH_INSTANTIATE

template std::unique_ptr<Backbone<double>> convert_backbone<double, float>(const Backbone<float>&);
template std::unique_ptr<Backbone<float>> convert_backbone<float, double>(const Backbone<double>&);

}  // namespace mitobench
