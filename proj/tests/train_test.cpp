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

#include <gtest/gtest.h>

#include <cmath>

#include "mitobench/errors.hpp"
#include "mitobench/splits.hpp"
#include "mitobench/synthetic.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace mitobench {
namespace {

using testing::reference_lr;

TEST(TrainConfig, DefaultsGiveEightThousandSteps) {
  const TrainConfig c;
  EXPECT_EQ(c.batch_size, 16);
  EXPECT_EQ(c.epoch_length, 1280);
  EXPECT_EQ(c.pseudo_epochs, 100);
  EXPECT_EQ(c.steps_per_epoch(), 80);
  EXPECT_EQ(c.total_steps(), 8000);
  EXPECT_DOUBLE_EQ(c.max_lr, 1e-4);
  EXPECT_DOUBLE_EQ(c.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.eps, 1e-8);
  EXPECT_TRUE(validate(c).empty());
}

TEST(TrainConfig, ValidationRejectsBadValues) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_FALSE(validate(c).empty());
  c = {};
  c.max_lr = -1;
  EXPECT_FALSE(validate(c).empty());
  c = {};
  c.epoch_length = 8;
  EXPECT_FALSE(validate(c).empty());
  SamplerPolicy s{0.5, 0.5, 0.5};
  EXPECT_FALSE(validate(s).empty());
  EXPECT_TRUE(validate(SamplerPolicy{}).empty());
}

TEST(OneCycle, AnchorsAreExact) {
  EXPECT_EQ(one_cycle_lr(0, 8000, 1e-4), 1e-4 / 25.0);
  EXPECT_EQ(one_cycle_lr(2400, 8000, 1e-4), 1e-4);
  EXPECT_EQ(one_cycle_lr(7999, 8000, 1e-4), 1e-4 / 1e4);
  EXPECT_NEAR(one_cycle_lr(0, 8000, 1e-4), 4e-6, 1e-20);
  EXPECT_NEAR(one_cycle_lr(7999, 8000, 1e-4), 1e-8, 1e-22);
}

TEST(OneCycle, MatchesReferencePointwise) {
  const OneCyclePolicy p;
  for (std::int64_t total : {2, 3, 10, 97, 8000}) {
    for (std::int64_t s = 0; s < total; ++s) {
      ASSERT_EQ(one_cycle_lr(s, total, 1e-4, p), reference_lr(s, total, 1e-4, p.pct_start, p.div_factor, p.final_div)) << total << ":" << s;
    }
  }
}

TEST(OneCycle, RisesThenFalls) {
  double prev = 0.0;
  for (std::int64_t s = 0; s <= 2400; ++s) {
    const double lr = one_cycle_lr(s, 8000, 1e-4);
    ASSERT_GE(lr, prev);
    prev = lr;
  }
  for (std::int64_t s = 2401; s < 8000; ++s) {
    const double lr = one_cycle_lr(s, 8000, 1e-4);
    ASSERT_LE(lr, prev);
    ASSERT_LE(lr, 1e-4);
    prev = lr;
  }
  EXPECT_THROW(one_cycle_lr(8000, 8000, 1e-4), ValidationError);
  EXPECT_THROW(one_cycle_lr(-1, 8000, 1e-4), ValidationError);
}

TEST(Loss, KnownValues) {
  Matrix<double> zero = Matrix<double>::Zero(1, 2);
  EXPECT_NEAR(bce_loss(zero, std::vector<int>{1}).loss, std::log(2.0), 1e-15);
  Matrix<double> single(1, 1);
  single << std::log(3.0);
  EXPECT_NEAR(bce_loss(single, std::vector<int>{1}, LogitMode::kSingleLogitSigmoid).loss, std::log(4.0 / 3.0), 1e-15);
}

TEST(Loss, TwoLogitAgreesWithSingleLogit) {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    Matrix<double> two(4, 2), one(4, 1);
    std::vector<int> y(4);
    for (int i = 0; i < 4; ++i) {
      two(i, 0) = 10 * standard_normal(rng);
      two(i, 1) = 10 * standard_normal(rng);
      one(i, 0) = two(i, 1) - two(i, 0);
      y[i] = bernoulli(rng, 0.5);
    }
    const auto a = bce_loss(two, y), b = bce_loss(one, y, LogitMode::kSingleLogitSigmoid);
    EXPECT_NEAR(a.loss, b.loss, 1e-9);
    for (int i = 0; i < 4; ++i) {
      EXPECT_NEAR(a.grad(i, 1), b.grad(i, 0), 1e-12);
      EXPECT_NEAR(a.grad(i, 0), -b.grad(i, 0), 1e-12);
    }
  }
}

TEST(Loss, GradientMatchesFiniteDifference) {
  Rng rng(2);
  Matrix<double> z(3, 2);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = standard_normal(rng);
  const std::vector<int> y{1, 0, 1};
  const auto r = bce_loss(z, y);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    auto up = z, down = z;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    EXPECT_NEAR(r.grad.data()[i], (bce_loss(up, y).loss - bce_loss(down, y).loss) / 2e-6, 1e-8);
  }
}

TEST(Loss, StableForExtremeLogits) {
  Matrix<double> z(2, 2);
  z << 1000, -1000, -800, 900;
  const auto r = bce_loss(z, std::vector<int>{1, 1});
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 1000.0, 1e-9);
  Matrix<double> s(2, 1);
  s << 1000, -1000;
  EXPECT_NEAR(bce_loss(s, std::vector<int>{0, 1}, LogitMode::kSingleLogitSigmoid).loss, 1000.0, 1e-9);
  EXPECT_THROW(bce_loss(z, std::vector<int>{1}), ShapeError);
}

SyntheticDataset dataset(int cases, int per_case, std::uint64_t seed, int size = 224) {
  SyntheticOptions o;
  o.cases_per_domain = cases;
  o.annotations_per_case = per_case;
  o.image_size = size;
  o.seed = seed;
  return make_synthetic_dataset(o);
}

TEST(Sampler, SourceFrequenciesFollowPolicy) {
  const auto ds = dataset(2, 10, 3, 256);
  PatchSpec patch;
  PatchSampler sampler(*ds.store, ds.manifest.records, patch, SamplerPolicy{});
  Rng rng(4);
  const int n = 12800;
  std::array<int, 3> counts{};
  for (int i = 0; i < n; ++i) ++counts[static_cast<int>(sampler.draw_source(rng))];
  const std::array<double, 3> p{0.5, 0.25, 0.25};
  for (int k = 0; k < 3; ++k) {
    const double sigma = std::sqrt(p[k] * (1 - p[k]) / n);
    EXPECT_LE(std::abs(counts[k] / static_cast<double>(n) - p[k]), 3 * sigma) << k;
  }
}

TEST(Sampler, DrawsCarryConsistentLabels) {
  const auto ds = dataset(2, 10, 3, 256);
  PatchSpec patch;
  PatchSampler sampler(*ds.store, ds.manifest.records, patch, SamplerPolicy{});
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto d = sampler.draw(rng);
    switch (d.source) {
      case SampleSource::kMitotic: EXPECT_EQ(d.label, 1); break;
      case SampleSource::kHardNegative: EXPECT_EQ(d.label, 0); break;
      case SampleSource::kRandom:
        EXPECT_EQ(d.label, 0);
        EXPECT_TRUE(d.patch.has_value());
        break;
    }
    if (d.source != SampleSource::kRandom) EXPECT_EQ(binary_label(ds.manifest.record(d.record.annotation_id).label), d.label);
  }
  const auto batch = sampler.next_batch(16, rng, nullptr);
  ASSERT_EQ(batch.size(), 16u);
  for (const auto& s : batch) EXPECT_EQ(s.image.size(), 3u * 224 * 224);
}

TEST(Sampler, MissingHardNegativesMoveToRandomPatches) {
  const auto ds = dataset(2, 10, 3, 256);
  std::vector<AnnotationRecord> mitotic;
  for (const auto& r : ds.manifest.records) {
    if (r.label == Label::kMitoticFigure) mitotic.push_back(r);
  }
  PatchSpec patch;
  PatchSampler sampler(*ds.store, mitotic, patch, SamplerPolicy{});
  EXPECT_DOUBLE_EQ(sampler.effective_policy().p_hard_negative, 0.0);
  EXPECT_DOUBLE_EQ(sampler.effective_policy().p_random, 0.5);
  std::vector<AnnotationRecord> negatives;
  for (const auto& r : ds.manifest.records) {
    if (r.label == Label::kHardNegative) negatives.push_back(r);
  }
  EXPECT_THROW(PatchSampler(*ds.store, negatives, patch, SamplerPolicy{}), ValidationError);
}

TEST(Sampler, SameSeedSameSequence) {
  const auto ds = dataset(2, 6, 3, 256);
  PatchSpec patch;
  PatchSampler sampler(*ds.store, ds.manifest.records, patch, SamplerPolicy{});
  Rng a(9), b(9);
  const auto x = sampler.next_batch(8, a, nullptr), y = sampler.next_batch(8, b, nullptr);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(x[i].image, y[i].image);
    EXPECT_EQ(x[i].annotation_id, y[i].annotation_id);
  }
}

TEST(Adam, FirstStepsMatchBiasCorrectedUpdate) {
  Parameter<double> p("w", 1, 3);
  p.value << 1.0, -2.0, 0.5;
  p.trainable = true;
  Adam<double> adam({&p}, 0.9, 0.999, 1e-8);
  Matrix<double> m = Matrix<double>::Zero(1, 3), v = Matrix<double>::Zero(1, 3), w = p.value;
  const std::vector<Matrix<double>> grads{(Matrix<double>(1, 3) << 0.3, -1.0, 2.0).finished(),
                                          (Matrix<double>(1, 3) << -0.1, 0.5, 0.0).finished()};
  for (int t = 1; t <= 2; ++t) {
    p.grad = grads[t - 1];
    adam.step(1e-2);
    m = 0.9 * m + 0.1 * grads[t - 1];
    v = 0.999 * v + 0.001 * grads[t - 1].cwiseProduct(grads[t - 1]);
    const Matrix<double> mhat = m / (1 - std::pow(0.9, t));
    const Matrix<double> vhat = v / (1 - std::pow(0.999, t));
    w = w.array() - 1e-2 * mhat.array() / (vhat.array().sqrt() + 1e-8);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.value(0, i), w(0, i), 1e-14);
  }
  EXPECT_EQ(adam.steps(), 2);
}

TEST(FeatureCache, KeyChangeClearsEntries) {
  FeatureCache cache;
  const auto reg = BackboneRegistry::builtin();
  const auto spec = reg.find("toy-vit");
  const PatchSpec patch = PatchSpec::for_backbone(*spec);
  const auto k1 = FeatureCache::make_key(*spec, 1, patch);
  EXPECT_NE(k1, FeatureCache::make_key(*spec, 2, patch));
  cache.bind(k1);
  cache.insert("a", {1.0, 2.0});
  ASSERT_NE(cache.find("a"), nullptr);
  cache.bind(k1);
  EXPECT_EQ(cache.size(), 1u);
  cache.bind(FeatureCache::make_key(*spec, 2, patch));
  EXPECT_EQ(cache.size(), 0u);
  EXPECT_EQ(cache.find("a"), nullptr);
}

TEST(FeatureCache, CachedEmbeddingsMatchDirectComputation) {
  const auto ds = dataset(1, 4, 6);
  const auto reg = BackboneRegistry::builtin();
  const auto spec = reg.find("toy-vit");
  const auto bb = load_weights<float>(spec, spec->weights_source);
  const PatchSpec patch = PatchSpec::for_backbone(*spec);
  FeatureCache cache;
  const auto first = cached_embeddings(*bb, *ds.store, ds.manifest.records, patch, cache);
  EXPECT_EQ(cache.size(), 4u);
  const auto again = cached_embeddings(*bb, *ds.store, ds.manifest.records, patch, cache);
  EXPECT_EQ(first, again);
  const auto image = normalize(extract_patch(*ds.store, ds.manifest.records[2], patch).patch, patch);
  EXPECT_LT((bb->embed(image, {}, nullptr) - first.row(2)).cwiseAbs().maxCoeff(), 1e-6);
}

struct Fixture {
  SyntheticDataset ds = dataset(6, 12, 11);
  BackboneRegistry reg = BackboneRegistry::builtin();
  BackboneHandle spec = reg.find("toy-vit");
  TrainData data;

  Fixture() {
    const auto plan = make_scaling_plan(ds.manifest, {.test_fraction = 0.2, .folds = {1, 0.2, false}, .fractions = {1.0}}, 3);
    data.store = ds.store.get();
    data.train = records_of_cases(ds.manifest, plan.folds[0].train_cases);
    data.validation = records_of_cases(ds.manifest, plan.folds[0].val_cases);
    data.patch = PatchSpec::for_backbone(*spec);
  }

  AdaptedModel<float> model(AdaptMode mode) {
    LoraConfig lora;
    lora.rank = 4;
    lora.seed = 2;
    return build_model(load_weights<float>(spec, spec->weights_source), mode, lora, true, 5);
  }

  static TrainConfig config(int epochs, int steps, double lr) {
    TrainConfig c;
    c.pseudo_epochs = epochs;
    c.batch_size = 8;
    c.epoch_length = 8 * steps;
    c.max_lr = lr;
    c.seed = 7;
    c.sampler = {0.5, 0.5, 0.0};
    c.augment_policy = AugmentPolicy::identity();
    c.augment_policy.p_hflip = c.augment_policy.p_vflip = 0.5;
    return c;
  }
};

TEST(Train, TraceFollowsScheduleAndIsDeterministic) {
  Fixture f;
  auto a = f.model(AdaptMode::kLora);
  auto b = f.model(AdaptMode::kLora);
  const auto cfg = Fixture::config(3, 4, 1e-4);
  const auto ra = train(a, f.data, cfg);
  const auto rb = train(b, f.data, cfg);
  ASSERT_EQ(ra.trace.size(), 12u);
  EXPECT_EQ(ra.steps, 12);
  for (const auto& t : ra.trace) EXPECT_EQ(t.lr, reference_lr(t.step, 12, 1e-4));
  EXPECT_EQ(trace_digest(ra.trace), trace_digest(rb.trace));
  EXPECT_EQ(trace_jsonl(ra.trace), trace_jsonl(rb.trace));
  EXPECT_EQ(ra.epochs.size(), 3u);
}

TEST(Train, LoraLeavesBaseWeightsUntouched) {
  Fixture f;
  auto m = f.model(AdaptMode::kLora);
  const auto before = parameter_checksum(m.frozen_parameters());
  train(m, f.data, Fixture::config(2, 3, 1e-3));
  EXPECT_EQ(parameter_checksum(m.frozen_parameters()), before);
  bool moved = false;
  for (auto& [path, layer] : m.adapters()) moved |= !layer->b.value.isZero(0);
  EXPECT_TRUE(moved);
}

TEST(Train, KeepsTheMinimumValidationCheckpoint) {
  Fixture f;
  auto m = f.model(AdaptMode::kLora);
  const auto r = train(m, f.data, Fixture::config(4, 3, 3e-3));
  double lowest = std::numeric_limits<double>::infinity();
  int lowest_epoch = 0;
  for (const auto& e : r.epochs) {
    if (e.validation_loss < lowest) {
      lowest = e.validation_loss;
      lowest_epoch = e.epoch;
    }
  }
  EXPECT_EQ(r.best.epoch, lowest_epoch);
  EXPECT_EQ(*r.best.validation_loss, lowest);
  const auto [vloss, metrics] = validation_pass(m, *f.data.store, f.data.validation, f.data.patch);
  EXPECT_NEAR(vloss, lowest, 1e-9);
}

TEST(Train, ProbeLossDecreases) {
  Fixture f;
  auto m = f.model(AdaptMode::kLinearProbe);
  FeatureCache cache;
  auto cfg = Fixture::config(10, 10, 1e-2);
  const auto r = train(m, f.data, cfg, &cache);
  ASSERT_TRUE(r.initial_validation_loss.has_value());
  EXPECT_LT(*r.best.validation_loss, *r.initial_validation_loss);
  double early = 0, late = 0;
  for (int i = 0; i < 10; ++i) {
    early += r.trace[i].loss;
    late += r.trace[r.trace.size() - 1 - i].loss;
  }
  EXPECT_LT(late, early);
  EXPECT_GT(cache.size(), 0u);
}

TEST(Train, SelectionNeedsValidation) {
  Fixture f;
  auto m = f.model(AdaptMode::kLora);
  auto data = f.data;
  data.validation.clear();
  EXPECT_THROW(train(m, data, Fixture::config(1, 1, 1e-4)), ValidationError);
  auto cfg = Fixture::config(1, 2, 1e-4);
  cfg.select_best = false;
  const auto r = train(m, data, cfg);
  EXPECT_FALSE(r.best.validation_loss.has_value());
  EXPECT_EQ(r.best.epoch, 1);
}

TEST(Train, DivergenceKeepsTheTrace) {
  Fixture f;
  auto m = f.model(AdaptMode::kFullFinetune);
  auto cfg = Fixture::config(3, 4, 1e30);
  try {
    train(m, f.data, cfg);
    ADD_FAILURE() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_FALSE(e.trace().empty());
  } catch (const NumericError&) {
  }
}

TEST(Checkpoint, CaptureRestoreIsBitExact) {
  Fixture f;
  auto m = f.model(AdaptMode::kLora);
  const auto cp = capture(m, 3, 0.5);
  for (auto* p : m.trainable_parameters()) p->value.array() += 1.0f;
  restore(m, cp);
  const auto again = capture(m, 3, 0.5);
  ASSERT_EQ(cp.values.size(), again.values.size());
  for (std::size_t i = 0; i < cp.values.size(); ++i) EXPECT_EQ(cp.values[i], again.values[i]);
}

TEST(Checkpoint, ArchiveRebuildsTheModel) {
  Fixture f;
  auto m = f.model(AdaptMode::kLora);
  train(m, f.data, Fixture::config(1, 2, 1e-3));
  CheckpointMeta meta;
  meta.model = "toy-vit";
  meta.weights_source = f.spec->weights_source;
  meta.mode = AdaptMode::kLora;
  meta.lora = m.lora_config();
  meta.epoch = 1;
  meta.validation_loss = 0.25;
  meta.seed = 5;
  meta.config_json = "{}";
  meta.trace_digest = 42;
  const auto archive = TensorArchive::deserialize(make_checkpoint_archive(m, meta).serialize());
  const auto back = read_checkpoint_meta(archive);
  EXPECT_EQ(back.model, "toy-vit");
  EXPECT_EQ(back.mode, AdaptMode::kLora);
  EXPECT_EQ(back.validation_loss, 0.25);
  EXPECT_EQ(back.trace_digest, 42u);
  const auto rebuilt = model_from_checkpoint<float>(archive, f.reg);
  const auto image = normalize(extract_patch(*f.ds.store, f.data.train[0], f.data.patch).patch, f.data.patch);
  EXPECT_EQ(rebuilt.logits(image, {}, nullptr), m.logits(image, {}, nullptr));
}

}  // namespace
}  // namespace mitobench
