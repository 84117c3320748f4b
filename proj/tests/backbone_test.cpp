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

#include <algorithm>
#include <gtest/gtest.h>

#include "mitobench/errors.hpp"
#include "mitobench/network.hpp"
#include "mitobench/tensor_archive.hpp"
#include "support.hpp"

namespace mitobench {
namespace {

using testing::random_image;
using testing::small_vit;

TEST(Registry, FoundationModelWidthsMatchPublishedTable) {
  const auto reg = BackboneRegistry::builtin();
  const std::vector<std::pair<std::string, int>> widths{
      {"phikon", 768}, {"uni", 1024}, {"virchow", 1280}, {"virchow2", 1280}, {"h-optimus-0", 1536}, {"prov-gigapath", 1536}};
  for (const auto& [name, width] : widths) {
    SCOPED_TRACE(name);
    const auto spec = reg.find(name);
    EXPECT_EQ(spec->width, width);
    EXPECT_TRUE(validate(*spec).empty());
    EXPECT_TRUE(spec->weights_source.empty());
  }
}

TEST(Registry, VirchowFamilyConcatenatesClassAndPatchMean) {
  const auto reg = BackboneRegistry::builtin();
  for (const char* name : {"virchow", "virchow2"}) {
    const auto spec = reg.find(name);
    EXPECT_EQ(spec->embedding_rule, EmbeddingRule::kClassPlusMeanPatch);
    EXPECT_EQ(spec->patch_grid, 256);
    EXPECT_EQ(spec->feature_dim, 2560);
  }
  for (const char* name : {"phikon", "uni", "h-optimus-0", "prov-gigapath"}) {
    const auto spec = reg.find(name);
    EXPECT_EQ(spec->embedding_rule, EmbeddingRule::kClassToken);
    EXPECT_EQ(spec->feature_dim, spec->width);
  }
}

TEST(Registry, ToyFamilyIsSeeded) {
  const auto reg = BackboneRegistry::builtin();
  for (const auto& name : {"toy-vit", "toy-vit-cm", "toy-vit-l", "toy-conv"}) {
    EXPECT_EQ(reg.find(name)->weights_source.rfind("seed:", 0), 0u) << name;
  }
  EXPECT_THROW(reg.find("no-such-model"), ValidationError);
}

TEST(Registry, RejectsDuplicatesAndIndivisibleHeads) {
  BackboneRegistry reg;
  BackboneSpec s = *small_vit("a", 1, 32, 4, 64, 4, 16);
  reg.register_backbone(s);
  EXPECT_THROW(reg.register_backbone(s), ValidationError);
  s.name = "b";
  s.width = 30;
  s.feature_dim = 30;
  EXPECT_FALSE(validate(s).empty());
  EXPECT_THROW(reg.register_backbone(s), ValidationError);
}

TEST(Registry, RejectsNonSquareGridAndWrongFeatureDim) {
  BackboneSpec s = *small_vit("a", 1, 32, 4, 64, 4, 16);
  s.patch_grid = 5;
  EXPECT_FALSE(validate(s).empty());
  s = *small_vit("a", 1, 32, 4, 64, 4, 16);
  s.feature_dim = 33;
  EXPECT_FALSE(validate(s).empty());
}

TEST(Backbone, TokenShapeCountsClassRegistersAndPatches) {
  const auto spec = small_vit("t", 2, 32, 4, 64, 4, 16);
  const auto bb = make_backbone<float>(spec, 3);
  ImageBatch<float> batch{3, 3, 16, 16, {}};
  Rng rng(1);
  for (int i = 0; i < 3; ++i) {
    auto img = random_image<float>(*spec, rng);
    batch.data.insert(batch.data.end(), img.begin(), img.end());
  }
  const auto tokens = forward_tokens(*bb, batch);
  ASSERT_EQ(tokens.size(), 3u);
  for (const auto& t : tokens) {
    EXPECT_EQ(t.rows(), 5);
    EXPECT_EQ(t.cols(), 32);
    EXPECT_TRUE(t.allFinite());
  }
  const auto reg_spec = small_vit("r", 1, 32, 4, 64, 4, 16, EmbeddingRule::kClassToken, 2);
  const auto with_regs = make_backbone<float>(reg_spec, 3);
  EXPECT_EQ(forward_tokens(*with_regs, batch)[0].rows(), 7);
}

TEST(Backbone, RejectsWrongImageGeometry) {
  const auto spec = small_vit("t", 1, 16, 2, 32, 4, 16);
  const auto bb = make_backbone<float>(spec, 3);
  ImageBatch<float> batch{1, 3, 12, 12, std::vector<float>(3 * 12 * 12, 0.0f)};
  EXPECT_THROW(forward_tokens(*bb, batch), ShapeError);
  std::vector<float> short_image(10, 0.0f);
  EXPECT_THROW(bb->embed(short_image, {}, nullptr), ShapeError);
}

TEST(Backbone, EmbeddingRulesProduceDocumentedWidths) {
  Rng rng(2);
  const auto cls = small_vit("c", 1, 16, 2, 32, 4, 16);
  const auto cm = small_vit("m", 1, 16, 2, 32, 4, 16, EmbeddingRule::kClassPlusMeanPatch, 1);
  const auto img = random_image<float>(*cls, rng);
  EXPECT_EQ(make_backbone<float>(cls, 1)->embed(img, {}, nullptr).cols(), 16);
  EXPECT_EQ(make_backbone<float>(cm, 1)->embed(img, {}, nullptr).cols(), 32);
}

TEST(Backbone, ClassPlusMeanEmbeddingIsClassThenPatchMean) {
  Rng rng(3);
  const auto spec = small_vit("m", 1, 16, 2, 32, 4, 16, EmbeddingRule::kClassPlusMeanPatch, 2);
  const auto bb = make_backbone<double>(spec, 5);
  const auto img = random_image<double>(*spec, rng);
  const auto tokens = bb->tokens(img, {});
  const auto z = bb->embed(img, {}, nullptr);
  ASSERT_EQ(tokens.rows(), 7);
  RowVector<double> mean = tokens.bottomRows(4).colwise().mean();
  for (int c = 0; c < 16; ++c) {
    EXPECT_NEAR(z(c), tokens(0, c), 1e-12);
    EXPECT_NEAR(z(16 + c), mean(c), 1e-12);
  }
}

TEST(EmbedTokens, RegistersNeverEnterTheMean) {
  Matrix<double> tokens(5, 2);
  tokens << 1, 2,  // class
      100, 100,    // register
      1, 1,        //
      3, 5,        //
      5, 0;
  const auto z = embed_tokens(tokens, EmbeddingRule::kClassPlusMeanPatch, 1);
  ASSERT_EQ(z.cols(), 4);
  EXPECT_DOUBLE_EQ(z(0), 1);
  EXPECT_DOUBLE_EQ(z(1), 2);
  EXPECT_DOUBLE_EQ(z(2), 3);
  EXPECT_DOUBLE_EQ(z(3), 2);
  const auto c = embed_tokens(tokens, EmbeddingRule::kClassToken, 1);
  ASSERT_EQ(c.cols(), 2);
  EXPECT_DOUBLE_EQ(c(1), 2);
}

TEST(Backbone, SameSeedSameWeightsDifferentSeedDifferentWeights) {
  const auto spec = small_vit("t", 2, 16, 2, 32, 4, 16);
  const auto a = make_backbone<float>(spec, 9);
  const auto b = make_backbone<float>(spec, 9);
  const auto c = make_backbone<float>(spec, 10);
  EXPECT_EQ(parameter_checksum(std::as_const(*a).parameters()), parameter_checksum(std::as_const(*b).parameters()));
  EXPECT_NE(parameter_checksum(std::as_const(*a).parameters()), parameter_checksum(std::as_const(*c).parameters()));
  Rng rng(4);
  const auto img = random_image<float>(*spec, rng);
  EXPECT_EQ(a->embed(img, {}, nullptr), b->embed(img, {}, nullptr));
}

TEST(Backbone, FreshBackboneIsFrozen) {
  const auto bb = make_backbone<float>(small_vit("t", 1, 16, 2, 32, 4, 16), 1);
  for (const auto* p : std::as_const(*bb).parameters()) EXPECT_FALSE(p->trainable) << p->name;
}

TEST(Weights, SaveLoadRoundTripIsExact) {
  const auto spec = small_vit("t", 2, 16, 2, 32, 4, 16);
  const auto a = make_backbone<float>(spec, 11);
  const auto archive = TensorArchive::deserialize(save_weights(*a).serialize());
  const auto b = load_weights<float>(spec, archive);
  EXPECT_EQ(parameter_checksum(std::as_const(*a).parameters()), parameter_checksum(std::as_const(*b).parameters()));
  Rng rng(5);
  const auto img = random_image<float>(*spec, rng);
  EXPECT_EQ(a->embed(img, {}, nullptr), b->embed(img, {}, nullptr));
}

TEST(Weights, LoadingIsStrict) {
  const auto spec = small_vit("t", 1, 16, 2, 32, 4, 16);
  const auto good = save_weights(*make_backbone<float>(spec, 1));
  auto missing = good;
  missing.tensors.erase(missing.tensors.begin());
  EXPECT_THROW(load_weights<float>(spec, missing), ValidationError);
  auto extra = good;
  extra.tensors["stray"] = {{1}, {0.0f}, std::nullopt};
  EXPECT_THROW(load_weights<float>(spec, extra), ValidationError);
  auto reshaped = good;
  auto it = std::find_if(reshaped.tensors.begin(), reshaped.tensors.end(), [](const auto& kv) {
    return kv.second.shape.size() == 2 && kv.second.shape[0] > 1 && kv.second.shape[1] > 1;
  });
  ASSERT_NE(it, reshaped.tensors.end());
  it->second.shape = {it->second.element_count()};
  EXPECT_THROW(load_weights<float>(spec, reshaped), ShapeError);
}

TEST(Weights, SourceResolution) {
  const auto spec = small_vit("t", 1, 16, 2, 32, 4, 16);
  EXPECT_EQ(parameter_checksum(std::as_const(*load_weights<float>(spec, std::string("seed:7"))).parameters()),
            parameter_checksum(std::as_const(*make_backbone<float>(spec, 7)).parameters()));
  EXPECT_THROW(load_weights<float>(spec, std::string()), ValidationError);
  EXPECT_THROW(load_weights<float>(spec, std::string("/nonexistent/w.mbta")), ValidationError);
}

TEST(Backbone, ConvArchitectureHasNoTokens) {
  const auto reg = BackboneRegistry::builtin();
  const auto spec = reg.find("toy-conv");
  const auto bb = load_weights<float>(spec, spec->weights_source);
  EXPECT_FALSE(bb->has_tokens());
  Rng rng(6);
  const auto img = random_image<float>(*spec, rng);
  EXPECT_THROW(bb->tokens(img, {}), UnsupportedModeError);
  const auto z = bb->embed(img, {}, nullptr);
  EXPECT_EQ(z.cols(), spec->feature_dim);
  EXPECT_TRUE(z.allFinite());
}

TEST(Backbone, PrecisionConversionAgrees) {
  const auto spec = small_vit("t", 2, 16, 2, 32, 4, 16);
  const auto f = make_backbone<float>(spec, 12);
  const auto d = convert_backbone<double>(*f);
  Rng rng(7);
  const auto img = random_image<double>(*spec, rng);
  std::vector<float> imgf(img.begin(), img.end());
  const auto zd = d->embed(img, {}, nullptr);
  const auto zf = f->embed(imgf, {}, nullptr);
  EXPECT_LT((zd - zf.cast<double>()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Backbone, OutputsStayFiniteOnExtremeInputs) {
  const auto spec = small_vit("t", 2, 16, 2, 32, 4, 16);
  const auto bb = make_backbone<float>(spec, 13);
  std::vector<float> img(3 * 16 * 16, 50.0f);
  EXPECT_TRUE(bb->embed(img, {}, nullptr).allFinite());
}

}  // namespace
}  // namespace mitobench
