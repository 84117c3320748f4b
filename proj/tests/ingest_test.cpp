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


#include "mitobench/ingest.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "mitobench/errors.hpp"
#include "mitobench/synthetic.hpp"
#include "support.hpp"

namespace mitobench {
namespace {

RgbImage gradient_image(int w, int h) {
  RgbImage img{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto* p = &img.pixels[(static_cast<std::size_t>(y) * w + x) * 3];
      p[0] = static_cast<std::uint8_t>(x % 256);
      p[1] = static_cast<std::uint8_t>(y % 256);
      p[2] = static_cast<std::uint8_t>((x + y) % 256);
    }
  }
  return img;
}

AnnotationRecord record(std::string id, std::string case_id, std::string image, double x, double y, Label label) {
  return {std::move(id), std::move(case_id), "A", std::move(image), x, y, label};
}

DatasetManifest small_manifest() {
  DatasetManifest m;
  m.name = "demo";
  m.image_root = "images";
  m.images["a.ppm"] = {300, 200};
  m.images["b.ppm"] = {300, 300};
  m.records = {record("1", "c1", "a.ppm", 10, 20, Label::kMitoticFigure),
               record("2", "c1", "a.ppm", 150, 100, Label::kHardNegative),
               record("3", "c2", "b.ppm", 299.5, 0, Label::kMitoticFigure)};
  return m;
}

TEST(Labels, ParseAndBinary) {
  EXPECT_EQ(parse_label("mitotic_figure"), Label::kMitoticFigure);
  EXPECT_EQ(parse_label(to_string(Label::kHardNegative)), Label::kHardNegative);
  EXPECT_EQ(binary_label(Label::kMitoticFigure), 1);
  EXPECT_EQ(binary_label(Label::kHardNegative), 0);
  EXPECT_THROW(parse_label("tumor"), ValidationError);
}

TEST(Manifest, CountsAndIndexes) {
  const auto m = small_manifest();
  EXPECT_EQ(m.counts(), (LabelCounts{2, 1}));
  EXPECT_EQ(m.counts_by_case().at("c1"), (LabelCounts{1, 1}));
  EXPECT_EQ(m.cases(), (std::vector<std::string>{"c1", "c2"}));
  EXPECT_EQ(m.domains(), (std::vector<std::string>{"A"}));
  EXPECT_EQ(m.record("2").x, 150);
  EXPECT_THROW(m.record("nope"), ValidationError);
  EXPECT_TRUE(m.validate().empty());
}

TEST(Manifest, ValidationFindsEveryProblem) {
  auto m = small_manifest();
  m.records.push_back(record("1", "c3", "a.ppm", 1, 1, Label::kHardNegative));
  m.records.push_back(record("4", "", "a.ppm", 1, 1, Label::kHardNegative));
  m.records.push_back(record("5", "c3", "missing.ppm", 1, 1, Label::kHardNegative));
  m.records.push_back(record("6", "c3", "a.ppm", 301, 1, Label::kHardNegative));
  EXPECT_EQ(m.validate().size(), 4u);
}

TEST(Manifest, FileRoundTrip) {
  testing::TempDir dir("manifest");
  const auto path = dir.path() / "m.jsonl";
  const auto m = small_manifest();
  write_manifest(m, path);
  EXPECT_TRUE(std::filesystem::exists(image_table_path(path)));
  const auto back = read_manifest(path);
  EXPECT_EQ(back.name, m.name);
  EXPECT_EQ(back.image_root, m.image_root);
  EXPECT_EQ(back.records, m.records);
  EXPECT_EQ(back.images, m.images);
}

TEST(Manifest, RejectsUnknownSchemaVersion) {
  testing::TempDir dir("manifest");
  const auto path = dir.path() / "m.jsonl";
  write_manifest(small_manifest(), path);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  in.close();
  const auto pos = first.find("\"schema_version\":1");
  ASSERT_NE(pos, std::string::npos);
  first.replace(pos, 18, "\"schema_version\":9");
  std::ofstream(path) << first << "\n";
  EXPECT_THROW(read_manifest(path), ValidationError);
}

TEST(Netpbm, RoundTripAndRegionReads) {
  testing::TempDir dir("pnm");
  const auto img = gradient_image(40, 30);
  write_netpbm(img, dir.path() / "g.ppm");
  const auto back = read_netpbm(dir.path() / "g.ppm");
  EXPECT_EQ(back.width, 40);
  EXPECT_EQ(back.pixels, img.pixels);
  NetpbmImageStore store(dir.path());
  EXPECT_EQ(store.info("g.ppm"), (ImageInfo{40, 30}));
  const auto region = store.read_region("g.ppm", 5, 7, 4, 3);
  EXPECT_EQ(region.at(0, 0, 0), 5);
  EXPECT_EQ(region.at(3, 2, 1), 9);
  EXPECT_THROW(store.read_region("g.ppm", 38, 0, 4, 4), ValidationError);
  EXPECT_THROW(store.info("missing.ppm"), IoError);
}

TEST(Window, CenteredInsideShiftedAtBorders) {
  const ImageInfo img{1000, 800};
  EXPECT_EQ(window_origin(500, 400, img, 224), (WindowOrigin{388, 288}));
  EXPECT_EQ(window_origin(3, 5, img, 224), (WindowOrigin{0, 0}));
  EXPECT_EQ(window_origin(999.9, 799, img, 224), (WindowOrigin{776, 576}));
  EXPECT_THROW(window_origin(10, 10, {100, 100}, 224), ValidationError);
}

TEST(Window, AlwaysInBoundsAndContainsCenter) {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const ImageInfo img{224 + static_cast<int>(uniform_index(rng, 800)), 224 + static_cast<int>(uniform_index(rng, 800))};
    const double cx = uniform(rng, 0, img.width), cy = uniform(rng, 0, img.height);
    const auto o = window_origin(cx, cy, img, 224);
    ASSERT_GE(o.x0, 0);
    ASSERT_GE(o.y0, 0);
    ASSERT_LE(o.x0 + 224, img.width);
    ASSERT_LE(o.y0 + 224, img.height);
    ASSERT_LE(o.x0, cx);
    ASSERT_LT(cx, o.x0 + 224);
  }
}

TEST(Patches, ExtractionCutsTheWindow) {
  InMemoryImageStore store;
  store.add("g", gradient_image(300, 300));
  PatchSpec spec;
  spec.size = 32;
  const auto p = extract_patch(store, record("1", "c", "g", 100, 150, Label::kMitoticFigure), spec);
  EXPECT_EQ(p.origin, (WindowOrigin{84, 134}));
  EXPECT_EQ(p.patch.size, 32);
  EXPECT_EQ(p.patch.at(16, 16, 0), 100.0f);
  EXPECT_EQ(p.patch.at(16, 16, 1), 150.0f);
}

TEST(Patches, RandomPatchesKeepClearOfMitoticFigures) {
  InMemoryImageStore store;
  store.add("g", gradient_image(256, 256));
  PatchSpec spec;
  spec.size = 64;
  std::vector<AnnotationRecord> recs{record("1", "c", "g", 128, 128, Label::kMitoticFigure),
                                     record("2", "c", "g", 40, 40, Label::kHardNegative)};
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto r = sample_random_patch(store, "g", recs, rng, spec);
    const double cx = r.origin.x0 + 32, cy = r.origin.y0 + 32;
    if (!r.relaxed) EXPECT_GE(std::hypot(cx - 128, cy - 128), 25.0);
    EXPECT_EQ(r.record.label, Label::kHardNegative);
    EXPECT_LE(r.tries, 100);
  }
}

TEST(Patches, ImpossibleExclusionIsRelaxed) {
  InMemoryImageStore store;
  store.add("g", gradient_image(64, 64));
  PatchSpec spec;
  spec.size = 64;
  std::vector<AnnotationRecord> recs{record("1", "c", "g", 32, 32, Label::kMitoticFigure)};
  Rng rng(3);
  const auto r = sample_random_patch(store, "g", recs, rng, spec);
  EXPECT_TRUE(r.relaxed);
  EXPECT_EQ(r.tries, 100);
}

TEST(Patches, NormalizeInvertsDenormalize) {
  PatchSpec spec;
  spec.size = 8;
  RawPatch p{8, std::vector<float>(8 * 8 * 3)};
  Rng rng(4);
  for (auto& v : p.pixels) v = static_cast<float>(uniform_index(rng, 256));
  const auto chw = normalize(p, spec);
  EXPECT_NEAR(chw[0], (p.at(0, 0, 0) / 255.0 - 0.485) / 0.229, 1e-5);
  EXPECT_NEAR(chw[64 + 9], (p.at(1, 1, 1) / 255.0 - 0.456) / 0.224, 1e-5);
  const auto back = denormalize(chw, 8, spec);
  for (std::size_t i = 0; i < p.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], p.pixels[i], 1e-3);
}

TEST(Augment, GeometricOpsAreInvertible) {
  RawPatch p{6, std::vector<float>(6 * 6 * 3)};
  for (std::size_t i = 0; i < p.pixels.size(); ++i) p.pixels[i] = static_cast<float>(i);
  EXPECT_EQ(flip_horizontal(flip_horizontal(p)), p);
  EXPECT_EQ(flip_vertical(flip_vertical(p)), p);
  EXPECT_EQ(rotate90(rotate90(p, 1), 3), p);
  EXPECT_EQ(rotate90(p, 4), p);
  EXPECT_EQ(rotate90(p, 2), flip_horizontal(flip_vertical(p)));
  EXPECT_EQ(flip_horizontal(p).at(0, 2, 1), p.at(5, 2, 1));
}

TEST(Augment, IdentityPolicyAndEvaluationGuard) {
  RawPatch p{6, std::vector<float>(6 * 6 * 3, 100.0f)};
  Rng rng(5);
  EXPECT_EQ(augment(p, rng, AugmentPolicy::identity()), p);
  EXPECT_THROW(augment(p, rng, AugmentPolicy{}, PipelineMode::kEvaluation), ValidationError);
}

TEST(Augment, OutputStaysInPixelRange) {
  RawPatch p{16, std::vector<float>(16 * 16 * 3)};
  Rng rng(6);
  for (auto& v : p.pixels) v = static_cast<float>(uniform_index(rng, 256));
  AugmentPolicy policy;
  policy.free_rotation = true;
  for (int i = 0; i < 50; ++i) {
    const auto a = augment(p, rng, policy);
    ASSERT_EQ(a.size, 16);
    for (float v : a.pixels) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 255.0f);
    }
  }
}

TEST(Import, CocoWithBoxesAndQuarantine) {
  testing::TempDir dir("coco");
  const auto src = dir.path() / "set.json";
  std::ofstream(src) << R"({
    "images": [{"id": 1, "file_name": "001.tiff", "width": 500, "height": 400, "tumor": "canine lymphoma"},
               {"id": 2, "file_name": "002.tiff", "width": 500, "height": 400, "tumor": "human breast"}],
    "categories": [{"id": 1, "name": "mitotic figure"}, {"id": 2, "name": "non-mitotic figure"}],
    "annotations": [{"id": 10, "image_id": 1, "category_id": 1, "bbox": [100, 100, 150, 150]},
                    {"id": 11, "image_id": 1, "category_id": 2, "bbox": [0, 0, 50, 50]},
                    {"id": 12, "image_id": 2, "category_id": 1, "bbox": [480, 380, 600, 420]},
                    {"id": 13, "image_id": 9, "category_id": 1, "bbox": [1, 1, 2, 2]}]
  })";
  const auto result = import_manifest(src, R"({
    "format": "coco", "name": "midog",
    "categories": {"mitotic figure": "mitotic_figure", "non-mitotic figure": "hard_negative"},
    "domain_field": "tumor", "domain_map": {"canine lymphoma": "CL", "human breast": "HB"}
  })");
  const auto& m = result.manifest;
  EXPECT_EQ(m.name, "midog");
  ASSERT_EQ(m.records.size(), 2u);
  EXPECT_EQ(m.records[0].annotation_id, "10");
  EXPECT_EQ(m.records[0].x, 125);
  EXPECT_EQ(m.records[0].case_id, "001");
  EXPECT_EQ(m.records[0].domain, "CL");
  EXPECT_EQ(m.records[1].label, Label::kHardNegative);
  EXPECT_EQ(result.report.quarantined.size(), 2u);
  EXPECT_EQ(result.report.totals, (LabelCounts{1, 1}));
  EXPECT_TRUE(m.validate().empty());
}

TEST(Import, CsvWithDomainRangesAndDimensionsFromStore) {
  testing::TempDir dir("csv");
  const auto src = dir.path() / "set.csv";
  std::ofstream(src) << "uid,slide,img,cx,cy,cls\n"
                        "a1,s1,s1.ppm,10,12,mitosis\n"
                        "a2,s1,s1.ppm,30,5,imposter\n"
                        "a3,s2,s2.ppm,1,1,mitosis\n";
  InMemoryImageStore store;
  store.add("s1.ppm", gradient_image(64, 64));
  store.add("s2.ppm", gradient_image(32, 32));
  const auto result = import_manifest(src, R"({
    "format": "csv",
    "columns": {"annotation_id": "uid", "case_id": "slide", "image_ref": "img", "x": "cx", "y": "cy", "label": "cls"},
    "labels": {"mitosis": "mitotic_figure", "imposter": "hard_negative"},
    "default_domain": "X"
  })", &store);
  ASSERT_EQ(result.manifest.records.size(), 3u);
  EXPECT_EQ(result.manifest.images.at("s2.ppm"), (ImageInfo{32, 32}));
  EXPECT_EQ(result.manifest.records[1].label, Label::kHardNegative);
  EXPECT_EQ(result.manifest.records[2].domain, "X");
}

TEST(Import, UnmappedCategoryAndBadMappingFail) {
  testing::TempDir dir("csv");
  const auto src = dir.path() / "set.csv";
  std::ofstream(src) << "uid,img,cx,cy,cls,w,h\na1,s1.ppm,10,12,other,64,64\n";
  const std::string mapping = R"({"format": "csv",
    "columns": {"annotation_id": "uid", "image_ref": "img", "x": "cx", "y": "cy", "label": "cls", "width": "w", "height": "h"},
    "labels": {"mitosis": "mitotic_figure"}, "default_domain": "X"})";
  EXPECT_THROW(import_manifest(src, mapping), ValidationError);
  EXPECT_THROW(import_manifest(src, "{not json"), ValidationError);
  EXPECT_THROW(import_manifest(src, R"({"format": "xml"})"), ValidationError);
}

TEST(Synthetic, LabelsFollowMeanIntensityRule) {
  SyntheticOptions o;
  o.cases_per_domain = 2;
  o.annotations_per_case = 10;
  o.image_size = 64;
  o.seed = 5;
  const auto ds = make_synthetic_dataset(o);
  ASSERT_EQ(ds.manifest.records.size(), 20u);
  EXPECT_TRUE(ds.manifest.validate().empty());
  PatchSpec spec;
  spec.size = 64;
  for (const auto& r : ds.manifest.records) {
    const auto p = extract_patch(*ds.store, r, spec).patch;
    std::array<double, 3> mean{};
    for (std::size_t i = 0; i < p.pixels.size(); ++i) mean[i % 3] += p.pixels[i];
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += kSyntheticWeights[c] * mean[c] / (64.0 * 64.0) / 255.0;
    EXPECT_EQ(s > 0.5 ? 1 : 0, binary_label(r.label)) << r.annotation_id;
  }
}

}  // namespace
}  // namespace mitobench
