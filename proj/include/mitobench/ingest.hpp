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

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mitobench/backbone.hpp"
#include "mitobench/random.hpp"

namespace mitobench {

enum class Label { kMitoticFigure, kHardNegative };

std::string_view to_string(Label label);  // "mitotic_figure" | "hard_negative"
Label parse_label(std::string_view text);
inline int binary_label(Label label) { return label == Label::kMitoticFigure ? 1 : 0; }

struct AnnotationRecord {
  std::string annotation_id;
  std::string case_id;
  std::string domain;
  std::string image_ref;
  double x = 0.0;
  double y = 0.0;
  Label label = Label::kMitoticFigure;

  bool operator==(const AnnotationRecord&) const = default;
};

struct ImageInfo {
  int width = 0;
  int height = 0;
  bool operator==(const ImageInfo&) const = default;
};

struct LabelCounts {
  std::int64_t mitotic_figures = 0;
  std::int64_t hard_negatives = 0;
  std::int64_t total() const { return mitotic_figures + hard_negatives; }
  bool operator==(const LabelCounts&) const = default;
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  std::string name;
  std::vector<AnnotationRecord> records;
  std::string image_root;
  std::map<std::string, ImageInfo> images;

  LabelCounts counts() const;
  std::map<std::string, LabelCounts> counts_by_domain() const;
  std::map<std::string, LabelCounts> counts_by_case() const;
  std::vector<std::string> cases() const;    // sorted, unique
  std::vector<std::string> domains() const;  // sorted, unique
  const AnnotationRecord& record(std::string_view annotation_id) const;

  // Unique ids, resolvable images, in-bounds coordinates, nonempty case ids.
  std::vector<std::string> validate() const;
};

// Canonical manifest: one JSON object per line holding exactly the record
// fields plus schema_version. Image dimensions go to the companion file
// returned by image_table_path(); the dataset name and image root are stored
// in its first line.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);
std::filesystem::path image_table_path(const std::filesystem::path& manifest_path);

// ---------------------------------------------------------------------------
// Image access

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // HWC, 8-bit RGB

  std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

// Uniform access to whole-image files and tiled slide formats.
class ImageStore {
 public:
  virtual ~ImageStore() = default;
  virtual ImageInfo info(const std::string& image_ref) const = 0;
  virtual RgbImage read_region(const std::string& image_ref, int x0, int y0, int width, int height) const = 0;
};

class InMemoryImageStore final : public ImageStore {
 public:
  void add(std::string image_ref, RgbImage image);
  ImageInfo info(const std::string& image_ref) const override;
  RgbImage read_region(const std::string& image_ref, int x0, int y0, int width, int height) const override;

 private:
  std::map<std::string, RgbImage, std::less<>> images_;
};

// Binary netpbm (P6 color, P5 grayscale) files resolved relative to a root.
class NetpbmImageStore final : public ImageStore {
 public:
  explicit NetpbmImageStore(std::filesystem::path root) : root_(std::move(root)) {}
  ImageInfo info(const std::string& image_ref) const override;
  RgbImage read_region(const std::string& image_ref, int x0, int y0, int width, int height) const override;

 private:
  std::shared_ptr<const RgbImage> load(const std::string& image_ref) const;

  std::filesystem::path root_;
  mutable std::mutex mutex_;
  mutable std::string cached_ref_;
  mutable std::shared_ptr<const RgbImage> cached_;
};

void write_netpbm(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_netpbm(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Import

struct ImportReport {
  LabelCounts totals;
  std::map<std::string, LabelCounts> by_domain;
  std::map<std::string, LabelCounts> by_case;
  std::size_t images = 0;
  struct Quarantined {
    std::string annotation_id;
    std::string reason;
  };
  std::vector<Quarantined> quarantined;
};

struct ImportResult {
  DatasetManifest manifest;
  ImportReport report;
};

// `mapping` is the parsed JSON mapping config; see the README for its keys.
// Supported formats: "coco" (images/annotations/categories JSON) and "csv".
// When the source lacks image dimensions they are read from `store`.
ImportResult import_manifest(const std::filesystem::path& source, const std::string& mapping_json,
                             const ImageStore* store = nullptr);

// ---------------------------------------------------------------------------
// Patches

enum class BorderPolicy { kShiftWindow };

struct PatchSpec {
  int size = 224;
  std::array<double, 3> norm_mean{0.485, 0.456, 0.406};
  std::array<double, 3> norm_std{0.229, 0.224, 0.225};
  BorderPolicy border_policy = BorderPolicy::kShiftWindow;

  static PatchSpec for_backbone(const BackboneSpec& spec);
};

// Float HWC pixels in [0, 255].
struct RawPatch {
  int size = 0;
  std::vector<float> pixels;

  float& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }
  float at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }
  bool operator==(const RawPatch&) const = default;
};

struct WindowOrigin {
  int x0 = 0;
  int y0 = 0;
  bool operator==(const WindowOrigin&) const = default;
};

// Window [cx - size/2, cx + size/2) shifted minimally to lie inside the image.
WindowOrigin window_origin(double cx, double cy, const ImageInfo& image, int size);

struct ExtractedPatch {
  RawPatch patch;
  WindowOrigin origin;
};

ExtractedPatch extract_patch(const ImageStore& store, const AnnotationRecord& record, const PatchSpec& spec);

struct RandomPatch {
  RawPatch patch;
  WindowOrigin origin;
  AnnotationRecord record;  // synthetic, labeled hard negative, training only
  bool relaxed = false;     // no candidate met the exclusion radius
  int tries = 0;
};

struct RandomPatchOptions {
  double exclusion_radius = 25.0;
  int max_tries = 100;
};

// Uniform in-bounds window whose center keeps `exclusion_radius` from every
// mitotic figure among `image_records`; after max_tries the candidate with the
// largest clearance is returned and flagged relaxed.
RandomPatch sample_random_patch(const ImageStore& store, const std::string& image_ref,
                                const std::vector<AnnotationRecord>& image_records, Rng& rng,
                                const PatchSpec& spec, const RandomPatchOptions& options = {});

// CHW floats: (p / 255 - mean_c) / std_c.
std::vector<float> normalize(const RawPatch& patch, const PatchSpec& spec);
RawPatch denormalize(const std::vector<float>& chw, int size, const PatchSpec& spec);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentPolicy {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_rotate90 = 1.0;  // draw k uniformly from {0, 90, 180, 270} degrees
  bool free_rotation = false;
  double max_free_angle_deg = 180.0;
  double p_color_jitter = 1.0;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.05;
  double p_blur = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;

  static AugmentPolicy identity();
};

enum class PipelineMode { kTraining, kEvaluation };

// Throws ValidationError when called in evaluation mode.
RawPatch augment(const RawPatch& patch, Rng& rng, const AugmentPolicy& policy,
                 PipelineMode mode = PipelineMode::kTraining);

RawPatch flip_horizontal(const RawPatch& patch);
RawPatch flip_vertical(const RawPatch& patch);
RawPatch rotate90(const RawPatch& patch, int quarter_turns);

}  // namespace mitobench
