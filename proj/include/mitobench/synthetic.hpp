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
#include <filesystem>
#include <memory>
#include <string>

#include "mitobench/ingest.hpp"
#include "mitobench/random.hpp"

namespace mitobench {

// Labeled patch images where the label is a linear function of the mean
// channel intensities: mitotic iff w . mean_rgb / 255 > 0.5 with
// w = (0.5, 0.3, 0.2). Each annotation owns one image and sits at its center.
struct SyntheticOptions {
  std::string name = "synthetic";
  int domains = 1;
  int cases_per_domain = 4;
  int annotations_per_case = 8;
  double mitotic_share = 0.5;
  int image_size = 224;
  // Half-width of the excluded band around the decision boundary, in [0, 1] units.
  double margin = 0.05;
  double pixel_noise = 20.0;
  std::uint64_t seed = 0;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::shared_ptr<InMemoryImageStore> store;
};

inline constexpr std::array<double, 3> kSyntheticWeights{0.5, 0.3, 0.2};

SyntheticDataset make_synthetic_dataset(const SyntheticOptions& options);

// Writes the images as netpbm files plus manifest.jsonl under `dir`.
std::filesystem::path write_synthetic_dataset(const SyntheticDataset& dataset, const std::filesystem::path& dir);

// Records-only manifests with heavy-tailed case masses, for split properties.
struct RandomManifestOptions {
  int min_cases = 2;
  int max_cases = 40;
  int domains = 1;
  int max_case_mass = 60;
};

DatasetManifest random_manifest(Rng& rng, const RandomManifestOptions& options = {});

}  // namespace mitobench
