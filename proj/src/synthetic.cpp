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


#include "mitobench/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "mitobench/errors.hpp"

namespace mitobench {
namespace {

std::string pad(int v, int width = 3) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

std::string domain_name(int d) { return std::string(1, static_cast<char>('A' + d % 26)) + (d >= 26 ? pad(d / 26, 1) : ""); }

}  // namespace

SyntheticDataset make_synthetic_dataset(const SyntheticOptions& o) {
  if (o.domains < 1 || o.cases_per_domain < 1 || o.annotations_per_case < 1 || o.image_size < 8) {
    throw ValidationError("synthetic dataset needs positive counts and image_size >= 8");
  }
  if (!(o.margin >= 0.0 && o.margin < 0.3)) throw ValidationError("synthetic margin must be in [0, 0.3)");
  SyntheticDataset out;
  out.store = std::make_shared<InMemoryImageStore>();
  out.manifest.name = o.name;
  out.manifest.image_root = "images";
  Rng rng(o.seed);
  const int n = o.image_size;
  for (int d = 0; d < o.domains; ++d) {
    // Per-domain tint orthogonal to the label weights: shifts color, not labels.
    const double tint = uniform(rng, -0.08, 0.08);
    const std::array<double, 3> shift{tint * 0.2, tint * 0.2, -tint * 0.8};
    for (int c = 0; c < o.cases_per_domain; ++c) {
      const std::string case_id = domain_name(d) + "-case" + pad(c);
      for (int a = 0; a < o.annotations_per_case; ++a) {
        const bool positive = bernoulli(rng, o.mitotic_share);
        const double target =
            positive ? uniform(rng, 0.5 + o.margin, 0.8) : uniform(rng, 0.2, 0.5 - o.margin);
        std::array<double, 3> color{uniform(rng, 0.15, 0.85), uniform(rng, 0.15, 0.85), uniform(rng, 0.15, 0.85)};
        double s = 0.0;
        for (int ch = 0; ch < 3; ++ch) s += kSyntheticWeights[ch] * color[ch];
        for (int ch = 0; ch < 3; ++ch) color[ch] = std::clamp(color[ch] + target - s + shift[ch], 0.05, 0.95);

        RgbImage img;
        img.width = n;
        img.height = n;
        img.pixels.resize(static_cast<std::size_t>(n) * n * 3);
        std::array<double, 3> sum{0, 0, 0};
        for (int y = 0; y < n; ++y) {
          for (int x = 0; x < n; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
              const double v = std::clamp(255.0 * color[ch] + uniform(rng, -o.pixel_noise, o.pixel_noise), 0.0, 255.0);
              const auto q = static_cast<std::uint8_t>(std::lround(v));
              img.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + ch] = q;
              sum[ch] += q;
            }
          }
        }
        double score = 0.0;
        for (int ch = 0; ch < 3; ++ch) score += kSyntheticWeights[ch] * sum[ch] / (255.0 * n * n);

        AnnotationRecord r;
        r.case_id = case_id;
        r.annotation_id = case_id + "-a" + pad(a);
        r.domain = domain_name(d);
        r.image_ref = r.annotation_id + ".ppm";
        r.x = n / 2.0;
        r.y = n / 2.0;
        // The rendered means decide the label, so it is exactly the linear rule.
        r.label = score > 0.5 ? Label::kMitoticFigure : Label::kHardNegative;
        out.manifest.images[r.image_ref] = {n, n};
        out.store->add(r.image_ref, std::move(img));
        out.manifest.records.push_back(std::move(r));
      }
    }
  }
  return out;
}

std::filesystem::path write_synthetic_dataset(const SyntheticDataset& dataset, const std::filesystem::path& dir) {
  const auto image_dir = dir / dataset.manifest.image_root;
  std::filesystem::create_directories(image_dir);
  for (const auto& [ref, info] : dataset.manifest.images) {
    write_netpbm(dataset.store->read_region(ref, 0, 0, info.width, info.height), image_dir / ref);
  }
  const auto path = dir / "manifest.jsonl";
  write_manifest(dataset.manifest, path);
  return path;
}

DatasetManifest random_manifest(Rng& rng, const RandomManifestOptions& o) {
  if (o.min_cases < 2 || o.max_cases < o.min_cases || o.max_case_mass < 1 || o.domains < 1) {
    throw ValidationError("invalid random manifest options");
  }
  DatasetManifest m;
  m.name = "random";
  const int cases = o.min_cases + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(o.max_cases - o.min_cases + 1)));
  for (int c = 0; c < cases; ++c) {
    const std::string case_id = "case" + pad(c);
    const std::string ref = case_id + ".ppm";
    m.images[ref] = {1000, 1000};
    // Heavy tail: squared uniform scaled to the maximum mass.
    const double u = uniform01(rng);
    const int mass = 1 + static_cast<int>(u * u * (o.max_case_mass - 1));
    const std::string domain = domain_name(c % o.domains);
    for (int a = 0; a < mass; ++a) {
      AnnotationRecord r;
      r.annotation_id = case_id + "-a" + pad(a);
      r.case_id = case_id;
      r.domain = domain;
      r.image_ref = ref;
      r.x = uniform(rng, 0.0, 999.0);
      r.y = uniform(rng, 0.0, 999.0);
      r.label = bernoulli(rng, 0.3) ? Label::kMitoticFigure : Label::kHardNegative;
      m.records.push_back(std::move(r));
    }
  }
  // Both labels present somewhere; at least two cases guarantee two records.
  m.records.front().label = Label::kMitoticFigure;
  m.records.back().label = Label::kHardNegative;
  return m;
}

}  // namespace mitobench
