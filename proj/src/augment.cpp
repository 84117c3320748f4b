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

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mitobench/errors.hpp"
#include "mitobench/ingest.hpp"

namespace mitobench {
namespace {

void clamp_pixels(RawPatch& p) {
  for (float& v : p.pixels) v = std::clamp(v, 0.0f, 255.0f);
}

// ITU-R 601 luma, as used for grayscale conversion in common jitter implementations.
float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

void adjust_brightness(RawPatch& p, double factor) {
  for (float& v : p.pixels) v = static_cast<float>(v * factor);
  clamp_pixels(p);
}

void adjust_contrast(RawPatch& p, double factor) {
  double mean = 0.0;
  const std::size_t n = p.pixels.size() / 3;
  for (std::size_t i = 0; i < n; ++i) mean += luma(p.pixels[3 * i], p.pixels[3 * i + 1], p.pixels[3 * i + 2]);
  mean /= static_cast<double>(n);
  for (float& v : p.pixels) v = static_cast<float>((v - mean) * factor + mean);
  clamp_pixels(p);
}

void adjust_saturation(RawPatch& p, double factor) {
  const std::size_t n = p.pixels.size() / 3;
  for (std::size_t i = 0; i < n; ++i) {
    float* px = &p.pixels[3 * i];
    const float g = luma(px[0], px[1], px[2]);
    for (int c = 0; c < 3; ++c) px[c] = static_cast<float>((px[c] - g) * factor + g);
  }
  clamp_pixels(p);
}

void adjust_hue(RawPatch& p, double shift) {
  const std::size_t n = p.pixels.size() / 3;
  for (std::size_t i = 0; i < n; ++i) {
    float* px = &p.pixels[3 * i];
    const double r = px[0] / 255.0, g = px[1] / 255.0, b = px[2] / 255.0;
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double delta = mx - mn;
    if (delta <= 0.0) continue;  // gray pixels have no hue
    double h;
    if (mx == r) {
      h = std::fmod((g - b) / delta, 6.0);
    } else if (mx == g) {
      h = (b - r) / delta + 2.0;
    } else {
      h = (r - g) / delta + 4.0;
    }
    h /= 6.0;
    h += shift;
    h -= std::floor(h);
    const double s = delta / mx;
    const double v = mx;
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double pp = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double rgb[3];
    switch (sector) {
      case 0: rgb[0] = v, rgb[1] = t, rgb[2] = pp; break;
      case 1: rgb[0] = q, rgb[1] = v, rgb[2] = pp; break;
      case 2: rgb[0] = pp, rgb[1] = v, rgb[2] = t; break;
      case 3: rgb[0] = pp, rgb[1] = q, rgb[2] = v; break;
      case 4: rgb[0] = t, rgb[1] = pp, rgb[2] = v; break;
      default: rgb[0] = v, rgb[1] = pp, rgb[2] = q; break;
    }
    for (int c = 0; c < 3; ++c) px[c] = static_cast<float>(rgb[c] * 255.0);
  }
  clamp_pixels(p);
}

RawPatch gaussian_blur(const RawPatch& p, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;
  const int s = p.size;
  auto clampi = [s](int v) { return std::clamp(v, 0, s - 1); };
  RawPatch tmp = p, out = p;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * p.at(clampi(x + i), y, c);
        tmp.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp.at(x, clampi(y + i), c);
        out.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
  clamp_pixels(out);
  return out;
}

// Bilinear rotation about the patch center with edge clamping.
RawPatch rotate_free(const RawPatch& p, double degrees) {
  const int s = p.size;
  const double a = degrees * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double c0 = (s - 1) / 2.0;
  RawPatch out = p;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double dx = x - c0, dy = y - c0;
      const double sx = std::clamp(ca * dx + sa * dy + c0, 0.0, s - 1.0);
      const double sy = std::clamp(-sa * dx + ca * dy + c0, 0.0, s - 1.0);
      const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
      const int x1 = std::min(x0 + 1, s - 1), y1 = std::min(y0 + 1, s - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        const double top = p.at(x0, y0, c) * (1 - fx) + p.at(x1, y0, c) * fx;
        const double bottom = p.at(x0, y1, c) * (1 - fx) + p.at(x1, y1, c) * fx;
        out.at(x, y, c) = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
  clamp_pixels(out);
  return out;
}

}  // namespace

AugmentPolicy AugmentPolicy::identity() {
  AugmentPolicy p;
  p.p_hflip = p.p_vflip = p.p_rotate90 = p.p_color_jitter = p.p_blur = 0.0;
  p.free_rotation = false;
  return p;
}

RawPatch flip_horizontal(const RawPatch& p) {
  RawPatch out = p;
  for (int y = 0; y < p.size; ++y) {
    for (int x = 0; x < p.size; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = p.at(p.size - 1 - x, y, c);
    }
  }
  return out;
}

RawPatch flip_vertical(const RawPatch& p) {
  RawPatch out = p;
  for (int y = 0; y < p.size; ++y) {
    for (int x = 0; x < p.size; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = p.at(x, p.size - 1 - y, c);
    }
  }
  return out;
}

RawPatch rotate90(const RawPatch& p, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return p;
  RawPatch out = p;
  const int s = p.size;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      int sx, sy;  // counter-clockwise
      switch (k) {
        case 1: sx = s - 1 - y, sy = x; break;
        case 2: sx = s - 1 - x, sy = s - 1 - y; break;
        default: sx = y, sy = s - 1 - x; break;
      }
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = p.at(sx, sy, c);
    }
  }
  return out;
}

RawPatch augment(const RawPatch& patch, Rng& rng, const AugmentPolicy& policy, PipelineMode mode) {
  if (mode == PipelineMode::kEvaluation) {
    throw ValidationError("augmentation requested on the evaluation path");
  }
  RawPatch out = patch;
  if (bernoulli(rng, policy.p_hflip)) out = flip_horizontal(out);
  if (bernoulli(rng, policy.p_vflip)) out = flip_vertical(out);
  if (bernoulli(rng, policy.p_rotate90)) out = rotate90(out, static_cast<int>(uniform_index(rng, 4)));
  if (policy.free_rotation) {
    out = rotate_free(out, uniform(rng, -policy.max_free_angle_deg, policy.max_free_angle_deg));
  }
  if (bernoulli(rng, policy.p_color_jitter)) {
    adjust_brightness(out, uniform(rng, 1.0 - policy.brightness, 1.0 + policy.brightness));
    adjust_contrast(out, uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast));
    adjust_saturation(out, uniform(rng, 1.0 - policy.saturation, 1.0 + policy.saturation));
    adjust_hue(out, uniform(rng, -policy.hue, policy.hue));
  }
  if (bernoulli(rng, policy.p_blur)) {
    out = gaussian_blur(out, uniform(rng, policy.blur_sigma_min, policy.blur_sigma_max));
  }
  return out;
}

}  // namespace mitobench
