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

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <vector>

namespace mitobench::testing {

// Exact nonnegative rational with int64 parts, kept reduced.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Fraction of(std::int64_t n, std::int64_t d) {
    const std::int64_t g = std::gcd(n, d);
    return g == 0 ? Fraction{0, 1} : Fraction{n / g, d / g};
  }
  Fraction operator+(const Fraction& o) const { return of(num * o.den + o.num * den, den * o.den); }
  Fraction operator*(const Fraction& o) const { return of(num * o.num, den * o.den); }
  Fraction operator/(const Fraction& o) const { return of(num * o.den, den * o.num); }
  bool is_zero() const { return num == 0; }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

// Per-class counts straight from the definition, class `c` taken as positive.
struct ClassCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, support = 0;
};

inline ClassCounts count_class(const std::vector<int>& labels, const std::vector<int>& predictions, int c) {
  ClassCounts k;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool actual = labels[i] == c, predicted = predictions[i] == c;
    k.tp += actual && predicted;
    k.fp += !actual && predicted;
    k.fn += actual && !predicted;
    k.support += actual;
  }
  return k;
}

// Mean of per-class recall.
inline double oracle_balanced_accuracy(const std::vector<int>& labels, const std::vector<int>& predictions) {
  const auto pos = count_class(labels, predictions, 1);
  const auto neg = count_class(labels, predictions, 0);
  const Fraction sensitivity = Fraction::of(pos.tp, pos.support);
  const Fraction specificity = Fraction::of(neg.tp, neg.support);
  return ((sensitivity + specificity) * Fraction::of(1, 2)).value();
}

// Support-weighted mean of 2PR / (P + R); undefined precision counts as 0 and
// a class with P + R = 0 scores 0.
inline double oracle_weighted_f1(const std::vector<int>& labels, const std::vector<int>& predictions) {
  Fraction total;
  for (int c : {0, 1}) {
    const auto k = count_class(labels, predictions, c);
    const Fraction precision = k.tp + k.fp == 0 ? Fraction{} : Fraction::of(k.tp, k.tp + k.fp);
    const Fraction recall = k.support == 0 ? Fraction{} : Fraction::of(k.tp, k.support);
    const Fraction sum = precision + recall;
    const Fraction f1 = sum.is_zero() ? Fraction{} : Fraction::of(2, 1) * precision * recall / sum;
    total = total + f1 * Fraction::of(k.support, 1);
  }
  return (total * Fraction::of(1, static_cast<std::int64_t>(labels.size()))).value();
}

// Fraction of positive/negative pairs ranked correctly, ties 1/2.
inline double oracle_auroc(const std::vector<int>& labels, const std::vector<double>& scores) {
  std::int64_t doubled_wins = 0, pairs = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      doubled_wins += scores[i] > scores[j] ? 2 : scores[i] == scores[j] ? 1 : 0;
    }
  }
  return Fraction::of(doubled_wins, 2 * pairs).value();
}

// Cosine annealing between two values, written in the common
// end + (start - end) / 2 * (cos(pi t) + 1) form.
inline double annealing_cos(double start, double end, double t) {
  return end + (start - end) / 2.0 * (std::cos(std::numbers::pi * t) + 1.0);
}

// One-cycle reference: warmup from max / div_factor to max at
// floor(pct_start * total), then down to max / final_div at the last step.
inline double reference_lr(std::int64_t step, std::int64_t total, double max_lr, double pct_start = 0.3,
                           double div_factor = 25.0, double final_div = 1e4) {
  const double initial = max_lr / div_factor;
  const double minimum = max_lr / final_div;
  const auto peak = static_cast<std::int64_t>(std::floor(pct_start * static_cast<double>(total)));
  if (step == peak) return max_lr;
  if (step == 0) return initial;
  if (step == total - 1) return minimum;
  if (step < peak) return annealing_cos(initial, max_lr, static_cast<double>(step) / static_cast<double>(peak));
  return annealing_cos(max_lr, minimum, static_cast<double>(step - peak) / static_cast<double>(total - 1 - peak));
}

}  // namespace mitobench::testing
