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


#include "mitobench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mitobench/errors.hpp"

namespace mitobench {
namespace {

struct Confusion {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion(std::span<const int> labels, std::span<const int> predictions) {
  if (labels.size() != predictions.size()) throw ShapeError("labels and predictions differ in length");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if ((y != 0 && y != 1) || (p != 0 && p != 1)) throw ValidationError("labels and predictions must be 0 or 1");
    if (y == 1) (p == 1 ? c.tp : c.fn)++;
    else (p == 1 ? c.fp : c.tn)++;
  }
  return c;
}

void require_both(const Confusion& c) {
  if (c.tp + c.fn == 0 || c.tn + c.fp == 0) throw ValidationError("metric needs both classes in the labels");
}

double ratio(std::int64_t num, std::int64_t den) { return den == 0 ? 0.0 : static_cast<double>(num) / den; }

// num / den with one rounding when both are exactly representable, so the
// result is the correctly rounded value of the rational.
double exact_ratio(__int128 num, __int128 den) {
  constexpr __int128 kExact = static_cast<__int128>(1) << 53;
  if (num < kExact && den < kExact) return static_cast<double>(static_cast<std::int64_t>(num)) /
                                           static_cast<double>(static_cast<std::int64_t>(den));
  return static_cast<double>(static_cast<long double>(num) / static_cast<long double>(den));
}

double balanced_accuracy_of(const Confusion& c) {
  const __int128 p = c.tp + c.fn, n = c.tn + c.fp;
  return exact_ratio(c.tp * n + c.tn * p, 2 * p * n);
}

// Support-weighted F1 over a common denominator:
// (P * 2tp / D1 + N * 2tn / D0) / (P + N) with D1 = 2tp + fp + fn, D0 = 2tn + fp + fn.
double weighted_f1_of(const Confusion& c) {
  const __int128 p = c.tp + c.fn, n = c.tn + c.fp, total = p + n;
  const __int128 d1 = 2 * c.tp + c.fp + c.fn, d0 = 2 * c.tn + c.fp + c.fn;
  const __int128 a = p * 2 * c.tp, b = n * 2 * c.tn;
  if (d1 == 0 && d0 == 0) return 0.0;
  if (d1 == 0) return exact_ratio(b, total * d0);
  if (d0 == 0) return exact_ratio(a, total * d1);
  return exact_ratio(a * d0 + b * d1, total * d1 * d0);
}

}  // namespace

double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions) {
  const auto c = confusion(labels, predictions);
  require_both(c);
  return balanced_accuracy_of(c);
}

double weighted_f1(std::span<const int> labels, std::span<const int> predictions) {
  const auto c = confusion(labels, predictions);
  require_both(c);
  return weighted_f1_of(c);
}

double auroc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw ShapeError("labels and scores differ in length");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of positive midranks (1-based).
  double rank_sum = 0.0;
  std::int64_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      const int y = labels[order[k]];
      if (y != 0 && y != 1) throw ValidationError("labels must be 0 or 1");
      if (y == 1) {
        rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("AUROC needs both classes in the labels");
  const double u = rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

EvalResult evaluate_scores(std::span<const int> labels, std::span<const double> scores, double threshold) {
  if (labels.empty()) throw ValidationError("empty test set");
  if (labels.size() != scores.size()) throw ShapeError("labels and scores differ in length");
  std::vector<int> predictions(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericError("non-finite score");
    predictions[i] = scores[i] >= threshold ? 1 : 0;
  }
  const auto c = confusion(labels, predictions);
  EvalResult r;
  r.n_pos = c.tp + c.fn;
  r.n_neg = c.tn + c.fp;
  r.threshold = threshold;
  r.weighted_f1 = weighted_f1_of(c);
  if (r.n_pos == 0 || r.n_neg == 0) {
    r.single_class = true;
    r.balanced_accuracy = r.n_pos > 0 ? ratio(c.tp, r.n_pos) : ratio(c.tn, r.n_neg);
    return r;
  }
  r.balanced_accuracy = balanced_accuracy_of(c);
  r.auroc = auroc(labels, scores);
  return r;
}

std::vector<int> binary_labels(const std::vector<AnnotationRecord>& records) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(binary_label(r.label));
  return out;
}

template <typename T>
std::vector<double> score_records(const AdaptedModel<T>& model, const ImageStore& store,
                                  const std::vector<AnnotationRecord>& records, const PatchSpec& patch) {
  std::vector<double> scores(records.size());
  const RunOptions opts;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto image = normalize(extract_patch(store, records[i], patch).patch, patch);
    std::vector<T> input(image.begin(), image.end());
    const RowVector<T> z = model.logits(input, opts, nullptr);
    // Softmax probability of class 1, stable for large logit gaps.
    const double d = static_cast<double>(z(1)) - static_cast<double>(z(0));
    scores[i] = d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
  }
  return scores;
}

template <typename T>
EvalResult evaluate(const AdaptedModel<T>& model, const ImageStore& store, const std::vector<AnnotationRecord>& records,
                    const PatchSpec& patch, double threshold) {
  if (records.empty()) throw ValidationError("empty test set");
  const auto scores = score_records(model, store, records, patch);
  const auto labels = binary_labels(records);
  return evaluate_scores(labels, scores, threshold);
}

template std::vector<double> score_records(const AdaptedModel<float>&, const ImageStore&,
                                           const std::vector<AnnotationRecord>&, const PatchSpec&);
template std::vector<double> score_records(const AdaptedModel<double>&, const ImageStore&,
                                           const std::vector<AnnotationRecord>&, const PatchSpec&);
template EvalResult evaluate(const AdaptedModel<float>&, const ImageStore&, const std::vector<AnnotationRecord>&,
                             const PatchSpec&, double);
template EvalResult evaluate(const AdaptedModel<double>&, const ImageStore&, const std::vector<AnnotationRecord>&,
                             const PatchSpec&, double);

}  // namespace mitobench
