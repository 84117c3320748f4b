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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mitobench/adapt.hpp"
#include "mitobench/ingest.hpp"

namespace mitobench {

// Labels and predictions are binary with 1 = mitotic figure. All three
// functions throw ValidationError unless both classes are present.
double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions);

// Support-weighted mean of per-class F1; a class whose precision and recall
// are both undefined or zero scores 0.
double weighted_f1(std::span<const int> labels, std::span<const int> predictions);

// Mann-Whitney statistic, ties counted 1/2.
double auroc(std::span<const int> labels, std::span<const double> scores);

struct EvalResult {
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;
  double balanced_accuracy = 0.0;
  double weighted_f1 = 0.0;
  std::optional<double> auroc;
  double threshold = 0.5;
  // Only one class present: AUROC omitted, balanced accuracy reduces to the
  // recall of the present class.
  bool single_class = false;

  bool operator==(const EvalResult&) const = default;
};

// Scores are positive-class probabilities; prediction = score >= threshold.
EvalResult evaluate_scores(std::span<const int> labels, std::span<const double> scores, double threshold = 0.5);

// Positive-class probabilities for the given records, in order, with patches
// extracted without augmentation.
template <typename T>
std::vector<double> score_records(const AdaptedModel<T>& model, const ImageStore& store,
                                  const std::vector<AnnotationRecord>& records, const PatchSpec& patch);

template <typename T>
EvalResult evaluate(const AdaptedModel<T>& model, const ImageStore& store, const std::vector<AnnotationRecord>& records,
                    const PatchSpec& patch, double threshold = 0.5);

std::vector<int> binary_labels(const std::vector<AnnotationRecord>& records);

}  // namespace mitobench
