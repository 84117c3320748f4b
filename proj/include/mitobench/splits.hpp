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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mitobench/ingest.hpp"

namespace mitobench {

enum class PlanKind { kScaling, kCrossDomain };

std::string_view to_string(PlanKind kind);  // "scaling" | "crossdomain"
PlanKind parse_plan_kind(std::string_view text);

// The fraction ladder used by the scaling protocol.
inline const std::vector<double> kDefaultFractions{0.001, 0.01, 0.1, 1.0};

struct FoldSpec {
  int fold_index = 0;
  std::vector<std::string> train_cases;  // sorted
  std::vector<std::string> val_cases;    // sorted
  // Fraction -> sorted annotation ids drawn from the training cases.
  std::map<double, std::vector<std::string>> fraction_subsets;
  // Fractions for which the one-per-class floor changed the subset size.
  std::vector<double> class_floor_applied;

  bool operator==(const FoldSpec&) const = default;
};

struct SplitPlan {
  static constexpr int kSchemaVersion = 1;

  PlanKind kind = PlanKind::kScaling;
  std::uint64_t seed = 0;
  std::string dataset;
  double test_fraction = 0.2;
  double val_fraction = 0.2;
  std::vector<double> fractions;
  std::optional<std::string> train_domain;

  // Scaling: the fixed test set. Cross-domain: the in-domain holdout.
  std::vector<std::string> test_cases;
  // Cross-domain only: every case of each remaining domain.
  std::map<std::string, std::vector<std::string>> out_domain_tests;
  std::vector<FoldSpec> folds;

  std::int64_t total_mass = 0;  // annotations in scope (whole manifest or train domain)
  double target_test_mass = 0.0;
  std::int64_t achieved_test_mass = 0;
  std::int64_t max_case_mass = 0;
  // Set when the train domain is too small for a validation split.
  bool minimal = false;

  // Line-delimited JSON: a header line, then one line per role assignment.
  std::string serialize() const;
  static SplitPlan parse(const std::string& text);

  bool operator==(const SplitPlan&) const = default;
};

struct CaseSelection {
  std::vector<std::string> selected;  // sorted
  std::vector<std::string> rest;      // sorted
  double target_mass = 0.0;
  std::int64_t achieved_mass = 0;
};

// Seeded randomized greedy over cases: shuffle, add cases while the selected
// mass is below target, then keep or drop the last case, whichever lands
// closer. With `nonempty_sides` neither side may end up without cases.
CaseSelection select_case_mass(const std::map<std::string, std::int64_t>& case_mass, double target_fraction,
                               Rng& rng, bool nonempty_sides);

struct TestSplit {
  std::vector<std::string> test_cases;
  std::vector<std::string> trainval_cases;
  double target_mass = 0.0;
  std::int64_t achieved_mass = 0;
};

// Case-level test split targeting `target` of all annotations. Throws when
// fewer than two cases exist or when either side would hold no annotations.
TestSplit make_test_split(const DatasetManifest& manifest, double target, std::uint64_t seed);

struct FoldOptions {
  int k = 5;
  double val_fraction = 0.2;
  bool allow_empty_validation = false;
};

// Monte Carlo folds: k independent seeded case-mass draws for validation.
std::vector<FoldSpec> make_folds(const DatasetManifest& manifest, const std::vector<std::string>& trainval_cases,
                                 const FoldOptions& options, std::uint64_t seed);

struct Subsample {
  std::vector<std::string> annotation_ids;  // sorted
  bool class_floor_applied = false;
};

// Label-stratified sample of ceil(fraction * N) (+-1) annotations. For a fixed
// seed the per-class draw order is fixed, so smaller fractions are prefixes of
// larger ones and the ladder is nested.
Subsample subsample_fraction(const std::vector<AnnotationRecord>& pool, double fraction, std::uint64_t seed);

struct ScalingPlanOptions {
  double test_fraction = 0.2;
  FoldOptions folds;
  std::vector<double> fractions = kDefaultFractions;
};

SplitPlan make_scaling_plan(const DatasetManifest& manifest, const ScalingPlanOptions& options, std::uint64_t seed);

struct CrossDomainOptions {
  int runs = 5;
  double holdout = 0.2;
  double val_fraction = 0.2;
};

SplitPlan make_cross_domain_plan(const DatasetManifest& manifest, const std::string& train_domain,
                                 const CrossDomainOptions& options, std::uint64_t seed);

// Annotations of the given cases, in manifest order.
std::vector<AnnotationRecord> records_of_cases(const DatasetManifest& manifest, const std::vector<std::string>& cases);

struct Violation {
  std::string kind;  // "overlap" | "orphan" | "foreign_annotation" | "unknown_case"
  std::string case_id;
  std::string detail;
};

struct LeakageReport {
  std::vector<Violation> violations;
  bool clean() const { return violations.empty(); }
};

LeakageReport verify_no_leakage(const SplitPlan& plan, const DatasetManifest& manifest);

}  // namespace mitobench
