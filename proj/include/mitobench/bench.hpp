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
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mitobench/config.hpp"
#include "mitobench/metrics.hpp"
#include "mitobench/splits.hpp"
#include "mitobench/train.hpp"

namespace mitobench {

struct RunRecord {
  static constexpr int kSchemaVersion = 1;

  std::string run_id;
  std::string session_id;
  std::string model;
  std::string mode;
  std::string dataset;
  std::string plan_kind;  // "scaling" | "crossdomain"
  int fold = 0;
  std::optional<double> fraction;
  std::optional<std::string> train_domain;
  std::optional<std::string> test_domain;
  std::optional<bool> in_domain;
  std::uint64_t seed = 0;
  EvalResult result;
  double wall_time_s = 0.0;
  std::int64_t train_annotations = 0;
  std::optional<int> best_epoch;
  nlohmann::json config;
  std::string config_digest;

  // Includes schema_version and the record digest.
  nlohmann::json to_json() const;
  // Throws IoError when the digest does not match the content.
  static RunRecord from_json(const nlohmann::json& j);
};

std::string config_digest(const nlohmann::json& config);
bool config_digest_valid(const RunRecord& record);

// Append-only line-delimited store. Each append writes one whole line under an
// exclusive file lock, so concurrent writers interleave at record granularity.
class ResultsStore {
 public:
  explicit ResultsStore(std::filesystem::path path) : path_(std::move(path)) {}

  const std::filesystem::path& path() const { return path_; }
  void append(const RunRecord& record);

  struct Contents {
    std::vector<RunRecord> records;
    // Truncated or tampered lines, skipped.
    std::size_t corrupt_lines = 0;
  };
  Contents read() const;
  std::vector<RunRecord> records() const { return read().records; }
  std::set<std::string> run_ids() const;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Sessions and sweeps

struct SessionSpec {
  std::string session_id;
  AdaptMode mode = AdaptMode::kLinearProbe;
  std::vector<AnnotationRecord> train;
  std::vector<AnnotationRecord> validation;
  std::vector<AnnotationRecord> context;
  // Test-set name -> records.
  std::map<std::string, std::vector<AnnotationRecord>> tests;
  std::uint64_t seed = 0;
};

struct SessionOutcome {
  std::map<std::string, EvalResult> results;
  double wall_time_s = 0.0;
  std::optional<int> best_epoch;
  std::vector<TraceEntry> trace;
  std::optional<TensorArchive> checkpoint;
};

// Trains one model on the session's pool and evaluates it on every test set.
// LINEAR_PROBE fits logistic regression on cached embeddings unless the
// config selects the SGD recipe.
SessionOutcome run_session(const Backbone<float>& backbone, const SessionSpec& session, const ExperimentConfig& config,
                           const ImageStore& store, FeatureCache& cache, bool keep_checkpoint = false);

struct SweepOptions {
  std::vector<std::string> models;
  std::vector<AdaptMode> modes;
  ExperimentConfig config;
  // Model name -> weights locator, overriding the registry entry.
  std::map<std::string, std::string> weights;
  const BackboneRegistry* registry = nullptr;
  std::function<void(const std::string&)> log;
  // Stop after this many new sessions; negative means no limit.
  int max_sessions = -1;
};

struct SweepReport {
  std::vector<RunRecord> new_records;
  std::size_t sessions_run = 0;
  std::size_t sessions_skipped = 0;  // already complete in the store
  struct Failure {
    std::string session_id;
    std::string reason;
  };
  std::vector<Failure> failures;
  std::map<std::string, std::string> skipped_models;  // model -> reason

  bool partial() const { return !failures.empty() || !skipped_models.empty(); }
};

std::string scaling_session_id(const std::string& dataset, const std::string& model, AdaptMode mode, int fold,
                               double fraction);
std::string cross_domain_session_id(const std::string& dataset, const std::string& model, AdaptMode mode,
                                    const std::string& train_domain, int run);

// Every (model, mode) gets folds x fractions sessions, each evaluated on the
// fixed test split.
SweepReport run_scaling_experiment(const DatasetManifest& manifest, const ImageStore& store, const SweepOptions& options,
                                   ResultsStore& results);

// Every (model, mode) gets domains x runs sessions, each evaluated on the
// in-domain holdout and every other domain.
SweepReport run_cross_domain_experiment(const DatasetManifest& manifest, const ImageStore& store,
                                        const SweepOptions& options, ResultsStore& results);

// ---------------------------------------------------------------------------
// Aggregation

inline const std::vector<std::string> kMetricNames{"balanced_accuracy", "weighted_f1", "auroc"};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

// Values are summed in sorted order, so the result is independent of input order.
MetricSummary summarize(std::vector<double> values, StdEstimator estimator = StdEstimator::kPopulation);

struct AggregateRow {
  std::vector<std::string> key;
  std::map<std::string, MetricSummary> metrics;
};

struct AggregateTable {
  std::vector<std::string> group_by;
  std::vector<std::string> columns;
  std::vector<AggregateRow> rows;  // sorted by key
  std::vector<std::string> notes;
};

// Group keys: model, mode, dataset, plan_kind, fold, fraction, train_domain,
// test_domain, scenario ("in" | "out").
std::string record_key(const RunRecord& record, const std::string& key);

AggregateTable aggregate(const std::vector<RunRecord>& records, const std::vector<std::string>& group_by,
                         StdEstimator estimator = StdEstimator::kPopulation);

// Rows model+mode, columns the three metrics, scaling runs at `fraction`.
AggregateTable full_data_table(const std::vector<RunRecord>& records, double fraction = 1.0,
                               StdEstimator estimator = StdEstimator::kPopulation);

// Rows model+mode; columns in_/out_ for each metric. Runs are averaged per
// scenario (train domain, test domain) first, then across scenarios.
AggregateTable cross_domain_table(const std::vector<RunRecord>& records,
                                  StdEstimator estimator = StdEstimator::kPopulation);

// train domain -> test domain -> mean AUROC for one model+mode.
std::map<std::string, std::map<std::string, double>> cross_domain_matrix(const std::vector<RunRecord>& records,
                                                                         const std::string& model,
                                                                         const std::string& mode);

}  // namespace mitobench
