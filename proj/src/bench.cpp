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


#include "mitobench/bench.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mitobench/errors.hpp"

namespace mitobench {

using nlohmann::json;

namespace {

template <typename V>
json opt(const std::optional<V>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename V>
std::optional<V> get_opt(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<V>();
}

json result_json(const EvalResult& r) {
  return json{{"n_pos", r.n_pos},
              {"n_neg", r.n_neg},
              {"balanced_accuracy", r.balanced_accuracy},
              {"weighted_f1", r.weighted_f1},
              {"auroc", opt(r.auroc)},
              {"threshold", r.threshold},
              {"single_class", r.single_class}};
}

EvalResult result_from_json(const json& j) {
  EvalResult r;
  r.n_pos = j.at("n_pos").get<std::int64_t>();
  r.n_neg = j.at("n_neg").get<std::int64_t>();
  r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
  r.weighted_f1 = j.at("weighted_f1").get<double>();
  r.auroc = get_opt<double>(j, "auroc");
  r.threshold = j.at("threshold").get<double>();
  r.single_class = j.at("single_class").get<bool>();
  return r;
}

std::string format_fraction(double f) {
  std::ostringstream s;
  s << f;
  return s.str();
}

void log_line(const SweepOptions& o, const std::string& msg) {
  if (o.log) o.log(msg);
}

}  // namespace

std::string config_digest(const json& config) { return to_hex(fnv1a64(config.dump())); }

bool config_digest_valid(const RunRecord& record) { return config_digest(record.config) == record.config_digest; }

json RunRecord::to_json() const {
  json j{{"schema_version", kSchemaVersion},
         {"run_id", run_id},
         {"session_id", session_id},
         {"model", model},
         {"mode", mode},
         {"dataset", dataset},
         {"plan_kind", plan_kind},
         {"fold", fold},
         {"fraction", opt(fraction)},
         {"train_domain", opt(train_domain)},
         {"test_domain", opt(test_domain)},
         {"in_domain", opt(in_domain)},
         {"seed", seed},
         {"result", result_json(result)},
         {"wall_time_s", wall_time_s},
         {"train_annotations", train_annotations},
         {"best_epoch", opt(best_epoch)},
         {"config", config},
         {"config_digest", config_digest}};
  j["record_digest"] = to_hex(fnv1a64(j.dump()));
  return j;
}

RunRecord RunRecord::from_json(const json& input) {
  json j = input;
  if (!j.contains("record_digest")) throw IoError("run record lacks its digest");
  const auto digest = j.at("record_digest").get<std::string>();
  j.erase("record_digest");
  if (to_hex(fnv1a64(j.dump())) != digest) throw IoError("run record digest mismatch");
  if (j.at("schema_version").get<int>() != kSchemaVersion) throw IoError("unsupported run record schema_version");
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.session_id = j.at("session_id").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.plan_kind = j.at("plan_kind").get<std::string>();
  r.fold = j.at("fold").get<int>();
  r.fraction = get_opt<double>(j, "fraction");
  r.train_domain = get_opt<std::string>(j, "train_domain");
  r.test_domain = get_opt<std::string>(j, "test_domain");
  r.in_domain = get_opt<bool>(j, "in_domain");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.result = result_from_json(j.at("result"));
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.train_annotations = j.at("train_annotations").get<std::int64_t>();
  r.best_epoch = get_opt<int>(j, "best_epoch");
  r.config = j.at("config");
  r.config_digest = j.at("config_digest").get<std::string>();
  return r;
}

// ---------------------------------------------------------------------------

void ResultsStore::append(const RunRecord& record) {
  const std::string line = record.to_json().dump() + "\n";
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw IoError("cannot open results store " + path_.string() + ": " + std::strerror(errno));
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    throw IoError("cannot lock results store " + path_.string());
  }
  std::size_t done = 0;
  bool ok = true;
  while (done < line.size()) {
    const ssize_t n = ::write(fd, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      ok = false;
      break;
    }
    done += static_cast<std::size_t>(n);
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (!ok) throw IoError("write to results store " + path_.string() + " failed");
}

ResultsStore::Contents ResultsStore::read() const {
  Contents out;
  std::ifstream in(path_, std::ios::binary);
  if (!in) return out;
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t end = text.find('\n', start);
    if (end == std::string::npos) {
      // Unterminated tail: an interrupted append.
      ++out.corrupt_lines;
      break;
    }
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    try {
      out.records.push_back(RunRecord::from_json(json::parse(line)));
    } catch (const std::exception&) {
      ++out.corrupt_lines;
    }
  }
  return out;
}

std::set<std::string> ResultsStore::run_ids() const {
  std::set<std::string> ids;
  for (const auto& r : records()) ids.insert(r.run_id);
  return ids;
}

// ---------------------------------------------------------------------------

SessionOutcome run_session(const Backbone<float>& backbone, const SessionSpec& session, const ExperimentConfig& config,
                           const ImageStore& store, FeatureCache& cache, bool keep_checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  if (session.train.empty()) throw ValidationError("session " + session.session_id + " has an empty training pool");
  SessionOutcome out;
  const PatchSpec patch = PatchSpec::for_backbone(backbone.spec());
  TrainConfig tc = config.train;
  tc.seed = session.seed;
  if (session.validation.empty()) tc.select_best = false;
  LoraConfig lc = config.lora;
  lc.seed = derive_seed(session.seed, "lora");

  auto model = build_model<float>(backbone.clone(), session.mode, lc, config.head_bias, session.seed);
  const bool probe = session.mode == AdaptMode::kLinearProbe;
  if (probe && config.probe_recipe == ProbeRecipe::kLogistic) {
    const Matrix<float> features = cached_embeddings(backbone, store, session.train, patch, cache);
    const auto labels = binary_labels(session.train);
    ProbeFitConfig pf = config.probe_fit;
    pf.add_bias = config.head_bias;
    model.head() = fit_probe<float>(features, labels, pf);
    model.head().weight.trainable = true;
    model.head().bias.trainable = model.head().has_bias;
  } else {
    const TrainData data{&store, session.train, session.validation, session.context, patch};
    auto r = train(model, data, tc, probe ? &cache : nullptr);
    out.best_epoch = r.best.epoch;
    out.trace = std::move(r.trace);
  }

  for (const auto& [name, records] : session.tests) {
    if (probe) {
      const Matrix<float> features = cached_embeddings(backbone, store, records, patch, cache);
      std::vector<double> scores(records.size());
      for (Eigen::Index i = 0; i < features.rows(); ++i) {
        const RowVector<float> z = model.head_logits(features.row(i));
        const double d = static_cast<double>(z(1)) - static_cast<double>(z(0));
        scores[static_cast<std::size_t>(i)] = d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
      }
      out.results[name] = evaluate_scores(binary_labels(records), scores);
    } else {
      out.results[name] = evaluate(model, store, records, patch);
    }
  }
  if (keep_checkpoint) {
    CheckpointMeta meta;
    meta.model = backbone.spec().name;
    meta.weights_source = backbone.spec().weights_source;
    meta.mode = session.mode;
    if (session.mode == AdaptMode::kLora) meta.lora = lc;
    meta.head_bias = model.head().has_bias;
    meta.epoch = out.best_epoch.value_or(0);
    meta.seed = session.seed;
    meta.config_json = to_json(config).dump();
    meta.trace_digest = trace_digest(out.trace);
    out.checkpoint = make_checkpoint_archive(model, meta);
  }
  out.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

std::string scaling_session_id(const std::string& dataset, const std::string& model, AdaptMode mode, int fold,
                               double fraction) {
  return "scaling/" + dataset + "/" + model + "/" + std::string(to_string(mode)) + "/fold" + std::to_string(fold) +
         "/frac" + format_fraction(fraction);
}

std::string cross_domain_session_id(const std::string& dataset, const std::string& model, AdaptMode mode,
                                    const std::string& train_domain, int run) {
  return "crossdomain/" + dataset + "/" + model + "/" + std::string(to_string(mode)) + "/train=" + train_domain +
         "/run" + std::to_string(run);
}

namespace {

struct LoadedModel {
  std::string name;
  std::unique_ptr<Backbone<float>> backbone;
  std::string weights_source;
};

std::vector<LoadedModel> load_models(const SweepOptions& o, SweepReport& report) {
  if (!o.registry) throw ValidationError("sweep needs a backbone registry");
  if (o.models.empty() || o.modes.empty()) throw ValidationError("sweep needs at least one model and one mode");
  std::vector<LoadedModel> out;
  for (const auto& name : o.models) {
    try {
      auto spec = o.registry->find(name);
      auto it = o.weights.find(name);
      const std::string source = it != o.weights.end() ? it->second : spec->weights_source;
      if (source.empty()) throw IoError("no weights available for '" + name + "'");
      out.push_back({name, load_weights<float>(spec, source), source});
    } catch (const std::exception& e) {
      report.skipped_models[name] = e.what();
      log_line(o, "skipping model " + name + ": " + e.what());
    }
  }
  return out;
}

json run_config(const ExperimentConfig& config, const LoadedModel& m, AdaptMode mode, const std::string& session_id) {
  json j = to_json(config);
  j["model"] = m.name;
  j["mode"] = to_string(mode);
  j["weights_source"] = m.weights_source;
  j["weights_checksum"] = to_hex(parameter_checksum(std::as_const(*m.backbone).parameters()));
  j["session_id"] = session_id;
  return j;
}

std::vector<AnnotationRecord> records_by_id(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  std::vector<AnnotationRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(manifest.record(id));
  return out;
}

bool budget_exhausted(const SweepOptions& o, const SweepReport& r) {
  return o.max_sessions >= 0 && r.sessions_run + r.failures.size() >= static_cast<std::size_t>(o.max_sessions);
}

}  // namespace

SweepReport run_scaling_experiment(const DatasetManifest& manifest, const ImageStore& store, const SweepOptions& options,
                                   ResultsStore& results) {
  SweepReport report;
  const auto& config = options.config;
  ScalingPlanOptions po;
  po.test_fraction = config.test_fraction;
  po.folds = FoldOptions{config.folds, config.val_fraction, false};
  po.fractions = config.fractions;
  const SplitPlan plan = make_scaling_plan(manifest, po, config.seed);
  const auto test = records_of_cases(manifest, plan.test_cases);
  const auto existing = results.run_ids();
  auto models = load_models(options, report);

  for (auto& m : models) {
    FeatureCache cache;
    for (AdaptMode mode : options.modes) {
      for (const auto& fold : plan.folds) {
        const auto validation = records_of_cases(manifest, fold.val_cases);
        const auto context = records_of_cases(manifest, fold.train_cases);
        for (double fraction : plan.fractions) {
          const auto sid = scaling_session_id(manifest.name, m.name, mode, fold.fold_index, fraction);
          if (existing.contains(sid)) {
            ++report.sessions_skipped;
            continue;
          }
          if (budget_exhausted(options, report)) return report;
          SessionSpec session;
          session.session_id = sid;
          session.mode = mode;
          session.train = records_by_id(manifest, fold.fraction_subsets.at(fraction));
          session.validation = validation;
          session.context = context;
          session.tests["test"] = test;
          session.seed = derive_seed(config.seed, sid);
          log_line(options, "running " + sid);
          SessionOutcome outcome;
          try {
            outcome = run_session(*m.backbone, session, config, store, cache);
          } catch (const std::exception& e) {
            report.failures.push_back({sid, e.what()});
            log_line(options, "failed " + sid + ": " + e.what());
            continue;
          }
          RunRecord r;
          r.run_id = sid;
          r.session_id = sid;
          r.model = m.name;
          r.mode = std::string(to_string(mode));
          r.dataset = manifest.name;
          r.plan_kind = "scaling";
          r.fold = fold.fold_index;
          r.fraction = fraction;
          r.seed = session.seed;
          r.result = outcome.results.at("test");
          r.wall_time_s = outcome.wall_time_s;
          r.train_annotations = static_cast<std::int64_t>(session.train.size());
          r.best_epoch = outcome.best_epoch;
          r.config = run_config(config, m, mode, sid);
          r.config_digest = config_digest(r.config);
          results.append(r);
          report.new_records.push_back(std::move(r));
          ++report.sessions_run;
        }
      }
    }
  }
  return report;
}

SweepReport run_cross_domain_experiment(const DatasetManifest& manifest, const ImageStore& store,
                                        const SweepOptions& options, ResultsStore& results) {
  SweepReport report;
  const auto& config = options.config;
  const auto domains = manifest.domains();
  if (domains.size() < 2) throw ValidationError("cross-domain experiment needs at least two domains");
  const CrossDomainOptions co{config.runs, config.holdout, config.val_fraction};
  std::map<std::string, SplitPlan> plans;
  for (const auto& d : domains) plans.emplace(d, make_cross_domain_plan(manifest, d, co, config.seed));
  const auto existing = results.run_ids();
  auto models = load_models(options, report);

  for (auto& m : models) {
    FeatureCache cache;
    for (AdaptMode mode : options.modes) {
      for (const auto& [domain, plan] : plans) {
        std::map<std::string, std::vector<AnnotationRecord>> tests;
        tests[domain] = records_of_cases(manifest, plan.test_cases);
        for (const auto& [other, cases] : plan.out_domain_tests) tests[other] = records_of_cases(manifest, cases);
        for (const auto& fold : plan.folds) {
          const auto sid = cross_domain_session_id(manifest.name, m.name, mode, domain, fold.fold_index);
          const bool complete = std::all_of(tests.begin(), tests.end(), [&](const auto& t) {
            return existing.contains(sid + "/test=" + t.first);
          });
          if (complete) {
            ++report.sessions_skipped;
            continue;
          }
          if (budget_exhausted(options, report)) return report;
          SessionSpec session;
          session.session_id = sid;
          session.mode = mode;
          session.train = records_by_id(manifest, fold.fraction_subsets.at(1.0));
          session.validation = records_of_cases(manifest, fold.val_cases);
          session.context = records_of_cases(manifest, fold.train_cases);
          session.tests = tests;
          session.seed = derive_seed(config.seed, sid);
          log_line(options, "running " + sid);
          SessionOutcome outcome;
          try {
            outcome = run_session(*m.backbone, session, config, store, cache);
          } catch (const std::exception& e) {
            report.failures.push_back({sid, e.what()});
            log_line(options, "failed " + sid + ": " + e.what());
            continue;
          }
          const json cfg = run_config(config, m, mode, sid);
          for (const auto& [test_domain, result] : outcome.results) {
            RunRecord r;
            r.run_id = sid + "/test=" + test_domain;
            if (existing.contains(r.run_id)) continue;
            r.session_id = sid;
            r.model = m.name;
            r.mode = std::string(to_string(mode));
            r.dataset = manifest.name;
            r.plan_kind = "crossdomain";
            r.fold = fold.fold_index;
            r.train_domain = domain;
            r.test_domain = test_domain;
            r.in_domain = test_domain == domain;
            r.seed = session.seed;
            r.result = result;
            r.wall_time_s = outcome.wall_time_s;
            r.train_annotations = static_cast<std::int64_t>(session.train.size());
            r.best_epoch = outcome.best_epoch;
            r.config = cfg;
            r.config_digest = config_digest(cfg);
            results.append(r);
            report.new_records.push_back(std::move(r));
          }
          ++report.sessions_run;
        }
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

MetricSummary summarize(std::vector<double> values, StdEstimator estimator) {
  MetricSummary s;
  s.n = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  const double denom = estimator == StdEstimator::kSample ? static_cast<double>(s.n) - 1.0 : static_cast<double>(s.n);
  s.std = denom > 0 ? std::sqrt(sq / denom) : 0.0;
  return s;
}

std::string record_key(const RunRecord& r, const std::string& key) {
  if (key == "model") return r.model;
  if (key == "mode") return r.mode;
  if (key == "dataset") return r.dataset;
  if (key == "plan_kind") return r.plan_kind;
  if (key == "fold") return std::to_string(r.fold);
  if (key == "fraction") return r.fraction ? format_fraction(*r.fraction) : "";
  if (key == "train_domain") return r.train_domain.value_or("");
  if (key == "test_domain") return r.test_domain.value_or("");
  if (key == "scenario") return r.in_domain ? (*r.in_domain ? "in" : "out") : "";
  throw ValidationError("unknown group-by key '" + key + "'");
}

namespace {

std::optional<double> metric_of(const EvalResult& r, const std::string& metric) {
  if (metric == "balanced_accuracy") return r.balanced_accuracy;
  if (metric == "weighted_f1") return r.weighted_f1;
  return r.auroc;
}

}  // namespace

AggregateTable aggregate(const std::vector<RunRecord>& records, const std::vector<std::string>& group_by,
                         StdEstimator estimator) {
  AggregateTable table;
  table.group_by = group_by;
  table.columns = kMetricNames;
  std::map<std::vector<std::string>, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    std::vector<std::string> key;
    for (const auto& k : group_by) key.push_back(record_key(r, k));
    groups[key].push_back(&r);
  }
  for (const auto& [key, members] : groups) {
    AggregateRow row;
    row.key = key;
    for (const auto& metric : kMetricNames) {
      std::vector<double> values;
      for (const auto* r : members) {
        if (auto v = metric_of(r->result, metric)) values.push_back(*v);
      }
      if (values.size() < members.size()) {
        std::string label;
        for (const auto& k : key) label += (label.empty() ? "" : "/") + k;
        table.notes.push_back(metric + " omitted for " + std::to_string(members.size() - values.size()) +
                              " single-class run(s) in " + label);
      }
      row.metrics[metric] = summarize(std::move(values), estimator);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

AggregateTable full_data_table(const std::vector<RunRecord>& records, double fraction, StdEstimator estimator) {
  std::vector<RunRecord> selected;
  for (const auto& r : records) {
    if (r.plan_kind == "scaling" && r.fraction && std::abs(*r.fraction - fraction) < 1e-12) selected.push_back(r);
  }
  auto table = aggregate(selected, {"model", "mode"}, estimator);
  if (table.rows.empty()) table.notes.push_back("no scaling runs at fraction " + format_fraction(fraction));
  return table;
}

AggregateTable cross_domain_table(const std::vector<RunRecord>& records, StdEstimator estimator) {
  // (model, mode) -> scenario (train, test) -> metric -> values
  std::map<std::vector<std::string>, std::map<std::pair<std::string, std::string>, std::map<std::string, std::vector<double>>>>
      cells;
  for (const auto& r : records) {
    if (r.plan_kind != "crossdomain" || !r.train_domain || !r.test_domain) continue;
    auto& scenario = cells[{r.model, r.mode}][{*r.train_domain, *r.test_domain}];
    for (const auto& metric : kMetricNames) {
      if (auto v = metric_of(r.result, metric)) scenario[metric].push_back(*v);
    }
  }
  AggregateTable table;
  table.group_by = {"model", "mode"};
  for (const char* side : {"in_", "out_"}) {
    for (const auto& m : kMetricNames) table.columns.push_back(side + m);
  }
  for (const auto& [key, scenarios] : cells) {
    AggregateRow row;
    row.key = key;
    for (const bool in : {true, false}) {
      for (const auto& metric : kMetricNames) {
        std::vector<double> means;
        for (const auto& [pair, metrics] : scenarios) {
          if ((pair.first == pair.second) != in) continue;
          auto it = metrics.find(metric);
          if (it == metrics.end() || it->second.empty()) continue;
          means.push_back(summarize(it->second, estimator).mean);
        }
        row.metrics[(in ? "in_" : "out_") + metric] = summarize(std::move(means), estimator);
      }
    }
    table.rows.push_back(std::move(row));
  }
  if (table.rows.empty()) table.notes.push_back("no cross-domain runs");
  return table;
}

std::map<std::string, std::map<std::string, double>> cross_domain_matrix(const std::vector<RunRecord>& records,
                                                                         const std::string& model,
                                                                         const std::string& mode) {
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (const auto& r : records) {
    if (r.plan_kind != "crossdomain" || r.model != model || r.mode != mode || !r.train_domain || !r.test_domain) continue;
    if (r.result.auroc) values[*r.train_domain][*r.test_domain].push_back(*r.result.auroc);
  }
  std::map<std::string, std::map<std::string, double>> out;
  for (auto& [train, row] : values) {
    for (auto& [test, v] : row) out[train][test] = summarize(std::move(v)).mean;
  }
  return out;
}

}  // namespace mitobench
