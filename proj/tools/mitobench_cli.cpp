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


// Command-line front end: import, split, train, eval, scaling, crossdomain,
// report, plus synth and models helpers.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mitobench/bench.hpp"
#include "mitobench/config.hpp"
#include "mitobench/errors.hpp"
#include "mitobench/report.hpp"
#include "mitobench/splits.hpp"
#include "mitobench/synthetic.hpp"

namespace mb = mitobench;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitPartial = 3;

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mb::IoError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw mb::IoError("cannot write " + path.string());
}

mb::ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? mb::ExperimentConfig{} : mb::load_config(path);
}

std::map<std::string, std::string> parse_weights(const std::vector<std::string>& items) {
  std::map<std::string, std::string> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw mb::ValidationError("--weights expects model=path, got '" + item + "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

struct LoadedManifest {
  mb::DatasetManifest manifest;
  std::unique_ptr<mb::NetpbmImageStore> store;
};

LoadedManifest load_manifest(const std::filesystem::path& path) {
  LoadedManifest out;
  out.manifest = mb::read_manifest(path);
  out.store = std::make_unique<mb::NetpbmImageStore>(mb::resolve_image_root(out.manifest.image_root, path));
  return out;
}

void print_sweep(const mb::SweepReport& r) {
  std::cout << json{{"new_records", r.new_records.size()},
                    {"sessions_run", r.sessions_run},
                    {"sessions_skipped", r.sessions_skipped},
                    {"failures", r.failures.size()},
                    {"skipped_models", r.skipped_models}}
                   .dump()
            << "\n";
  for (const auto& f : r.failures) std::cerr << "failed: " << f.session_id << ": " << f.reason << "\n";
}

std::vector<mb::AdaptMode> parse_modes(const std::vector<std::string>& modes) {
  std::vector<mb::AdaptMode> out;
  for (const auto& m : modes) out.push_back(mb::parse_adapt_mode(m));
  return out;
}

std::vector<mb::AnnotationRecord> records_by_id(const mb::DatasetManifest& m, const std::vector<std::string>& ids) {
  std::vector<mb::AnnotationRecord> out;
  for (const auto& id : ids) out.push_back(m.record(id));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adapter benchmark for mitotic-figure patch classification"};
  app.require_subcommand(1);
  const auto registry = mb::BackboneRegistry::builtin();

  // import
  auto* import_cmd = app.add_subcommand("import", "Convert a COCO or CSV annotation source into a manifest");
  std::string source, mapping, out, image_root;
  import_cmd->add_option("--source", source, "annotation source file")->required();
  import_cmd->add_option("--mapping", mapping, "JSON mapping config")->required();
  import_cmd->add_option("--out", out, "manifest path (.jsonl)")->required();
  import_cmd->add_option("--image-root", image_root, "directory with netpbm images, for dimensions");

  // split
  auto* split_cmd = app.add_subcommand("split", "Generate a case-level split plan");
  std::string manifest_path, kind = "scaling", domain, config_path;
  std::uint64_t seed = 0;
  split_cmd->add_option("--manifest", manifest_path)->required();
  split_cmd->add_option("--kind", kind, "scaling | crossdomain")->check(CLI::IsMember({"scaling", "crossdomain"}));
  split_cmd->add_option("--seed", seed);
  split_cmd->add_option("--domain", domain, "train domain (crossdomain)");
  split_cmd->add_option("--config", config_path);
  split_cmd->add_option("--out", out)->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train and evaluate one session of a plan");
  std::string plan_path, model, mode = "lora", store_path, checkpoint_path;
  int fold = 0;
  double fraction = 1.0;
  std::vector<std::string> weights;
  train_cmd->add_option("--manifest", manifest_path)->required();
  train_cmd->add_option("--plan", plan_path)->required();
  train_cmd->add_option("--model", model)->required();
  train_cmd->add_option("--mode", mode, "probe | lora | full");
  train_cmd->add_option("--fold", fold);
  auto* frac_opt = train_cmd->add_option("--fraction", fraction);
  auto* dom_opt = train_cmd->add_option("--domain", domain, "train domain of a crossdomain plan");
  frac_opt->excludes(dom_opt);
  train_cmd->add_option("--config", config_path);
  train_cmd->add_option("--store", store_path);
  train_cmd->add_option("--checkpoint", checkpoint_path, "write the selected checkpoint here");
  train_cmd->add_option("--weights", weights, "model=path weight overrides");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest of test annotations");
  std::string test_path;
  eval_cmd->add_option("--checkpoint", checkpoint_path)->required();
  eval_cmd->add_option("--test", test_path, "manifest of test annotations")->required();
  eval_cmd->add_option("--store", store_path);

  // scaling / crossdomain
  std::vector<std::string> models, modes{"probe", "lora"};
  int max_sessions = -1;
  auto add_sweep = [&](const char* name, const char* help) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--manifest", manifest_path)->required();
    cmd->add_option("--models", models)->required()->delimiter(',');
    cmd->add_option("--modes", modes)->delimiter(',');
    cmd->add_option("--config", config_path);
    cmd->add_option("--store", store_path)->required();
    cmd->add_option("--weights", weights, "model=path weight overrides");
    cmd->add_option("--max-sessions", max_sessions, "stop after this many new sessions");
    return cmd;
  };
  auto* scaling_cmd = add_sweep("scaling", "Run the dataset-scaling experiment");
  auto* cross_cmd = add_sweep("crossdomain", "Run the cross-domain experiment");

  // report
  auto* report_cmd = app.add_subcommand("report", "Aggregate a results store into tables and plots");
  std::string format = "md", std_kind = "population";
  report_cmd->add_option("--store", store_path)->required();
  report_cmd->add_option("--out", out)->required();
  report_cmd->add_option("--format", format, "md | csv")->check(CLI::IsMember({"md", "csv"}));
  report_cmd->add_option("--std", std_kind)->check(CLI::IsMember({"population", "sample"}));

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic demo dataset");
  mb::SyntheticOptions synth;
  synth_cmd->add_option("--out", out)->required();
  synth_cmd->add_option("--domains", synth.domains);
  synth_cmd->add_option("--cases", synth.cases_per_domain, "cases per domain");
  synth_cmd->add_option("--annotations", synth.annotations_per_case, "annotations per case");
  synth_cmd->add_option("--seed", synth.seed);

  auto* models_cmd = app.add_subcommand("models", "List registered backbones");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*import_cmd) {
      std::unique_ptr<mb::NetpbmImageStore> store;
      if (!image_root.empty()) store = std::make_unique<mb::NetpbmImageStore>(image_root);
      auto result = mb::import_manifest(source, read_text(mapping), store.get());
      mb::write_manifest(result.manifest, out);
      json by_domain = json::object();
      for (const auto& [d, c] : result.report.by_domain) {
        by_domain[d] = {{"mitotic_figure", c.mitotic_figures}, {"hard_negative", c.hard_negatives}};
      }
      std::cout << json{{"records", result.manifest.records.size()},
                        {"mitotic_figure", result.report.totals.mitotic_figures},
                        {"hard_negative", result.report.totals.hard_negatives},
                        {"by_domain", by_domain},
                        {"quarantined", result.report.quarantined.size()}}
                       .dump()
                << "\n";
      for (const auto& q : result.report.quarantined) std::cerr << "quarantined " << q.annotation_id << ": " << q.reason << "\n";
      return 0;
    }
    if (*split_cmd) {
      const auto manifest = mb::read_manifest(manifest_path);
      const auto config = config_or_default(config_path);
      mb::SplitPlan plan;
      if (kind == "scaling") {
        mb::ScalingPlanOptions po;
        po.test_fraction = config.test_fraction;
        po.folds = mb::FoldOptions{config.folds, config.val_fraction, false};
        po.fractions = config.fractions;
        plan = mb::make_scaling_plan(manifest, po, seed);
      } else {
        if (domain.empty()) throw mb::ValidationError("crossdomain split needs --domain");
        plan = mb::make_cross_domain_plan(manifest, domain, {config.runs, config.holdout, config.val_fraction}, seed);
      }
      const auto leaks = mb::verify_no_leakage(plan, manifest);
      if (!leaks.clean()) throw mb::ValidationError("generated plan leaks: " + leaks.violations.front().kind);
      write_text(out, plan.serialize());
      std::cout << json{{"folds", plan.folds.size()},
                        {"test_cases", plan.test_cases.size()},
                        {"target_test_mass", plan.target_test_mass},
                        {"achieved_test_mass", plan.achieved_test_mass},
                        {"minimal", plan.minimal}}
                       .dump()
                << "\n";
      return 0;
    }
    if (*train_cmd) {
      auto data = load_manifest(manifest_path);
      const auto plan = mb::SplitPlan::parse(read_text(plan_path));
      if (const auto leaks = mb::verify_no_leakage(plan, data.manifest); !leaks.clean()) {
        throw mb::ValidationError("plan does not match the manifest: " + leaks.violations.front().kind + " " +
                                  leaks.violations.front().case_id);
      }
      auto config = config_or_default(config_path);
      const auto overrides = parse_weights(weights);
      auto spec = registry.find(model);
      const std::string src = overrides.contains(model) ? overrides.at(model) : spec->weights_source;
      auto backbone = mb::load_weights<float>(spec, src);
      auto it = std::find_if(plan.folds.begin(), plan.folds.end(), [&](const auto& f) { return f.fold_index == fold; });
      if (it == plan.folds.end()) throw mb::ValidationError("plan has no fold " + std::to_string(fold));
      const bool cross = plan.kind == mb::PlanKind::kCrossDomain;
      if (cross && !domain.empty() && domain != *plan.train_domain) {
        throw mb::ValidationError("plan trains on domain '" + *plan.train_domain + "', not '" + domain + "'");
      }
      const double frac = cross ? 1.0 : fraction;
      auto subset = it->fraction_subsets.find(frac);
      if (subset == it->fraction_subsets.end()) throw mb::ValidationError("plan has no subset for that fraction");

      mb::SessionSpec session;
      const auto amode = mb::parse_adapt_mode(mode);
      session.mode = amode;
      session.session_id = cross ? mb::cross_domain_session_id(data.manifest.name, model, amode, *plan.train_domain, fold)
                                 : mb::scaling_session_id(data.manifest.name, model, amode, fold, frac);
      session.train = records_by_id(data.manifest, subset->second);
      session.validation = mb::records_of_cases(data.manifest, it->val_cases);
      session.context = mb::records_of_cases(data.manifest, it->train_cases);
      session.tests[cross ? *plan.train_domain : "test"] = mb::records_of_cases(data.manifest, plan.test_cases);
      for (const auto& [d, cases] : plan.out_domain_tests) session.tests[d] = mb::records_of_cases(data.manifest, cases);
      session.seed = mb::derive_seed(config.seed, session.session_id);
      mb::FeatureCache cache;
      auto outcome = mb::run_session(*backbone, session, config, *data.store, cache, !checkpoint_path.empty());
      if (outcome.checkpoint) {
        outcome.checkpoint->metadata["weights_source"] = src;
        outcome.checkpoint->write(checkpoint_path);
      }
      json results = json::object();
      for (const auto& [name, r] : outcome.results) {
        results[name] = {{"balanced_accuracy", r.balanced_accuracy},
                         {"weighted_f1", r.weighted_f1},
                         {"auroc", r.auroc ? json(*r.auroc) : json(nullptr)}};
        if (store_path.empty()) continue;
        mb::RunRecord rec;
        rec.session_id = session.session_id;
        rec.run_id = cross ? session.session_id + "/test=" + name : session.session_id;
        rec.model = model;
        rec.mode = std::string(mb::to_string(amode));
        rec.dataset = data.manifest.name;
        rec.plan_kind = cross ? "crossdomain" : "scaling";
        rec.fold = fold;
        if (cross) {
          rec.train_domain = plan.train_domain;
          rec.test_domain = name;
          rec.in_domain = name == *plan.train_domain;
        } else {
          rec.fraction = frac;
        }
        rec.seed = session.seed;
        rec.result = r;
        rec.wall_time_s = outcome.wall_time_s;
        rec.train_annotations = static_cast<std::int64_t>(session.train.size());
        rec.best_epoch = outcome.best_epoch;
        rec.config = mb::to_json(config);
        rec.config["model"] = model;
        rec.config["mode"] = rec.mode;
        rec.config["weights_source"] = src;
        rec.config["session_id"] = session.session_id;
        rec.config_digest = mb::config_digest(rec.config);
        mb::ResultsStore(store_path).append(rec);
      }
      std::cout << json{{"session_id", session.session_id}, {"results", results}}.dump() << "\n";
      return 0;
    }
    if (*eval_cmd) {
      const auto archive = mb::TensorArchive::read(checkpoint_path);
      const auto meta = mb::read_checkpoint_meta(archive);
      auto model_obj = mb::model_from_checkpoint<float>(archive, registry);
      auto data = load_manifest(test_path);
      const auto patch = mb::PatchSpec::for_backbone(model_obj.spec());
      const auto r = mb::evaluate(model_obj, *data.store, data.manifest.records, patch);
      if (!store_path.empty()) {
        mb::RunRecord rec;
        rec.session_id = "eval/" + data.manifest.name + "/" + meta.model + "/" + std::string(mb::to_string(meta.mode)) +
                         "/" + mb::to_hex(mb::fnv1a64(read_text(checkpoint_path)));
        rec.run_id = rec.session_id;
        rec.model = meta.model;
        rec.mode = std::string(mb::to_string(meta.mode));
        rec.dataset = data.manifest.name;
        rec.plan_kind = "eval";
        rec.seed = meta.seed;
        rec.result = r;
        rec.config = json::parse(meta.config_json);
        rec.config_digest = mb::config_digest(rec.config);
        mb::ResultsStore(store_path).append(rec);
      }
      std::cout << json{{"n_pos", r.n_pos},
                        {"n_neg", r.n_neg},
                        {"balanced_accuracy", r.balanced_accuracy},
                        {"weighted_f1", r.weighted_f1},
                        {"auroc", r.auroc ? json(*r.auroc) : json(nullptr)},
                        {"single_class", r.single_class}}
                       .dump()
                << "\n";
      return 0;
    }
    if (*scaling_cmd || *cross_cmd) {
      auto data = load_manifest(manifest_path);
      mb::SweepOptions options;
      options.models = models;
      options.modes = parse_modes(modes);
      options.config = config_or_default(config_path);
      options.weights = parse_weights(weights);
      options.registry = &registry;
      options.max_sessions = max_sessions;
      options.log = [](const std::string& msg) { std::cerr << msg << "\n"; };
      for (const auto& m : models) {
        if (!registry.contains(m)) throw mb::ValidationError("unknown backbone '" + m + "'");
      }
      mb::ResultsStore store(store_path);
      const auto report = *scaling_cmd ? mb::run_scaling_experiment(data.manifest, *data.store, options, store)
                                       : mb::run_cross_domain_experiment(data.manifest, *data.store, options, store);
      print_sweep(report);
      return report.partial() ? kExitPartial : 0;
    }
    if (*report_cmd) {
      const auto contents = mb::ResultsStore(store_path).read();
      if (contents.corrupt_lines > 0) std::cerr << "skipped " << contents.corrupt_lines << " corrupt record(s)\n";
      const auto summary = mb::emit_report(contents.records, mb::parse_report_format(format), out,
                                           std_kind == "sample" ? mb::StdEstimator::kSample : mb::StdEstimator::kPopulation);
      for (const auto& f : summary.files) std::cout << f.string() << "\n";
      return 0;
    }
    if (*synth_cmd) {
      const auto path = mb::write_synthetic_dataset(mb::make_synthetic_dataset(synth), out);
      std::cout << path.string() << "\n";
      return 0;
    }
    if (*models_cmd) {
      for (const auto& name : registry.names()) {
        const auto spec = registry.find(name);
        std::cout << name << "\t" << mb::to_string(spec->architecture) << "\tdepth=" << spec->depth
                  << "\twidth=" << spec->width << "\tfeatures=" << spec->feature_dim << "\t"
                  << mb::to_string(spec->embedding_rule) << "\t"
                  << (spec->weights_source.empty() ? "(weights required)" : spec->weights_source) << "\n";
      }
      return 0;
    }
  } catch (const mb::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
