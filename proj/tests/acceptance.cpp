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


// Acceptance suite: one PASS/FAIL/SKIP line per criterion. Exits nonzero when
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "mitobench/bench.hpp"
#include "mitobench/config.hpp"
#include "mitobench/report.hpp"
#include "mitobench/splits.hpp"
#include "mitobench/synthetic.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace mitobench {
namespace {

using Clock = std::chrono::steady_clock;

enum class Status { kPass, kFail, kSkip };

struct Outcome {
  Status status = Status::kFail;
  std::string detail;
};

Outcome verdict(bool ok, const std::string& detail) { return {ok ? Status::kPass : Status::kFail, detail}; }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

const BackboneRegistry& registry() {
  static const BackboneRegistry r = BackboneRegistry::builtin();
  return r;
}

std::unique_ptr<Backbone<float>> toy_vit() {
  const auto spec = registry().find("toy-vit");
  return load_weights<float>(spec, spec->weights_source);
}

double max_abs(const RowVector<float>& a, const RowVector<float>& b) {
  return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

// 1. Injected adapters with B = 0 leave the frozen output unchanged.
Outcome zero_init_identity() {
  auto frozen = toy_vit();
  const auto& spec = frozen->spec();
  auto model = inject_lora(frozen->clone(), LoraConfig{}, make_probe_head<float>(spec.feature_dim, true, 1));
  const auto head = model.head();
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto image = testing::random_image<float>(spec, rng);
    const auto z = frozen->embed(image, {}, nullptr);
    worst = std::max(worst, max_abs(model.backbone().embed(image, {}, nullptr), z));
    worst = std::max(worst, max_abs(model.logits(image, {}, nullptr), probe_predict(head, z)));
  }
  return verdict(worst <= 1e-6, "max |diff| " + fmt(worst) + " over 100 inputs (limit 1e-6)");
}

// 2. After 50 training steps the merged weights reproduce the adapter path.
Outcome merge_equivalence() {
  SyntheticOptions so;
  so.cases_per_domain = 4;
  so.annotations_per_case = 25;
  so.seed = 202;
  const auto ds = make_synthetic_dataset(so);
  auto frozen = toy_vit();
  const auto& spec = frozen->spec();
  LoraConfig lora;
  lora.seed = 3;
  auto model = build_model(frozen->clone(), AdaptMode::kLora, lora, true, 4);
  TrainData data;
  data.store = ds.store.get();
  data.train = ds.manifest.records;
  data.patch = PatchSpec::for_backbone(spec);
  TrainConfig cfg;
  cfg.pseudo_epochs = 1;
  cfg.epoch_length = 800;
  cfg.max_lr = 1e-3;
  cfg.select_best = false;
  cfg.seed = 5;
  const auto result = train(model, data, cfg);
  if (result.steps != 50) return verdict(false, "ran " + std::to_string(result.steps) + " steps, expected 50");

  std::vector<std::vector<float>> images;
  std::vector<RowVector<float>> adapted, logits;
  double shift = 0.0;
  for (const auto& r : ds.manifest.records) {
    images.push_back(normalize(extract_patch(*ds.store, r, data.patch).patch, data.patch));
    adapted.push_back(model.backbone().embed(images.back(), {}, nullptr));
    logits.push_back(model.logits(images.back(), {}, nullptr));
    const auto base = frozen->embed(images.back(), {}, nullptr);
    shift = std::max(shift, static_cast<double>((adapted.back() - base).norm() / base.norm()));
  }
  const auto head = model.head();
  const auto merged = merge_lora(model);
  double worst = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto z = merged->embed(images[i], {}, nullptr);
    worst = std::max(worst, max_abs(z, adapted[i]) / static_cast<double>(adapted[i].cwiseAbs().maxCoeff()));
    const auto y = probe_predict(head, z);
    worst = std::max(worst, max_abs(y, logits[i]) / std::max(1e-6, static_cast<double>(logits[i].cwiseAbs().maxCoeff())));
  }
  return verdict(worst <= 1e-5 && shift > 0.0, "max relative diff " + fmt(worst) + " over " +
                                                   std::to_string(images.size()) +
                                                   " inputs (limit 1e-5); adapters moved outputs by up to " +
                                                   fmt(shift));
}

// 3. Analytic gradients of A, B and the head weight against central differences.
Outcome gradient_check() {
  double worst = 0.0;
  std::size_t tensors = 0;
  bool nonzero = true;
  for (const auto& r : testing::lora_gradient_check(303)) {
    worst = std::max(worst, r.relative_error);
    nonzero = nonzero && r.analytic_norm > 0.0;
    ++tensors;
  }
  return verdict(worst <= 1e-4 && nonzero && tensors == 13,
                 "max relative error " + fmt(worst) + " over " + std::to_string(tensors) + " tensors (limit 1e-4)");
}

// 4. Enumerated trainable parameters against the closed form.
Outcome parameter_accounting() {
  Rng rng(404);
  const std::vector<LoraTarget> all{LoraTarget::kQProj, LoraTarget::kKProj, LoraTarget::kVProj,
                                    LoraTarget::kOProj, LoraTarget::kMlpFc1, LoraTarget::kMlpFc2};
  std::ostringstream detail;
  bool ok = true;
  for (int trial = 0; trial < 10; ++trial) {
    const int depth = 1 + static_cast<int>(uniform_index(rng, 4));
    const int d = 8 * (1 + static_cast<int>(uniform_index(rng, 6)));
    const int m = 8 + static_cast<int>(uniform_index(rng, 89));
    const int r = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(std::min(d, m))));
    LoraConfig cfg;
    cfg.rank = r;
    cfg.targets.clear();
    while (cfg.targets.empty()) {
      for (auto t : all) {
        if (bernoulli(rng, 0.5)) cfg.targets.insert(t);
      }
    }
    const auto spec = testing::small_vit("acct", depth, d, 4, m, 4, 16);
    auto model = inject_lora(make_backbone<float>(spec, trial), cfg, make_probe_head<float>(d, true, 1));
    std::int64_t enumerated = 0;
    for (auto* p : model.trainable_parameters()) enumerated += p->size();
    std::int64_t per_block = 0;
    for (auto t : cfg.targets) {
      const bool mlp = t == LoraTarget::kMlpFc1 || t == LoraTarget::kMlpFc2;
      per_block += static_cast<std::int64_t>(r) * (mlp ? d + m : d + d);
    }
    const std::int64_t closed = depth * per_block + 2 * d + 2;
    const bool match = enumerated == closed && lora_parameter_count(*spec, cfg) + 2 * d + 2 == closed;
    ok = ok && match;
    if (!match) detail << " mismatch at trial " << trial << ": " << enumerated << " vs " << closed << ";";
  }
  return verdict(ok, ok ? "10/10 configurations exact" : detail.str());
}

// 5. Metrics against exhaustive and random brute-force oracles.
Outcome metric_oracles() {
  std::size_t exhaustive = 0, mismatches = 0;
  for (int n = 1; n <= 8; ++n) {
    for (unsigned lm = 0; lm < (1u << n); ++lm) {
      std::vector<int> y(n);
      int pos = 0;
      for (int i = 0; i < n; ++i) pos += y[i] = (lm >> i) & 1u;
      if (pos == 0 || pos == n) continue;
      for (unsigned pm = 0; pm < (1u << n); ++pm) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = (pm >> i) & 1u;
        const std::vector<double> s(p.begin(), p.end());
        ++exhaustive;
        mismatches += balanced_accuracy(y, p) != testing::oracle_balanced_accuracy(y, p);
        mismatches += weighted_f1(y, p) != testing::oracle_weighted_f1(y, p);
        mismatches += auroc(y, s) != testing::oracle_auroc(y, s);
      }
    }
  }
  Rng rng(505);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 63));
    std::vector<int> y(n), p(n);
    std::vector<double> s(n);
    for (int i = 0; i < n; ++i) {
      y[i] = bernoulli(rng, 0.35);
      s[i] = t % 2 ? uniform01(rng) : static_cast<double>(uniform_index(rng, 12)) / 11.0;
      p[i] = s[i] >= 0.5;
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(auroc(y, s) - testing::oracle_auroc(y, s)));
    worst = std::max(worst, std::abs(balanced_accuracy(y, p) - testing::oracle_balanced_accuracy(y, p)));
    worst = std::max(worst, std::abs(weighted_f1(y, p) - testing::oracle_weighted_f1(y, p)));
  }
  return verdict(mismatches == 0 && worst <= 1e-12,
                 std::to_string(exhaustive) + " exhaustive cases, " + std::to_string(mismatches) +
                     " inexact; random max |diff| " + fmt(worst) + " (limit 1e-12)");
}

// 6. Split properties on random manifests.
Outcome split_properties() {
  Rng rng(606);
  RandomManifestOptions o;
  o.min_cases = 3;
  std::size_t leaks = 0, mass_off = 0, not_nested = 0, bad_size = 0, not_identical = 0, infeasible = 0,
              unexpected = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = random_manifest(rng, o);
    const std::uint64_t seed = rng();
    SplitPlan plan;
    try {
      plan = make_scaling_plan(m, {}, seed);
    } catch (const ValidationError&) {
      if (make_test_split(m, 0.2, derive_seed(seed, "test")).trainval_cases.size() >= 2) ++unexpected;
      ++infeasible;
      continue;
    }
    leaks += verify_no_leakage(plan, m).violations.size();
    mass_off += std::abs(static_cast<double>(plan.achieved_test_mass) - plan.target_test_mass) >
                static_cast<double>(plan.max_case_mass);
    for (const auto& fold : plan.folds) {
      const double n = static_cast<double>(records_of_cases(m, fold.train_cases).size());
      const std::vector<std::string>* prev = nullptr;
      for (const auto& [f, ids] : fold.fraction_subsets) {
        bad_size += std::abs(static_cast<double>(ids.size()) - std::ceil(f * n - 1e-9)) > 1.0;
        if (prev) not_nested += !std::includes(ids.begin(), ids.end(), prev->begin(), prev->end());
        prev = &ids;
      }
    }
    const auto text = plan.serialize();
    not_identical += make_scaling_plan(m, {}, seed).serialize() != text || SplitPlan::parse(text).serialize() != text;
  }
  const bool ok = leaks + mass_off + not_nested + bad_size + not_identical + unexpected == 0 && infeasible < 20;
  return verdict(ok, "200 manifests: " + std::to_string(leaks) + " leakage violations, " + std::to_string(mass_off) +
                         " test masses off by more than one case, " + std::to_string(not_nested) + " non-nested, " +
                         std::to_string(bad_size) + " off-size subsets, " + std::to_string(not_identical) +
                         " non-identical regenerations, " + std::to_string(infeasible) +
                         " rejected as too few train/val cases, " +
                         std::to_string(unexpected) + " unexpected rejections");
}

// 7. Sampler source frequencies against binomial bounds.
Outcome sampler_statistics() {
  SyntheticOptions so;
  so.cases_per_domain = 4;
  so.annotations_per_case = 10;
  so.image_size = 320;
  so.seed = 707;
  const auto ds = make_synthetic_dataset(so);
  PatchSampler sampler(*ds.store, ds.manifest.records, PatchSpec{}, SamplerPolicy{});
  Rng rng(708);
  const int n = 12800;
  std::array<int, 3> counts{};
  for (int i = 0; i < n; ++i) ++counts[static_cast<int>(sampler.draw(rng).source)];
  const std::array<double, 3> p{0.5, 0.25, 0.25};
  bool ok = true;
  std::ostringstream detail;
  for (int k = 0; k < 3; ++k) {
    const double observed = counts[k] / static_cast<double>(n);
    const double sigma = std::sqrt(p[k] * (1 - p[k]) / n);
    ok = ok && std::abs(observed - p[k]) <= 3 * sigma;
    detail << (k ? ", " : "") << fmt(observed) << " vs " << p[k] << " +- " << fmt(3 * sigma);
  }
  return verdict(ok, detail.str());
}

// 8. Design counts of both sweeps.
Outcome design_counts() {
  testing::TempDir dir("acceptance");
  SweepOptions opts;
  opts.models = {"toy-vit"};
  opts.modes = {AdaptMode::kLinearProbe};
  opts.registry = &registry();
  opts.config.seed = 808;

  SyntheticOptions so;
  so.cases_per_domain = 10;
  so.annotations_per_case = 6;
  so.seed = 809;
  const auto scaling_ds = make_synthetic_dataset(so);
  ResultsStore scaling_store(dir.path() / "scaling.jsonl");
  const auto scaling = run_scaling_experiment(scaling_ds.manifest, *scaling_ds.store, opts, scaling_store);
  const auto scaling_records = scaling_store.records().size();

  so.domains = 5;
  so.cases_per_domain = 5;
  so.annotations_per_case = 4;
  const auto cross_ds = make_synthetic_dataset(so);
  ResultsStore cross_store(dir.path() / "cross.jsonl");
  const auto cross = run_cross_domain_experiment(cross_ds.manifest, *cross_ds.store, opts, cross_store);
  std::map<std::string, int> per_session;
  for (const auto& r : cross_store.records()) ++per_session[r.session_id];
  bool five_each = per_session.size() == 25;
  for (const auto& [s, k] : per_session) five_each = five_each && k == 5;

  const bool ok = scaling_records == 20 && !scaling.partial() && five_each && !cross.partial();
  return verdict(ok, "scaling " + std::to_string(scaling_records) + " records; cross-domain " +
                         std::to_string(per_session.size()) + " sessions" +
                         (five_each ? " with 5 results each" : " with uneven result counts"));
}

// 9. LoRA learns the synthetic intensity rule and is not worse than the probe.
Outcome learnability() {
  SyntheticOptions so;
  so.cases_per_domain = 10;
  so.annotations_per_case = 20;
  so.seed = 7;
  const auto ds = make_synthetic_dataset(so);
  const auto backbone = toy_vit();
  ScalingPlanOptions po;
  po.fractions = {1.0};
  const auto plan = make_scaling_plan(ds.manifest, po, 1);
  const auto& fold = plan.folds[0];
  SessionSpec s;
  s.session_id = "learnability";
  for (const auto& id : fold.fraction_subsets.at(1.0)) s.train.push_back(ds.manifest.record(id));
  s.validation = records_of_cases(ds.manifest, fold.val_cases);
  s.context = records_of_cases(ds.manifest, fold.train_cases);
  s.tests["test"] = records_of_cases(ds.manifest, plan.test_cases);
  s.seed = 5;
  ExperimentConfig c;
  c.train.pseudo_epochs = 25;  // 25 x 80 = 2000 steps
  c.train.max_lr = 1e-4;
  c.train.sampler = {0.5, 0.5, 0.0};
  c.augment_preset = AugmentPreset::kGeometric;
  c.train.augment_policy = augment_policy(c.augment_preset);
  FeatureCache cache;
  s.mode = AdaptMode::kLora;
  const auto lora = run_session(*backbone, s, c, *ds.store, cache);
  s.mode = AdaptMode::kLinearProbe;
  const auto probe = run_session(*backbone, s, c, *ds.store, cache);
  const double a_lora = *lora.results.at("test").auroc;
  const double a_probe = *probe.results.at("test").auroc;
  const bool ok = lora.trace.size() <= 2000 && a_lora >= 0.95 && a_lora >= a_probe;
  return verdict(ok, "LoRA AUROC " + fmt(a_lora) + " after " + std::to_string(lora.trace.size()) +
                         " steps (need >= 0.95 within 2000); probe AUROC " + fmt(a_probe));
}

// 10. Recorded learning rates follow the one-cycle formula exactly.
Outcome schedule_fidelity() {
  SyntheticOptions so;
  so.cases_per_domain = 2;
  so.annotations_per_case = 8;
  so.seed = 1010;
  const auto ds = make_synthetic_dataset(so);
  auto model = build_model(toy_vit(), AdaptMode::kLinearProbe, LoraConfig{}, true, 1);
  TrainData data;
  data.store = ds.store.get();
  data.train = ds.manifest.records;
  data.patch = PatchSpec::for_backbone(model.spec());
  TrainConfig cfg;
  cfg.pseudo_epochs = 10;
  cfg.epoch_length = 160;
  cfg.select_best = false;
  FeatureCache cache;
  const auto result = train(model, data, cfg, &cache);
  std::size_t mismatches = 0;
  for (const auto& t : result.trace) mismatches += t.lr != testing::reference_lr(t.step, 100, 1e-4);
  const bool peak = result.trace.size() == 100 && result.trace[30].lr == 1e-4;
  for (std::int64_t s = 0; s < 8000; ++s) mismatches += one_cycle_lr(s, 8000, 1e-4) != testing::reference_lr(s, 8000, 1e-4);
  const bool ok = mismatches == 0 && peak && one_cycle_lr(2400, 8000, 1e-4) == 1e-4;
  return verdict(ok, std::to_string(result.trace.size()) + "-step trace and 8000-step schedule, " +
                         std::to_string(mismatches) + " mismatches; peak " + (peak ? "exactly 1e-4" : "off"));
}

// 11. Real-data hooks, active only when the assets are supplied.
Outcome paper_hooks() {
  const char* manifest_path = std::getenv("MITOBENCH_PAPER_MANIFEST");
  const char* model = std::getenv("MITOBENCH_PAPER_MODEL");
  const char* weights = std::getenv("MITOBENCH_PAPER_WEIGHTS");
  if (!manifest_path || !model || !weights) {
    return {Status::kSkip,
            "set MITOBENCH_PAPER_MANIFEST, MITOBENCH_PAPER_MODEL and MITOBENCH_PAPER_WEIGHTS to run on real data"};
  }
  const auto manifest = read_manifest(manifest_path);
  NetpbmImageStore store(resolve_image_root(manifest.image_root, manifest_path));
  testing::TempDir dir("paper");
  ResultsStore results(dir.path() / "runs.jsonl");
  SweepOptions opts;
  opts.models = {model};
  opts.modes = {AdaptMode::kLinearProbe, AdaptMode::kLora};
  opts.registry = &registry();
  opts.weights[model] = weights;
  opts.config.fractions = {1.0};
  const auto sweep = run_scaling_experiment(manifest, store, opts, results);
  const auto records = results.records();
  const auto table = full_data_table(records);
  emit_report(records, ReportFormat::kCsv, dir.path() / "report");
  bool ok = !sweep.partial() && table.rows.size() == 2 && table.columns.size() == 3;
  std::string detail = "table rows " + std::to_string(table.rows.size());
  const std::string name = model;
  if (name == "virchow2" || name == "h-optimus-0") {
    for (const auto& row : table.rows) {
      const double a = row.metrics.at("auroc").mean;
      ok = ok && std::abs(a - 0.885) <= 0.035;
      detail += "; " + row.key.back() + " AUROC " + fmt(a) + " (expected 0.88-0.89 +- 0.03)";
    }
  }
  return verdict(ok, detail);
}

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace mitobench

int main() {
  using namespace mitobench;
  const std::vector<Criterion> criteria{
      {1, "lora-zero-init-identity", 10, zero_init_identity},
      {2, "lora-merge-equivalence", 30, merge_equivalence},
      {3, "gradient-check", 60, gradient_check},
      {4, "parameter-accounting", 5, parameter_accounting},
      {5, "metric-oracle-equivalence", 60, metric_oracles},
      {6, "split-properties", 60, split_properties},
      {7, "sampler-statistics", 60, sampler_statistics},
      {8, "design-counts", 600, design_counts},
      {9, "toy-learnability", 900, learnability},
      {10, "schedule-fidelity", 10, schedule_fidelity},
      {11, "paper-hooks", 0, paper_hooks},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Status::kFail, std::string("error: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (o.status == Status::kPass && c.budget_s > 0 && seconds > c.budget_s) {
      o.status = Status::kFail;
      o.detail += "; over the " + fmt(c.budget_s) + " s budget";
    }
    const char* tag = o.status == Status::kPass ? "PASS" : o.status == Status::kSkip ? "SKIP" : "FAIL";
    failures += o.status == Status::kFail;
    std::printf("[%s] %2d %-26s %7.2fs  %s\n", tag, c.id, c.name.c_str(), seconds, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
