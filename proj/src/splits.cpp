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

#include "mitobench/splits.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mitobench/errors.hpp"

namespace mitobench {

using nlohmann::json;

std::string_view to_string(PlanKind kind) { return kind == PlanKind::kScaling ? "scaling" : "crossdomain"; }

PlanKind parse_plan_kind(std::string_view text) {
  if (text == "scaling") return PlanKind::kScaling;
  if (text == "crossdomain" || text == "cross_domain") return PlanKind::kCrossDomain;
  throw ValidationError("unknown plan kind '" + std::string(text) + "'");
}

namespace {

std::map<std::string, std::int64_t> case_masses(const DatasetManifest& manifest,
                                               const std::vector<std::string>& cases) {
  std::map<std::string, std::int64_t> out;
  for (const auto& c : cases) out[c] = 0;
  for (const auto& r : manifest.records) {
    auto it = out.find(r.case_id);
    if (it != out.end()) ++it->second;
  }
  return out;
}

std::int64_t mass_of(const std::map<std::string, std::int64_t>& masses, const std::vector<std::string>& cases) {
  std::int64_t m = 0;
  for (const auto& c : cases) m += masses.at(c);
  return m;
}

std::vector<std::string> sorted(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  return v;
}

std::int64_t ceil_count(double fraction, std::size_t n) {
  // Guard against representation error such as 0.1 * 30 = 3.0000000000000004.
  return static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

void fill_fractions(FoldSpec& fold, const DatasetManifest& manifest, const std::vector<double>& fractions,
                    std::uint64_t seed) {
  const auto pool = records_of_cases(manifest, fold.train_cases);
  if (pool.empty()) return;
  for (double f : fractions) {
    auto sub = subsample_fraction(pool, f, seed);
    fold.fraction_subsets[f] = std::move(sub.annotation_ids);
    if (sub.class_floor_applied) fold.class_floor_applied.push_back(f);
  }
}

}  // namespace

CaseSelection select_case_mass(const std::map<std::string, std::int64_t>& case_mass, double target_fraction,
                               Rng& rng, bool nonempty_sides) {
  std::vector<std::string> order;
  std::int64_t total = 0;
  for (const auto& [c, m] : case_mass) {
    order.push_back(c);
    total += m;
  }
  shuffle(order, rng);
  CaseSelection out;
  out.target_mass = target_fraction * static_cast<double>(total);

  std::size_t taken = 0;
  std::int64_t mass = 0;
  if (target_fraction >= 1.0) {
    taken = order.size();
    mass = total;
  } else if (target_fraction > 0.0) {
    while (taken < order.size() && static_cast<double>(mass) < out.target_mass) {
      mass += case_mass.at(order[taken++]);
    }
    if (taken > 0) {
      const std::int64_t without = mass - case_mass.at(order[taken - 1]);
      if (std::abs(static_cast<double>(without) - out.target_mass) <
          std::abs(static_cast<double>(mass) - out.target_mass)) {
        --taken;
        mass = without;
      }
    }
  }
  if (nonempty_sides && order.size() >= 2) {
    if (taken == 0) mass += case_mass.at(order[taken++]);
    if (taken == order.size()) mass -= case_mass.at(order[--taken]);
  }
  out.selected = sorted({order.begin(), order.begin() + static_cast<std::ptrdiff_t>(taken)});
  out.rest = sorted({order.begin() + static_cast<std::ptrdiff_t>(taken), order.end()});
  out.achieved_mass = mass;
  return out;
}

TestSplit make_test_split(const DatasetManifest& manifest, double target, std::uint64_t seed) {
  const auto cases = manifest.cases();
  if (cases.size() < 2) throw ValidationError("test split needs at least two cases");
  const auto counts = manifest.counts();
  if (counts.mitotic_figures == 0 || counts.hard_negatives == 0) {
    throw ValidationError("test split needs both labels present");
  }
  if (!(target >= 0.0 && target <= 1.0)) throw ValidationError("test fraction must be in [0, 1]");
  const auto masses = case_masses(manifest, cases);
  Rng rng(seed);
  auto sel = select_case_mass(masses, target, rng, target > 0.0 && target < 1.0);
  TestSplit out{sel.selected, sel.rest, sel.target_mass, sel.achieved_mass};
  if (target > 0.0 && target < 1.0) {
    const std::int64_t rest = counts.total() - sel.achieved_mass;
    if (sel.achieved_mass == 0 || rest == 0) {
      throw ValidationError("degenerate test split: one side holds no annotations (case masses too uneven)");
    }
  }
  return out;
}

std::vector<FoldSpec> make_folds(const DatasetManifest& manifest, const std::vector<std::string>& trainval_cases,
                                 const FoldOptions& options, std::uint64_t seed) {
  if (options.k < 1) throw ValidationError("fold count must be >= 1");
  if (!(options.val_fraction >= 0.0 && options.val_fraction < 1.0)) {
    throw ValidationError("validation fraction must be in [0, 1)");
  }
  if (options.val_fraction == 0.0 && !options.allow_empty_validation) {
    throw ValidationError("empty validation requires allow_empty_validation");
  }
  if (trainval_cases.size() < 2 && options.val_fraction > 0.0) {
    throw ValidationError("folds need at least two train/val cases");
  }
  const auto masses = case_masses(manifest, trainval_cases);
  std::vector<FoldSpec> folds;
  for (int i = 0; i < options.k; ++i) {
    FoldSpec fold;
    fold.fold_index = i;
    if (options.val_fraction == 0.0) {
      fold.train_cases = sorted(trainval_cases);
    } else {
      Rng rng(derive_seed(seed, "fold/" + std::to_string(i)));
      auto sel = select_case_mass(masses, options.val_fraction, rng, true);
      if (sel.achieved_mass == 0 || mass_of(masses, sel.rest) == 0) {
        throw ValidationError("degenerate validation split in fold " + std::to_string(i));
      }
      fold.val_cases = std::move(sel.selected);
      fold.train_cases = std::move(sel.rest);
    }
    folds.push_back(std::move(fold));
  }
  return folds;
}

Subsample subsample_fraction(const std::vector<AnnotationRecord>& pool, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("fraction must be in (0, 1]");
  if (pool.empty()) throw ValidationError("cannot subsample an empty training pool");
  std::vector<std::string> pos, neg;
  for (const auto& r : pool) (r.label == Label::kMitoticFigure ? pos : neg).push_back(r.annotation_id);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  Subsample out;
  if (fraction >= 1.0) {
    out.annotation_ids = pos;
    out.annotation_ids.insert(out.annotation_ids.end(), neg.begin(), neg.end());
    std::sort(out.annotation_ids.begin(), out.annotation_ids.end());
    return out;
  }
  Rng rng_pos(derive_seed(seed, "mitotic_figure"));
  Rng rng_neg(derive_seed(seed, "hard_negative"));
  shuffle(pos, rng_pos);
  shuffle(neg, rng_neg);

  const std::int64_t n = static_cast<std::int64_t>(pool.size());
  const std::int64_t k = std::max<std::int64_t>(1, ceil_count(fraction, pool.size()));
  const auto n_pos = static_cast<std::int64_t>(pos.size());
  const auto n_neg = static_cast<std::int64_t>(neg.size());
  std::int64_t k_pos = std::llround(static_cast<double>(k) * static_cast<double>(n_pos) / static_cast<double>(n));
  k_pos = std::min(k_pos, n_pos);
  std::int64_t k_neg = std::min(k - k_pos, n_neg);
  k_pos = std::min(n_pos, k - k_neg);
  if (n_pos > 0 && k_pos == 0) {
    k_pos = 1;
    out.class_floor_applied = true;
  }
  if (n_neg > 0 && k_neg == 0) {
    k_neg = 1;
    out.class_floor_applied = true;
  }
  out.annotation_ids.assign(pos.begin(), pos.begin() + k_pos);
  out.annotation_ids.insert(out.annotation_ids.end(), neg.begin(), neg.begin() + k_neg);
  std::sort(out.annotation_ids.begin(), out.annotation_ids.end());
  return out;
}

std::vector<AnnotationRecord> records_of_cases(const DatasetManifest& manifest, const std::vector<std::string>& cases) {
  const std::set<std::string> wanted(cases.begin(), cases.end());
  std::vector<AnnotationRecord> out;
  for (const auto& r : manifest.records) {
    if (wanted.contains(r.case_id)) out.push_back(r);
  }
  return out;
}

SplitPlan make_scaling_plan(const DatasetManifest& manifest, const ScalingPlanOptions& options, std::uint64_t seed) {
  for (double f : options.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ValidationError("fractions must lie in (0, 1]");
  }
  SplitPlan plan;
  plan.kind = PlanKind::kScaling;
  plan.seed = seed;
  plan.dataset = manifest.name;
  plan.test_fraction = options.test_fraction;
  plan.val_fraction = options.folds.val_fraction;
  plan.fractions = options.fractions;
  std::sort(plan.fractions.begin(), plan.fractions.end());

  const auto test = make_test_split(manifest, options.test_fraction, derive_seed(seed, "test"));
  plan.test_cases = test.test_cases;
  plan.total_mass = manifest.counts().total();
  plan.target_test_mass = test.target_mass;
  plan.achieved_test_mass = test.achieved_mass;
  for (const auto& [_, m] : case_masses(manifest, manifest.cases())) plan.max_case_mass = std::max(plan.max_case_mass, m);

  plan.folds = make_folds(manifest, test.trainval_cases, options.folds, derive_seed(seed, "folds"));
  for (auto& fold : plan.folds) {
    fill_fractions(fold, manifest, plan.fractions, derive_seed(seed, "fractions/" + std::to_string(fold.fold_index)));
  }
  return plan;
}

SplitPlan make_cross_domain_plan(const DatasetManifest& manifest, const std::string& train_domain,
                                 const CrossDomainOptions& options, std::uint64_t seed) {
  const auto domains = manifest.domains();
  if (domains.size() < 2) throw ValidationError("cross-domain plan needs at least two domains");
  if (std::find(domains.begin(), domains.end(), train_domain) == domains.end()) {
    throw ValidationError("train domain '" + train_domain + "' not present in manifest");
  }
  if (options.runs < 1) throw ValidationError("run count must be >= 1");

  std::map<std::string, std::vector<std::string>> cases_by_domain;
  {
    std::map<std::string, std::set<std::string>> tmp;
    for (const auto& r : manifest.records) tmp[r.domain].insert(r.case_id);
    for (auto& [d, s] : tmp) cases_by_domain[d] = {s.begin(), s.end()};
  }
  const auto& own = cases_by_domain.at(train_domain);
  if (own.size() < 2) throw ValidationError("train domain '" + train_domain + "' has fewer than two cases");

  SplitPlan plan;
  plan.kind = PlanKind::kCrossDomain;
  plan.seed = seed;
  plan.dataset = manifest.name;
  plan.test_fraction = options.holdout;
  plan.val_fraction = options.val_fraction;
  plan.fractions = {1.0};
  plan.train_domain = train_domain;

  const auto masses = case_masses(manifest, own);
  for (const auto& [_, m] : masses) {
    plan.total_mass += m;
    plan.max_case_mass = std::max(plan.max_case_mass, m);
  }
  Rng rng(derive_seed(seed, "holdout/" + train_domain));
  auto holdout = select_case_mass(masses, options.holdout, rng, true);
  plan.test_cases = holdout.selected;
  plan.target_test_mass = holdout.target_mass;
  plan.achieved_test_mass = holdout.achieved_mass;
  for (const auto& [d, cases] : cases_by_domain) {
    if (d != train_domain) plan.out_domain_tests[d] = cases;
  }

  if (holdout.rest.size() >= 2) {
    FoldOptions fo{options.runs, options.val_fraction, options.val_fraction == 0.0};
    plan.folds = make_folds(manifest, holdout.rest, fo, derive_seed(seed, "folds/" + train_domain));
  } else {
    plan.minimal = true;
    for (int i = 0; i < options.runs; ++i) {
      FoldSpec fold;
      fold.fold_index = i;
      fold.train_cases = holdout.rest;
      plan.folds.push_back(std::move(fold));
    }
  }
  for (auto& fold : plan.folds) {
    fill_fractions(fold, manifest, plan.fractions,
                   derive_seed(seed, "fractions/" + train_domain + "/" + std::to_string(fold.fold_index)));
  }
  return plan;
}

// ---------------------------------------------------------------------------

std::string SplitPlan::serialize() const {
  std::ostringstream out;
  json header{{"schema_version", kSchemaVersion},
              {"kind", to_string(kind)},
              {"seed", seed},
              {"dataset", dataset},
              {"test_fraction", test_fraction},
              {"val_fraction", val_fraction},
              {"fractions", fractions},
              {"train_domain", train_domain ? json(*train_domain) : json(nullptr)},
              {"total_mass", total_mass},
              {"target_test_mass", target_test_mass},
              {"achieved_test_mass", achieved_test_mass},
              {"max_case_mass", max_case_mass},
              {"minimal", minimal},
              {"folds", folds.size()}};
  out << header.dump() << '\n';
  out << json{{"role", "test"}, {"cases", test_cases}}.dump() << '\n';
  for (const auto& [domain, cases] : out_domain_tests) {
    out << json{{"role", "out_domain_test"}, {"domain", domain}, {"cases", cases}}.dump() << '\n';
  }
  for (const auto& f : folds) {
    out << json{{"role", "fold"},
                {"fold_index", f.fold_index},
                {"train_cases", f.train_cases},
                {"val_cases", f.val_cases},
                {"class_floor_applied", f.class_floor_applied}}
               .dump()
        << '\n';
    for (const auto& [fraction, ids] : f.fraction_subsets) {
      out << json{{"role", "fraction"}, {"fold_index", f.fold_index}, {"fraction", fraction}, {"annotation_ids", ids}}
                 .dump()
          << '\n';
    }
  }
  return out.str();
}

SplitPlan SplitPlan::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  SplitPlan plan;
  bool have_header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (!have_header) {
        if (j.at("schema_version").get<int>() != kSchemaVersion) {
          throw ValidationError("unsupported plan schema_version");
        }
        plan.kind = parse_plan_kind(j.at("kind").get<std::string>());
        plan.seed = j.at("seed").get<std::uint64_t>();
        plan.dataset = j.at("dataset").get<std::string>();
        plan.test_fraction = j.at("test_fraction").get<double>();
        plan.val_fraction = j.at("val_fraction").get<double>();
        plan.fractions = j.at("fractions").get<std::vector<double>>();
        if (!j.at("train_domain").is_null()) plan.train_domain = j.at("train_domain").get<std::string>();
        plan.total_mass = j.at("total_mass").get<std::int64_t>();
        plan.target_test_mass = j.at("target_test_mass").get<double>();
        plan.achieved_test_mass = j.at("achieved_test_mass").get<std::int64_t>();
        plan.max_case_mass = j.at("max_case_mass").get<std::int64_t>();
        plan.minimal = j.at("minimal").get<bool>();
        have_header = true;
        continue;
      }
      const auto role = j.at("role").get<std::string>();
      if (role == "test") {
        plan.test_cases = j.at("cases").get<std::vector<std::string>>();
      } else if (role == "out_domain_test") {
        plan.out_domain_tests[j.at("domain").get<std::string>()] = j.at("cases").get<std::vector<std::string>>();
      } else if (role == "fold") {
        FoldSpec f;
        f.fold_index = j.at("fold_index").get<int>();
        f.train_cases = j.at("train_cases").get<std::vector<std::string>>();
        f.val_cases = j.at("val_cases").get<std::vector<std::string>>();
        f.class_floor_applied = j.at("class_floor_applied").get<std::vector<double>>();
        plan.folds.push_back(std::move(f));
      } else if (role == "fraction") {
        const int idx = j.at("fold_index").get<int>();
        auto it = std::find_if(plan.folds.begin(), plan.folds.end(), [&](const FoldSpec& f) { return f.fold_index == idx; });
        if (it == plan.folds.end()) throw ValidationError("fraction line precedes its fold");
        it->fraction_subsets[j.at("fraction").get<double>()] = j.at("annotation_ids").get<std::vector<std::string>>();
      } else {
        throw ValidationError("unknown plan role '" + role + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed plan: ") + e.what());
  }
  if (!have_header) throw ValidationError("plan is empty");
  return plan;
}

LeakageReport verify_no_leakage(const SplitPlan& plan, const DatasetManifest& manifest) {
  LeakageReport report;
  const auto all_cases = manifest.cases();
  const std::set<std::string> known(all_cases.begin(), all_cases.end());
  std::map<std::string, std::string> case_of;
  for (const auto& r : manifest.records) case_of[r.annotation_id] = r.case_id;

  // (kind, case) -> fold list, so each offending case is reported once.
  std::map<std::pair<std::string, std::string>, std::vector<std::string>> found;
  auto note = [&](const std::string& kind, const std::string& c, const std::string& where) {
    found[{kind, c}].push_back(where);
  };

  for (const auto& fold : plan.folds) {
    const std::string where = "fold " + std::to_string(fold.fold_index);
    std::map<std::string, std::vector<std::string>> roles_of;
    auto assign = [&](const std::vector<std::string>& cases, const std::string& role) {
      for (const auto& c : cases) roles_of[c].push_back(role);
    };
    assign(plan.test_cases, "test");
    for (const auto& [d, cases] : plan.out_domain_tests) assign(cases, "out_domain_test:" + d);
    assign(fold.train_cases, "train");
    assign(fold.val_cases, "val");
    for (const auto& [c, roles] : roles_of) {
      if (!known.contains(c)) note("unknown_case", c, where);
      if (roles.size() > 1) {
        std::string joined;
        for (const auto& r : roles) joined += (joined.empty() ? "" : "+") + r;
        note("overlap", c, where + " (" + joined + ")");
      }
    }
    for (const auto& c : all_cases) {
      if (!roles_of.contains(c)) note("orphan", c, where);
    }
    const std::set<std::string> train(fold.train_cases.begin(), fold.train_cases.end());
    for (const auto& [fraction, ids] : fold.fraction_subsets) {
      for (const auto& id : ids) {
        auto it = case_of.find(id);
        const std::string c = it == case_of.end() ? "<unknown annotation " + id + ">" : it->second;
        if (it == case_of.end() || !train.contains(c)) note("foreign_annotation", c, where);
      }
    }
  }
  for (auto& [key, wheres] : found) {
    std::sort(wheres.begin(), wheres.end());
    wheres.erase(std::unique(wheres.begin(), wheres.end()), wheres.end());
    std::string detail;
    for (const auto& w : wheres) detail += (detail.empty() ? "" : ", ") + w;
    report.violations.push_back({key.first, key.second, detail});
  }
  return report;
}

}  // namespace mitobench
