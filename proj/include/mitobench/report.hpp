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

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mitobench/bench.hpp"

namespace mitobench {

enum class ReportFormat { kMarkdown, kCsv };

ReportFormat parse_report_format(std::string_view text);  // "md" | "csv"

std::string to_csv(const AggregateTable& table);
std::string to_markdown(const AggregateTable& table);

struct ReportSummary {
  std::vector<std::filesystem::path> files;
  // Curve label (model/mode) -> number of fraction points.
  std::map<std::string, std::size_t> scaling_curves;
  // Matrix label (model/mode) -> (train domains, test domains).
  std::map<std::string, std::pair<std::size_t, std::size_t>> matrices;
};

// Writes CSV tables and SVG plots; the Markdown format adds report.md.
// Throws ValidationError for an empty store before touching the directory.
ReportSummary emit_report(const std::vector<RunRecord>& records, ReportFormat format,
                          const std::filesystem::path& out_dir, StdEstimator estimator = StdEstimator::kPopulation);

}  // namespace mitobench
