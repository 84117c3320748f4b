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


#include "mitobench/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "mitobench/errors.hpp"

namespace mitobench {
namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string file_safe(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return s;
}

void write_file(const std::filesystem::path& path, const std::string& text, ReportSummary& summary) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
  summary.files.push_back(path);
}

// Viridis-like ramp through five anchors.
std::string ramp(double t) {
  static const double anchors[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::ostringstream s;
  s << "rgb(";
  for (int c = 0; c < 3; ++c) {
    s << static_cast<int>(std::lround(anchors[i][c] + f * (anchors[i + 1][c] - anchors[i][c])));
    s << (c < 2 ? "," : ")");
  }
  return s.str();
}

struct Curve {
  std::string label;
  std::vector<double> x;
  std::map<std::string, std::vector<MetricSummary>> y;
};

std::string scaling_svg(const std::vector<Curve>& curves) {
  const double panel_w = 360, panel_h = 300, left = 55, top = 40, gap = 40;
  const double plot_w = panel_w - left - 15, plot_h = panel_h - top - 50;
  double xmin = 1.0, xmax = 1.0;
  for (const auto& c : curves) {
    for (double x : c.x) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
    }
  }
  double lmin = std::floor(std::log10(xmin)), lmax = std::ceil(std::log10(xmax));
  if (lmax <= lmin) lmax = lmin + 1;
  const double legend_h = 20.0 * static_cast<double>(curves.size()) + 10;
  const double width = 3 * panel_w + 2 * gap, height = panel_h + legend_h;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const std::map<std::string, std::string> titles{
      {"balanced_accuracy", "Balanced accuracy"}, {"weighted_f1", "Weighted F1"}, {"auroc", "AUROC"}};
  for (std::size_t p = 0; p < kMetricNames.size(); ++p) {
    const auto& metric = kMetricNames[p];
    const double ox = static_cast<double>(p) * (panel_w + gap);
    auto px = [&](double x) { return ox + left + (std::log10(x) - lmin) / (lmax - lmin) * plot_w; };
    auto py = [&](double y) { return top + (1.0 - y) * plot_h; };
    s << "<g class=\"panel\" data-metric=\"" << metric << "\">\n";
    s << "<text x=\"" << ox + left + plot_w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << titles.at(metric) << "</text>\n";
    s << "<rect x=\"" << ox + left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\"" << plot_h
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double y = k / 4.0;
      s << "<line x1=\"" << ox + left << "\" x2=\"" << ox + left + plot_w << "\" y1=\"" << py(y) << "\" y2=\"" << py(y)
        << "\" stroke=\"#ddd\"/>\n";
      s << "<text x=\"" << ox + left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fixed(y, 2)
        << "</text>\n";
    }
    for (double e = lmin; e <= lmax; e += 1.0) {
      const double x = std::pow(10.0, e);
      s << "<line x1=\"" << px(x) << "\" x2=\"" << px(x) << "\" y1=\"" << top << "\" y2=\"" << top + plot_h
        << "\" stroke=\"#ddd\"/>\n";
      s << "<text x=\"" << px(x) << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">"
        << fixed(100.0 * x, e < -2 ? 1 : 0) << "%</text>\n";
    }
    s << "<text x=\"" << ox + left + plot_w / 2 << "\" y=\"" << top + plot_h + 36
      << "\" text-anchor=\"middle\">dataset fraction (log scale)</text>\n";
    for (std::size_t c = 0; c < curves.size(); ++c) {
      const auto& curve = curves[c];
      const auto& ys = curve.y.at(metric);
      const char* color = kPalette[c % std::size(kPalette)];
      s << "<g class=\"curve\" data-label=\"" << xml_escape(curve.label) << "\">\n<polyline fill=\"none\" stroke=\""
        << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < curve.x.size(); ++i) {
        if (ys[i].n == 0) continue;
        s << px(curve.x[i]) << ',' << py(ys[i].mean) << ' ';
      }
      s << "\"/>\n";
      for (std::size_t i = 0; i < curve.x.size(); ++i) {
        if (ys[i].n == 0) continue;
        const double x = px(curve.x[i]);
        s << "<line x1=\"" << x << "\" x2=\"" << x << "\" y1=\"" << py(std::min(1.0, ys[i].mean + ys[i].std))
          << "\" y2=\"" << py(std::max(0.0, ys[i].mean - ys[i].std)) << "\" stroke=\"" << color << "\"/>\n";
        s << "<circle class=\"point\" cx=\"" << x << "\" cy=\"" << py(ys[i].mean) << "\" r=\"3.5\" fill=\"" << color
          << "\"/>\n";
      }
      s << "</g>\n";
    }
    s << "</g>\n";
  }
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const double y = panel_h + 15 + 20.0 * static_cast<double>(c);
    s << "<rect x=\"" << left << "\" y=\"" << y - 9 << "\" width=\"14\" height=\"4\" fill=\""
      << kPalette[c % std::size(kPalette)] << "\"/>\n";
    s << "<text x=\"" << left + 20 << "\" y=\"" << y << "\">" << xml_escape(curves[c].label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string matrix_svg(const std::string& label, const std::map<std::string, std::map<std::string, double>>& m,
                       const std::vector<std::string>& tests) {
  const double cell = 64, left = 110, top = 70;
  const double width = left + cell * static_cast<double>(tests.size()) + 20;
  const double height = top + cell * static_cast<double>(m.size()) + 30;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"10\" y=\"20\" font-size=\"14\">Mean AUROC: " << xml_escape(label) << "</text>\n";
  s << "<text x=\"" << left + cell * static_cast<double>(tests.size()) / 2
    << "\" y=\"42\" text-anchor=\"middle\">test domain</text>\n";
  for (std::size_t j = 0; j < tests.size(); ++j) {
    s << "<text x=\"" << left + cell * (static_cast<double>(j) + 0.5) << "\" y=\"" << top - 8
      << "\" text-anchor=\"middle\">" << xml_escape(tests[j]) << "</text>\n";
  }
  std::size_t i = 0;
  for (const auto& [train, row] : m) {
    const double y = top + cell * static_cast<double>(i);
    s << "<text x=\"" << left - 8 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">train "
      << xml_escape(train) << "</text>\n";
    for (std::size_t j = 0; j < tests.size(); ++j) {
      const double x = left + cell * static_cast<double>(j);
      auto it = row.find(tests[j]);
      if (it == row.end()) {
        s << "<rect class=\"cell\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"#eee\" stroke=\"white\"/>\n";
        continue;
      }
      // Color scale spans AUROC 0.5 (chance) to 1.
      const double t = (it->second - 0.5) / 0.5;
      s << "<rect class=\"cell\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
        << "\" fill=\"" << ramp(t) << "\" stroke=\"white\"" << (train == tests[j] ? " stroke-width=\"3\"" : "")
        << "/>\n";
      s << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
        << (t > 0.6 ? "black" : "white") << "\">" << fixed(it->second, 2) << "</text>\n";
    }
    ++i;
  }
  s << "</svg>\n";
  return s.str();
}

std::string matrix_csv(const std::map<std::string, std::map<std::string, double>>& m,
                       const std::vector<std::string>& tests) {
  std::string out = "train_domain";
  for (const auto& t : tests) out += "," + csv_field(t);
  out += "\n";
  for (const auto& [train, row] : m) {
    out += csv_field(train);
    for (const auto& t : tests) {
      auto it = row.find(t);
      out += "," + (it == row.end() ? std::string() : fixed(it->second, 6));
    }
    out += "\n";
  }
  return out;
}

}  // namespace

ReportFormat parse_report_format(std::string_view text) {
  if (text == "md" || text == "markdown") return ReportFormat::kMarkdown;
  if (text == "csv") return ReportFormat::kCsv;
  throw ValidationError("unknown report format '" + std::string(text) + "'");
}

std::string to_csv(const AggregateTable& table) {
  std::string out;
  for (const auto& k : table.group_by) out += k + ",";
  for (std::size_t i = 0; i < table.columns.size(); ++i) {
    out += table.columns[i] + "_mean," + table.columns[i] + "_std," + table.columns[i] + "_n";
    out += i + 1 < table.columns.size() ? "," : "";
  }
  out += "\n";
  for (const auto& row : table.rows) {
    for (const auto& k : row.key) out += csv_field(k) + ",";
    for (std::size_t i = 0; i < table.columns.size(); ++i) {
      const auto& m = row.metrics.at(table.columns[i]);
      if (m.n == 0) out += ",,0";
      else out += fixed(m.mean, 6) + "," + fixed(m.std, 6) + "," + std::to_string(m.n);
      out += i + 1 < table.columns.size() ? "," : "";
    }
    out += "\n";
  }
  return out;
}

std::string to_markdown(const AggregateTable& table) {
  std::string out = "|";
  for (const auto& k : table.group_by) out += " " + k + " |";
  for (const auto& c : table.columns) out += " " + c + " |";
  out += "\n|";
  for (std::size_t i = 0; i < table.group_by.size() + table.columns.size(); ++i) out += "---|";
  out += "\n";
  for (const auto& row : table.rows) {
    out += "|";
    for (const auto& k : row.key) out += " " + k + " |";
    for (const auto& c : table.columns) {
      const auto& m = row.metrics.at(c);
      out += m.n == 0 ? " n/a |" : " " + fixed(m.mean, 3) + " ± " + fixed(m.std, 3) + " |";
    }
    out += "\n";
  }
  for (const auto& note : table.notes) out += "\n_" + note + "_\n";
  return out;
}

ReportSummary emit_report(const std::vector<RunRecord>& records, ReportFormat format,
                          const std::filesystem::path& out_dir, StdEstimator estimator) {
  if (records.empty()) throw ValidationError("results store is empty; nothing to report");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create report directory " + out_dir.string());
  }
  ReportSummary summary;
  std::vector<RunRecord> scaling, cross;
  for (const auto& r : records) {
    if (r.plan_kind == "scaling") scaling.push_back(r);
    else if (r.plan_kind == "crossdomain") cross.push_back(r);
  }
  std::string md = "# Benchmark report\n\n" + std::to_string(records.size()) + " run records.\n";

  if (!scaling.empty()) {
    const auto by_fraction = aggregate(scaling, {"model", "mode", "fraction"}, estimator);
    const auto full = full_data_table(scaling, 1.0, estimator);
    write_file(out_dir / "scaling_by_fraction.csv", to_csv(by_fraction), summary);
    write_file(out_dir / "scaling_full_data.csv", to_csv(full), summary);

    std::map<std::string, Curve> curves;
    for (const auto& row : by_fraction.rows) {
      auto& c = curves[row.key[0] + "/" + row.key[1]];
      c.label = row.key[0] + "/" + row.key[1];
      c.x.push_back(std::stod(row.key[2]));
      for (const auto& m : kMetricNames) c.y[m].push_back(row.metrics.at(m));
    }
    std::vector<Curve> ordered;
    for (auto& [label, c] : curves) {
      // Sort points by fraction.
      std::vector<std::size_t> idx(c.x.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return c.x[a] < c.x[b]; });
      Curve sorted_curve{c.label, {}, {}};
      for (auto i : idx) {
        sorted_curve.x.push_back(c.x[i]);
        for (const auto& m : kMetricNames) sorted_curve.y[m].push_back(c.y[m][i]);
      }
      summary.scaling_curves[label] = sorted_curve.x.size();
      ordered.push_back(std::move(sorted_curve));
    }
    write_file(out_dir / "scaling_curves.svg", scaling_svg(ordered), summary);
    md += "\n## Dataset scaling\n\nResults at 100% of the training data (mean ± std over folds):\n\n" +
          to_markdown(full) + "\nAll fractions:\n\n" + to_markdown(by_fraction) +
          "\n![scaling curves](scaling_curves.svg)\n";
  }

  if (!cross.empty()) {
    const auto summary_table = cross_domain_table(cross, estimator);
    const auto scenarios = aggregate(cross, {"model", "mode", "train_domain", "test_domain"}, estimator);
    write_file(out_dir / "crossdomain_summary.csv", to_csv(summary_table), summary);
    write_file(out_dir / "crossdomain_scenarios.csv", to_csv(scenarios), summary);
    md += "\n## Cross-domain\n\nIn-domain vs out-of-domain, macro-averaged over scenarios:\n\n" +
          to_markdown(summary_table) + "\n";
    std::set<std::pair<std::string, std::string>> model_modes;
    for (const auto& r : cross) model_modes.insert({r.model, r.mode});
    for (const auto& [model, mode] : model_modes) {
      const auto m = cross_domain_matrix(cross, model, mode);
      std::set<std::string> test_set;
      for (const auto& [_, row] : m) {
        for (const auto& [t, __] : row) test_set.insert(t);
      }
      const std::vector<std::string> tests(test_set.begin(), test_set.end());
      const std::string label = model + "/" + mode;
      const std::string stem = "crossdomain_matrix_" + file_safe(model) + "_" + file_safe(mode);
      write_file(out_dir / (stem + ".csv"), matrix_csv(m, tests), summary);
      write_file(out_dir / (stem + ".svg"), matrix_svg(label, m, tests), summary);
      summary.matrices[label] = {m.size(), tests.size()};
      md += "\n![" + label + "](" + stem + ".svg)\n";
    }
  }
  if (format == ReportFormat::kMarkdown) write_file(out_dir / "report.md", md, summary);
  return summary;
}

}  // namespace mitobench
