#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/error.hpp"
#include "ugeforge/eval.hpp"
#include "ugeforge/publish.hpp"

namespace ugeforge {

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json to_json(const ReportRow& r) {
  return {{"method", r.method},   {"scheme", r.scheme},
          {"role", r.role},       {"network", r.network},
          {"seed", r.seed},       {"test_accuracy", r.test_accuracy},
          {"delta_vs_clean", r.delta_vs_clean}};
}

inline ReportRow report_row_from_json(const nlohmann::json& j) {
  ReportRow r;
  r.method = j.at("method").get<std::string>();
  r.scheme = j.at("scheme").get<std::string>();
  r.role = j.at("role").get<std::string>();
  r.network = j.at("network").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.delta_vs_clean = j.at("delta_vs_clean").get<double>();
  return r;
}

// Canonical form: rows sorted, object keys sorted by the json library.
inline nlohmann::json report_json(const EvaluationReport& report) {
  auto rows = report.rows;
  sort_rows(rows);
  nlohmann::json jr = nlohmann::json::array();
  for (const auto& r : rows) jr.push_back(to_json(r));
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : report.curve)
    curve.push_back({{"rho", p.rho}, {"authorized_accuracy", p.authorized_accuracy}, {"hacker_accuracy", p.hacker_accuracy}});
  return {{"scenario", report.scenario}, {"rows", jr}, {"curve", curve}, {"metadata", report.metadata}};
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
  EvaluationReport r;
  r.scenario = j.at("scenario").get<std::string>();
  for (const auto& row : j.at("rows")) r.rows.push_back(report_row_from_json(row));
  for (const auto& p : j.at("curve")) {
    RhoPoint q;
    q.rho = p.at("rho").get<double>();
    q.authorized_accuracy = p.at("authorized_accuracy").get<double>();
    q.hacker_accuracy = p.at("hacker_accuracy").get<std::map<std::string, double>>();
    r.curve.push_back(std::move(q));
  }
  r.metadata = j.at("metadata");
  return r;
}

inline std::string report_csv(const EvaluationReport& report) {
  auto rows = report.rows;
  sort_rows(rows);
  std::ostringstream os;
  os << "method,scheme,role,network,seed,test_accuracy,delta_vs_clean\n";
  for (const auto& r : rows)
    os << '"' << r.method << "\"," << r.scheme << ',' << r.role << ',' << r.network << ',' << r.seed << ','
       << format_real(r.test_accuracy) << ',' << format_real(r.delta_vs_clean) << '\n';
  return os.str();
}

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

inline std::string fixed(double v, int digits = 1) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                 "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};
  return colors[i % 10];
}

}  // namespace detail

// Grouped bars: one group per method, one bar per (scheme, role, network).
inline std::string accuracy_bars_svg(const EvaluationReport& report) {
  auto rows = report.rows;
  sort_rows(rows);
  std::vector<std::string> methods, series;
  std::map<std::pair<std::string, std::string>, double> value;
  for (const auto& r : rows) {
    const std::string s = r.role + " " + r.network + " " + r.scheme;
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(series.begin(), series.end(), s) == series.end()) series.push_back(s);
    value[{r.method, s}] = r.test_accuracy;
  }
  const double bar = 12, gap = 24, left = 50, top = 20, plot_h = 240;
  const double group_w = bar * series.size() + gap;
  const double width = left + group_w * methods.size() + 20;
  const double height = top + plot_h + 60 + 16 * series.size();
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fixed(width, 0) << "\" height=\""
     << detail::fixed(height, 0) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = top + plot_h * (1.0 - t / 4.0);
    os << "<line x1=\"" << left << "\" x2=\"" << detail::fixed(width - 20, 0) << "\" y1=\"" << detail::fixed(y)
       << "\" y2=\"" << detail::fixed(y) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << detail::fixed(y + 4) << "\" text-anchor=\"end\">" << t * 25
       << "%</text>\n";
  }
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const double gx = left + gap / 2 + m * group_w;
    for (std::size_t s = 0; s < series.size(); ++s) {
      auto it = value.find({methods[m], series[s]});
      if (it == value.end()) continue;
      const double h = plot_h * it->second;
      os << "<rect x=\"" << detail::fixed(gx + s * bar) << "\" y=\"" << detail::fixed(top + plot_h - h)
         << "\" width=\"" << bar - 1 << "\" height=\"" << detail::fixed(h) << "\" fill=\"" << detail::palette(s)
         << "\"/>\n";
    }
    os << "<text x=\"" << detail::fixed(gx + bar * series.size() / 2) << "\" y=\"" << detail::fixed(top + plot_h + 16)
       << "\" text-anchor=\"middle\">" << detail::svg_escape(methods[m]) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = top + plot_h + 40 + 16 * s;
    os << "<rect x=\"" << left << "\" y=\"" << detail::fixed(y - 9) << "\" width=\"10\" height=\"10\" fill=\""
       << detail::palette(s) << "\"/>\n";
    os << "<text x=\"" << left + 16 << "\" y=\"" << detail::fixed(y) << "\">" << detail::svg_escape(series[s])
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Accuracy versus rho: the authorized mean and one line per hacker network.
inline std::string rho_sweep_svg(const EvaluationReport& report) {
  UGE_REQUIRE(!report.curve.empty(), "rho plot: report has no curve");
  auto curve = report.curve;
  std::sort(curve.begin(), curve.end(), [](const RhoPoint& a, const RhoPoint& b) { return a.rho < b.rho; });
  std::map<std::string, std::vector<std::pair<double, double>>> lines;
  for (const auto& p : curve) {
    lines["authorized"].push_back({p.rho, p.authorized_accuracy});
    for (const auto& [k, v] : p.hacker_accuracy) lines["hacker " + k].push_back({p.rho, v});
  }
  const double left = 50, top = 20, w = 360, h = 240;
  const double rmax = std::max(curve.back().rho, 1e-12);
  auto px = [&](double r) { return left + w * r / rmax; };
  auto py = [&](double a) { return top + h * (1.0 - a); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + w + 30 << "\" height=\""
     << top + h + 50 + 16 * lines.size() << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = py(t / 4.0);
    os << "<line x1=\"" << left << "\" x2=\"" << left + w << "\" y1=\"" << detail::fixed(y) << "\" y2=\""
       << detail::fixed(y) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << detail::fixed(y + 4) << "\" text-anchor=\"end\">" << t * 25
       << "%</text>\n";
  }
  for (const auto& p : curve)
    os << "<text x=\"" << detail::fixed(px(p.rho)) << "\" y=\"" << top + h + 16 << "\" text-anchor=\"middle\">"
       << format_real(p.rho) << "</text>\n";
  os << "<text x=\"" << left + w / 2 << "\" y=\"" << top + h + 32 << "\" text-anchor=\"middle\">rho</text>\n";
  std::size_t s = 0;
  for (const auto& [name, pts] : lines) {
    os << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << detail::palette(s) << "\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i)
      os << (i ? " " : "") << detail::fixed(px(pts[i].first)) << ',' << detail::fixed(py(pts[i].second));
    os << "\"/>\n";
    const double y = top + h + 50 + 16 * s;
    os << "<rect x=\"" << left << "\" y=\"" << detail::fixed(y - 9) << "\" width=\"10\" height=\"10\" fill=\""
       << detail::palette(s) << "\"/>\n";
    os << "<text x=\"" << left + 16 << "\" y=\"" << detail::fixed(y) << "\">" << detail::svg_escape(name)
       << "</text>\n";
    ++s;
  }
  os << "</svg>\n";
  return os.str();
}

// report.json, report.csv and plots; all byte-stable for a given report.
// Timings go to timings.json, which is not part of the canonical output.
inline void emit_report(const EvaluationReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  UGE_REQUIRE(!ec && std::filesystem::is_directory(dir), "report: cannot create directory " + dir.string());
  for (const auto& r : report.rows) {
    UGE_REQUIRE(r.test_accuracy >= 0.0 && r.test_accuracy <= 1.0, "report: accuracy outside [0,1] in row " + r.method);
  }
  write_text_file(dir / "report.json", report_json(report).dump(2) + "\n");
  write_text_file(dir / "report.csv", report_csv(report));
  if (!report.rows.empty()) write_text_file(dir / "accuracy.svg", accuracy_bars_svg(report));
  if (!report.curve.empty()) write_text_file(dir / "rho_sweep.svg", rho_sweep_svg(report));
  if (!report.timings.empty()) write_text_file(dir / "timings.json", nlohmann::json(report.timings).dump(2) + "\n");
}

inline EvaluationReport load_report(const std::filesystem::path& dir) {
  return report_from_json(nlohmann::json::parse(read_text_file(dir / "report.json")));
}

}  // namespace ugeforge
