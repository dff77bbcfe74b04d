#pragma once

// Static SVG log-log plot of a rates table: one polyline per regularizer
// kind, plus a dashed reference line with the predicted slope anchored at
// each series' first point.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rkhs/error.hpp"
#include "rkhs/experiment.hpp"

namespace rkhs {

struct PlotSeries {
  std::string kind;
  std::vector<std::pair<double, double>> points;  // (n, mean excess)
  std::optional<double> predicted;
};

inline std::vector<PlotSeries> plot_series(const CsvTable& table) {
  const auto& h = table.header();
  auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(h.begin(), h.end(), name);
    if (it == h.end()) return std::nullopt;
    return static_cast<std::size_t>(it - h.begin());
  };
  const auto c_kind = col("kind"), c_n = col("n"), c_mean = col("mean_excess"), c_pred = col("predicted_slope");
  const auto c_hash = col("config_hash");
  if (!c_kind || !c_n || !c_mean) throw FormatError("plot: csv needs kind, n and mean_excess columns");
  std::vector<PlotSeries> out;
  std::string hash;
  for (const auto& row : table.rows()) {
    if (c_hash) {
      if (hash.empty()) hash = row[*c_hash];
      if (row[*c_hash] != hash) throw FormatError("plot: rows from different configurations");
    }
    if (row[*c_mean].empty()) continue;
    double n = 0.0, mean = 0.0;
    try {
      n = std::stod(row[*c_n]);
      mean = std::stod(row[*c_mean]);
    } catch (const std::exception&) {
      throw FormatError("plot: unparsable number in row for kind " + row[*c_kind]);
    }
    if (!(n > 0.0) || !(mean > 0.0)) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const PlotSeries& s) { return s.kind == row[*c_kind]; });
    if (it == out.end()) {
      out.push_back(PlotSeries{row[*c_kind], {}, std::nullopt});
      it = out.end() - 1;
    }
    it->points.emplace_back(n, mean);
    if (c_pred && !row[*c_pred].empty()) it->predicted = std::stod(row[*c_pred]);
  }
  for (auto& s : out) std::sort(s.points.begin(), s.points.end());
  if (out.empty()) throw FormatError("plot: no data rows");
  return out;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline std::string emit_plot(const CsvTable& table) {
  const auto series = plot_series(table);
  constexpr double kWidth = 720, kHeight = 480, kLeft = 80, kRight = 160, kTop = 30, kBottom = 60;
  double x_lo = INFINITY, x_hi = -INFINITY, y_lo = INFINITY, y_hi = -INFINITY;
  for (const auto& s : series)
    for (auto [n, m] : s.points) {
      x_lo = std::min(x_lo, std::log10(n));
      x_hi = std::max(x_hi, std::log10(n));
      y_lo = std::min(y_lo, std::log10(m));
      y_hi = std::max(y_hi, std::log10(m));
    }
  if (x_hi - x_lo < 1e-12) {
    x_lo -= 0.5;
    x_hi += 0.5;
  }
  if (y_hi - y_lo < 1e-12) {
    y_lo -= 0.5;
    y_hi += 0.5;
  }
  const double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;
  auto px = [&](double lx) { return kLeft + (lx - x_lo) / (x_hi - x_lo) * (kWidth - kLeft - kRight); };
  auto py = [&](double ly) { return kTop + (y_hi - ly) / (y_hi - y_lo) * (kHeight - kTop - kBottom); };
  auto f = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::string svg = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f(kWidth) + "\" height=\"" + f(kHeight) +
         "\" viewBox=\"0 0 " + f(kWidth) + " " + f(kHeight) + "\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + f(kWidth) + "\" height=\"" + f(kHeight) + "\" fill=\"white\"/>\n";
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kTop, y1 = kHeight - kBottom;
  svg += "<rect x=\"" + f(x0) + "\" y=\"" + f(y0) + "\" width=\"" + f(x1 - x0) + "\" height=\"" + f(y1 - y0) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  svg += "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int d = static_cast<int>(std::ceil(x_lo - 1e-9)); d <= static_cast<int>(std::floor(x_hi + 1e-9)); ++d) {
    svg += "<line x1=\"" + f(px(d)) + "\" y1=\"" + f(y1) + "\" x2=\"" + f(px(d)) + "\" y2=\"" + f(y1 + 5) +
           "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + f(px(d)) + "\" y=\"" + f(y1 + 18) + "\" text-anchor=\"middle\">1e" + std::to_string(d) +
           "</text>\n";
  }
  for (int d = static_cast<int>(std::ceil(y_lo - 1e-9)); d <= static_cast<int>(std::floor(y_hi + 1e-9)); ++d) {
    svg += "<line x1=\"" + f(x0 - 5) + "\" y1=\"" + f(py(d)) + "\" x2=\"" + f(x0) + "\" y2=\"" + f(py(d)) +
           "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + f(x0 - 8) + "\" y=\"" + f(py(d) + 4) + "\" text-anchor=\"end\">1e" + std::to_string(d) +
           "</text>\n";
  }
  svg += "<text x=\"" + f((x0 + x1) / 2) + "\" y=\"" + f(kHeight - 15) + "\" text-anchor=\"middle\">n</text>\n";
  svg += "<text x=\"20\" y=\"" + f((y0 + y1) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 20 " +
         f((y0 + y1) / 2) + ")\">mean excess risk</text>\n";
  svg += "</g>\n";
  svg += "<clipPath id=\"frame\"><rect x=\"" + f(x0) + "\" y=\"" + f(y0) + "\" width=\"" + f(x1 - x0) +
         "\" height=\"" + f(y1 - y0) + "\"/></clipPath>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const std::string colour = palette[k % std::size(palette)];
    std::string pts;
    for (auto [n, m] : s.points) pts += f(px(std::log10(n))) + "," + f(py(std::log10(m))) + " ";
    if (!pts.empty()) pts.pop_back();
    svg += "<polyline fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (auto [n, m] : s.points)
      svg += "<circle cx=\"" + f(px(std::log10(n))) + "\" cy=\"" + f(py(std::log10(m))) + "\" r=\"3\" fill=\"" +
             colour + "\"/>\n";
    if (s.predicted) {
      const double lx0 = std::log10(s.points.front().first), ly0 = std::log10(s.points.front().second);
      const double ly1 = ly0 + *s.predicted * (x_hi - lx0);
      svg += "<line clip-path=\"url(#frame)\" x1=\"" + f(px(lx0)) + "\" y1=\"" + f(py(ly0)) + "\" x2=\"" +
             f(px(x_hi)) + "\" y2=\"" + f(py(ly1)) + "\" stroke=\"" + colour +
             "\" stroke-dasharray=\"6 4\" stroke-width=\"1\"/>\n";
    }
    const double ly = kTop + 20.0 * static_cast<double>(k) + 10.0;
    svg += "<line x1=\"" + f(x1 + 15) + "\" y1=\"" + f(ly) + "\" x2=\"" + f(x1 + 40) + "\" y2=\"" + f(ly) +
           "\" stroke=\"" + colour + "\" stroke-width=\"2\"/>\n";
    std::string label = s.kind;
    if (s.predicted) {
      char b[32];
      std::snprintf(b, sizeof b, " (ref %.3g)", *s.predicted);
      label += b;
    }
    svg += "<text x=\"" + f(x1 + 45) + "\" y=\"" + f(ly + 4) + "\" font-family=\"sans-serif\" font-size=\"11\">" +
           xml_escape(label) + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace rkhs
