#pragma once

// Static figures: SVG line and bar charts, PNG qualitative panels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "partseg/errors.hpp"
#include "partseg/image.hpp"

namespace partseg::plot {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr std::array<const char*, 6> kColors = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 40, kBottom = 70;

inline void header(std::ostringstream& s, const std::string& title) {
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
    << escape(title) << "</text>\n";
}

inline void axes(std::ostringstream& s, double ylo, double yhi, const std::string& xlabel,
                 const std::string& ylabel) {
  const double x0 = kLeft, y0 = kH - kBottom, x1 = kW - kRight, y1 = kTop;
  s << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = ylo + (yhi - ylo) * i / 4.0;
    const double y = y0 - (y0 - y1) * i / 4.0;
    s << "<text x=\"" << x0 - 6 << "\" y=\"" << y + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(v) << "</text>\n";
  }
  s << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kH - 12
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << escape(xlabel) << "</text>\n"
    << "<text x=\"14\" y=\"" << (y0 + y1) / 2 << "\" transform=\"rotate(-90 14 " << (y0 + y1) / 2
    << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << escape(ylabel) << "</text>\n";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

}  // namespace detail

/// Multi-series line chart.
inline std::string line_chart(const std::vector<Series>& series, const std::string& title,
                              const std::string& xlabel, const std::string& ylabel) {
  using namespace detail;
  double xlo = 0, xhi = 1, ylo = 0, yhi = 1;
  bool first = true;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (first) {
        xlo = xhi = x;
        ylo = yhi = y;
        first = false;
      }
      xlo = std::min(xlo, x), xhi = std::max(xhi, x);
      ylo = std::min(ylo, y), yhi = std::max(yhi, y);
    }
  if (xhi == xlo) xhi = xlo + 1;
  if (yhi == ylo) yhi = ylo + 1;
  ylo = std::min(ylo, 0.0);
  std::ostringstream s;
  header(s, title);
  axes(s, ylo, yhi, xlabel, ylabel);
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % kColors.size()];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : series[i].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      s << fmt(kLeft + (x - xlo) / (xhi - xlo) * pw) << ',' << fmt(kH - kBottom - (y - ylo) / (yhi - ylo) * ph)
        << ' ';
    }
    s << "\"/>\n";
    s << "<text x=\"" << kW - kRight - 4 << "\" y=\"" << kTop + 14 * (i + 1)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << color << "\">"
      << escape(series[i].name) << "</text>\n";
  }
  s << "<text x=\"" << kLeft << "\" y=\"" << kH - kBottom + 16 << "\" font-family=\"sans-serif\" font-size=\"11\">"
    << fmt(xlo) << "</text>\n"
    << "<text x=\"" << kW - kRight << "\" y=\"" << kH - kBottom + 16
    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(xhi) << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

/// One bar per (label, value); values are drawn on a [0, max(1, max value)] axis.
inline std::string bar_chart(const std::vector<std::pair<std::string, double>>& bars, const std::string& title,
                             const std::string& xlabel, const std::string& ylabel) {
  using namespace detail;
  double yhi = 1.0;
  for (const auto& b : bars)
    if (std::isfinite(b.second)) yhi = std::max(yhi, b.second);
  std::ostringstream s;
  header(s, title);
  axes(s, 0.0, yhi, xlabel, ylabel);
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const double slot = bars.empty() ? pw : pw / static_cast<double>(bars.size());
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double v = std::isfinite(bars[i].second) ? std::max(0.0, bars[i].second) : 0.0;
    const double h = v / yhi * ph;
    const double x = kLeft + slot * i + slot * 0.15;
    s << "<rect class=\"bar\" x=\"" << fmt(x) << "\" y=\"" << fmt(kH - kBottom - h) << "\" width=\""
      << fmt(slot * 0.7) << "\" height=\"" << fmt(h) << "\" fill=\"" << kColors[0] << "\"/>\n";
    s << "<text x=\"" << fmt(x + slot * 0.35) << "\" y=\"" << fmt(kH - kBottom - h - 4)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(bars[i].second)
      << "</text>\n";
    s << "<text x=\"" << fmt(x + slot * 0.35) << "\" y=\"" << kH - kBottom + 14
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << escape(bars[i].first)
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

inline void write_svg(const std::filesystem::path& path, const std::string& svg) { detail::write_text(path, svg); }

/// Fixed label palette; 0 (background) is black.
inline std::array<double, 3> label_color(int label) {
  static constexpr std::array<std::array<double, 3>, 8> palette = {{{0.0, 0.0, 0.0},
                                                                    {0.90, 0.10, 0.10},
                                                                    {0.10, 0.70, 0.20},
                                                                    {0.15, 0.35, 0.95},
                                                                    {0.95, 0.80, 0.10},
                                                                    {0.80, 0.20, 0.85},
                                                                    {0.10, 0.85, 0.85},
                                                                    {0.95, 0.55, 0.15}}};
  if (label < 0) return {0.5, 0.5, 0.5};
  return palette[static_cast<std::size_t>(label) % palette.size()];
}

inline Image colorize(const LabelMap& labels) {
  Image out(3, labels.height, labels.width);
  for (std::size_t y = 0; y < labels.height; ++y)
    for (std::size_t x = 0; x < labels.width; ++x) {
      const auto c = label_color(labels.at(y, x));
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(ch, y, x) = c[ch];
    }
  return out;
}

/// Side-by-side panels separated by a white gutter.
inline Image hconcat(const std::vector<Image>& panels, std::size_t gutter = 4) {
  if (panels.empty()) throw ArgumentError("no panels");
  std::size_t h = 0, w = 0;
  for (const auto& p : panels) {
    if (p.channels != 3) throw ArgumentError("panels must be RGB");
    h = std::max(h, p.height);
    w += p.width;
  }
  w += gutter * (panels.size() - 1);
  Image out(3, h, w, 1.0);
  std::size_t x0 = 0;
  for (const auto& p : panels) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < p.height; ++y)
        for (std::size_t x = 0; x < p.width; ++x) out.at(c, y, x0 + x) = p.at(c, y, x);
    x0 += p.width + gutter;
  }
  return out;
}

/// image | ground truth | prediction.
inline Image qualitative_panel(const Image& image, const LabelMap& gt, const LabelMap& pred) {
  return hconcat({image, colorize(gt), colorize(pred)});
}

}  // namespace partseg::plot
