#include "msattn/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "msattn/synth_data.hpp"

namespace msattn {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ls(line);
  while (std::getline(ls, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

bool parse_number(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

std::string escape(const std::string& s) {
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

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Colour-blind safe qualitative palette.
constexpr const char* kPalette[] = {"#0072B2", "#E69F00", "#009E73", "#CC79A7", "#56B4E9", "#D55E00", "#F0E442",
                                    "#000000"};

}  // namespace

std::size_t Table::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw DataError("CSV has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

bool Table::has_column(const std::string& name) const {
  return std::find(header.begin(), header.end(), name) != header.end();
}

Table read_csv(std::istream& is) {
  Table t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    if (line.find('"') != std::string::npos) throw DataError("CSV line " + std::to_string(lineno) + ": quoted fields are not supported");
    auto cells = split_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw DataError("CSV line " + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                      " fields, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw DataError("CSV is empty");
  return t;
}

void write_csv(std::ostream& os, const Table& t) {
  auto row = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << '\n';
  };
  row(t.header);
  for (const auto& r : t.rows) row(r);
}

BarChart chart_from_tables(const std::vector<std::pair<std::string, Table>>& tables, const std::string& x,
                           const std::vector<std::string>& y, const std::string& title) {
  if (tables.empty()) throw DataError("no input tables");
  BarChart c;
  c.title = title;
  c.x_label = x;
  c.y_label = y.size() == 1 ? y.front() : "value";
  for (const auto& [name, t] : tables) {
    const auto xi = t.column(x);
    for (const auto& r : t.rows) {
      if (std::find(c.categories.begin(), c.categories.end(), r[xi]) == c.categories.end()) c.categories.push_back(r[xi]);
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& [name, t] : tables) {
    const auto xi = t.column(x);
    for (const auto& col : y) {
      const auto yi = t.column(col);
      Series s;
      s.label = tables.size() == 1 ? col : (y.size() == 1 ? name : name + ":" + col);
      s.values.assign(c.categories.size(), nan);
      for (const auto& r : t.rows) {
        double v;
        if (!parse_number(r[yi], v)) {
          if (r[yi].empty()) continue;
          throw DataError("column '" + col + "' holds non-numeric value '" + r[yi] + "'");
        }
        const auto ci = std::find(c.categories.begin(), c.categories.end(), r[xi]) - c.categories.begin();
        s.values[static_cast<std::size_t>(ci)] = v;
      }
      c.series.push_back(std::move(s));
    }
  }
  return c;
}

std::string render_svg(const BarChart& c) {
  const double left = 70, right = 20, top = 50, bottom = 70;
  const double group_w = std::max(40.0, 18.0 * static_cast<double>(std::max<std::size_t>(c.series.size(), 1)) + 20.0);
  const double plot_w = group_w * static_cast<double>(std::max<std::size_t>(c.categories.size(), 1));
  const double plot_h = 300;
  const double legend_h = 18.0 * static_cast<double>(c.series.size());
  const double width = left + plot_w + right, height = top + plot_h + bottom + legend_h;

  double lo = 0.0, hi = 0.0;
  for (const auto& s : c.series) {
    for (double v : s.values) {
      if (std::isnan(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi <= lo) hi = lo + 1.0;
  // Round the axis to a 1/2/5 step.
  const double raw = (hi - lo) / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double step = raw / mag <= 1 ? mag : raw / mag <= 2 ? 2 * mag : raw / mag <= 5 ? 5 * mag : 10 * mag;
  lo = std::floor(lo / step) * step;
  hi = std::ceil(hi / step) * step;
  auto ypos = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\"" << fmt(height)
     << "\" viewBox=\"0 0 " << fmt(width) << ' ' << fmt(height) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << fmt(width / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << escape(c.title)
     << "</text>\n";
  for (double t = lo; t <= hi + step * 1e-9; t += step) {
    const double yy = ypos(t);
    os << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(yy) << "\" x2=\"" << fmt(left + plot_w) << "\" y2=\""
       << fmt(yy) << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << fmt(left - 6) << "\" y=\"" << fmt(yy + 4) << "\" text-anchor=\"end\">" << fmt(t)
       << "</text>\n";
  }
  os << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top) << "\" x2=\"" << fmt(left) << "\" y2=\""
     << fmt(top + plot_h) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(ypos(0.0)) << "\" x2=\"" << fmt(left + plot_w) << "\" y2=\""
     << fmt(ypos(0.0)) << "\" stroke=\"black\"/>\n";

  const double bar_w = (group_w - 20.0) / static_cast<double>(std::max<std::size_t>(c.series.size(), 1));
  for (std::size_t g = 0; g < c.categories.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g);
    for (std::size_t s = 0; s < c.series.size(); ++s) {
      const double v = c.series[s].values[g];
      if (std::isnan(v)) continue;
      const double y0 = ypos(std::max(v, 0.0)), y1 = ypos(std::min(v, 0.0));
      os << "<rect x=\"" << fmt(gx + 10 + bar_w * static_cast<double>(s)) << "\" y=\"" << fmt(y0) << "\" width=\""
         << fmt(bar_w) << "\" height=\"" << fmt(y1 - y0) << "\" fill=\"" << kPalette[s % std::size(kPalette)]
         << "\"><title>" << escape(c.series[s].label) << " @ " << escape(c.categories[g]) << ": " << fmt(v)
         << "</title></rect>\n";
    }
    os << "<text x=\"" << fmt(gx + group_w / 2) << "\" y=\"" << fmt(top + plot_h + 16)
       << "\" text-anchor=\"middle\">" << escape(c.categories[g]) << "</text>\n";
  }
  os << "<text x=\"" << fmt(left + plot_w / 2) << "\" y=\"" << fmt(top + plot_h + 38) << "\" text-anchor=\"middle\">"
     << escape(c.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << fmt(top + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(c.y_label) << "</text>\n";
  for (std::size_t s = 0; s < c.series.size(); ++s) {
    const double ly = top + plot_h + 56 + 18.0 * static_cast<double>(s);
    os << "<rect x=\"" << fmt(left) << "\" y=\"" << fmt(ly) << "\" width=\"12\" height=\"12\" fill=\""
       << kPalette[s % std::size(kPalette)] << "\"/>\n";
    os << "<text x=\"" << fmt(left + 18) << "\" y=\"" << fmt(ly + 10) << "\">" << escape(c.series[s].label)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace msattn
