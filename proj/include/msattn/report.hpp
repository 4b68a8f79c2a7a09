#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace msattn {

/// A CSV table: header row plus string cells (comma-separated, no quoting).
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;  // throws DataError when absent
  bool has_column(const std::string& name) const;
};

/// Throws DataError on a missing header, ragged rows or quoted fields.
Table read_csv(std::istream& is);
void write_csv(std::ostream& os, const Table& t);

struct Series {
  std::string label;
  std::vector<double> values;  // one per category; NaN leaves a gap
};

struct BarChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::string> categories;
  std::vector<Series> series;
};

/// Groups the numeric `y` columns of every table by the `x` column. Each
/// (table, column) pair becomes one series labelled "<name>:<column>" (just
/// the column when there is one table, just the name when there is one column).
BarChart chart_from_tables(const std::vector<std::pair<std::string, Table>>& tables, const std::string& x,
                           const std::vector<std::string>& y, const std::string& title);

/// Self-contained grouped bar chart; byte-identical for identical input.
std::string render_svg(const BarChart& chart);

}  // namespace msattn
