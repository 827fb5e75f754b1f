#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "pvlab/numerics.hpp"

namespace pvlab {

// ---------------------------------------------------------------------------
// CSV (RFC 4180: CRLF records, fields quoted when they hold a comma, quote,
// CR or LF, quotes doubled).

using CsvField = std::variant<std::string, double, long long>;

// Shortest decimal text that reads back to the same double.
std::string format_double(double v);
std::string csv_escape(const std::string& field);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  void add_row(std::vector<CsvField> row);
  const std::vector<std::string>& header() const { return header_; }
  std::size_t rows() const { return rows_.size(); }
  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Parses RFC 4180 text into records (used by tests and the report step).
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

// ---------------------------------------------------------------------------
// SVG 1.1 figures

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool points = false;  // scatter instead of polyline
  std::vector<double> color_value;  // optional per-point value for scatter colouring
};

class SvgPlot {
 public:
  SvgPlot(std::string title, std::string x_label, std::string y_label);

  SvgPlot& log_y(bool on = true);
  SvgPlot& add(Series s);
  SvgPlot& hline(double y, std::string label);
  SvgPlot& vline(double x, std::string label);
  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::string title_, x_label_, y_label_;
  bool log_y_ = false;
  std::vector<Series> series_;
  std::vector<std::pair<double, std::string>> hlines_, vlines_;
};

// Square heat map of a matrix, optionally on a log10 colour scale.
std::string svg_heatmap(const Matrix& values, const std::string& title, bool log_scale);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace pvlab
