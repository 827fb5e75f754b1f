#include "pvlab/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "pvlab/errors.hpp"

namespace pvlab {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {
  if (header_.empty()) throw ConfigError("csv table needs at least one column");
}

void CsvTable::add_row(std::vector<CsvField> row) {
  if (row.size() != header_.size()) {
    throw ShapeError("csv row has " + std::to_string(row.size()) + " fields, header has " +
                     std::to_string(header_.size()));
  }
  std::vector<std::string> text;
  for (const auto& f : row) {
    if (const auto* s = std::get_if<std::string>(&f)) {
      text.push_back(*s);
    } else if (const auto* d = std::get_if<double>(&f)) {
      text.push_back(format_double(*d));
    } else {
      text.push_back(std::to_string(std::get<long long>(f)));
    }
  }
  rows_.push_back(std::move(text));
}

std::string CsvTable::str() const {
  std::string out;
  const auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(fields[i]);
    }
    out += "\r\n";
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const { write_text(path, str()); }

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, in_quotes = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty() && !quoted) {
      in_quotes = quoted = any = true;
    } else if (c == ',') {
      record.push_back(std::move(field));
      field.clear();
      quoted = false;
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      record.push_back(std::move(field));
      out.push_back(std::move(record));
      record.clear();
      field.clear();
      quoted = any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (in_quotes) throw FormatError("csv: unterminated quoted field", text.size());
  if (any || !field.empty()) {
    record.push_back(std::move(field));
    out.push_back(std::move(record));
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

// ---------------------------------------------------------------------------
// SVG

namespace {

constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string xml_escape(const std::string& s) {
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

std::string num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

// Viridis-like ramp, t in [0, 1].
std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto r = static_cast<int>(68 + t * (253 - 68));
  const auto g = static_cast<int>(1 + t * (231 - 1));
  const auto b = static_cast<int>(t < 0.5 ? 84 + t * 2 * (140 - 84) : 140 - (t - 0.5) * 2 * (140 - 37));
  std::ostringstream s;
  s << "rgb(" << r << ',' << g << ',' << b << ')';
  return s.str();
}

}  // namespace

SvgPlot::SvgPlot(std::string title, std::string x_label, std::string y_label)
    : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)) {}

SvgPlot& SvgPlot::log_y(bool on) {
  log_y_ = on;
  return *this;
}

SvgPlot& SvgPlot::add(Series s) {
  if (s.x.size() != s.y.size()) throw ShapeError("svg series x/y length mismatch");
  series_.push_back(std::move(s));
  return *this;
}

SvgPlot& SvgPlot::hline(double y, std::string label) {
  hlines_.emplace_back(y, std::move(label));
  return *this;
}

SvgPlot& SvgPlot::vline(double x, std::string label) {
  vlines_.emplace_back(x, std::move(label));
  return *this;
}

std::string SvgPlot::str() const {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  const auto ty = [&](double y) { return log_y_ ? std::log10(std::max(y, 1e-300)) : y; };
  for (const auto& s : series_) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  }
  for (const auto& [y, l] : hlines_) {
    y0 = std::min(y0, ty(y));
    y1 = std::max(y1, ty(y));
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  const auto py = [&](double y) { return kTop + ph - (ty(y) - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << kW << "\" height=\"" << kH
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title_)
    << "</text>\n"
    << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0;
    const double fy = y0 + (y1 - y0) * i / 4.0;
    o << "<text x=\"" << num(px(fx)) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">" << num(fx)
      << "</text>\n";
    const double label = log_y_ ? std::pow(10.0, fy) : fy;
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(kTop + ph - (fy - y0) / (y1 - y0) * ph + 4)
      << "\" text-anchor=\"end\">" << num(label) << "</text>\n";
  }
  o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">" << xml_escape(x_label_)
    << "</text>\n"
    << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << kTop + ph / 2 << ")\">" << xml_escape(y_label_) << (log_y_ ? " (log)" : "") << "</text>\n";
  for (const auto& [y, l] : hlines_) {
    o << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << num(py(y)) << "\" y2=\"" << num(py(y))
      << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (const auto& [x, l] : vlines_) {
    o << "<line x1=\"" << num(px(x)) << "\" x2=\"" << num(px(x)) << "\" y1=\"" << kTop << "\" y2=\"" << kTop + ph
      << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n"
      << "<text x=\"" << num(px(x) + 3) << "\" y=\"" << kTop + 12 << "\" fill=\"gray\">" << xml_escape(l) << "</text>\n";
  }
  for (std::size_t k = 0; k < series_.size(); ++k) {
    const auto& s = series_[k];
    const char* color = kPalette[k % std::size(kPalette)];
    if (s.points) {
      double c0 = 0, c1 = 1;
      if (!s.color_value.empty()) {
        c0 = *std::min_element(s.color_value.begin(), s.color_value.end());
        c1 = *std::max_element(s.color_value.begin(), s.color_value.end());
        if (c1 == c0) c1 = c0 + 1;
      }
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        const std::string fill = s.color_value.empty() ? color : ramp((s.color_value[i] - c0) / (c1 - c0));
        o << "<circle cx=\"" << num(px(s.x[i])) << "\" cy=\"" << num(py(s.y[i])) << "\" r=\"3\" fill=\"" << fill
          << "\"/>\n";
      }
    } else {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        o << num(px(s.x[i])) << ',' << num(py(s.y[i])) << ' ';
      }
      o << "\"/>\n";
    }
    const double ly = kTop + 14 + 16.0 * static_cast<double>(k);
    o << "<rect x=\"" << kW - kRight + 10 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" fill=\"" << color
      << "\"/>\n<text x=\"" << kW - kRight + 24 << "\" y=\"" << ly << "\">" << xml_escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void SvgPlot::write(const std::filesystem::path& path) const { write_text(path, str()); }

std::string svg_heatmap(const Matrix& values, const std::string& title, bool log_scale) {
  const std::size_t n = values.rows(), m = values.cols();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  const auto tv = [&](double v) { return log_scale ? std::log10(std::max(v, 1e-12)) : v; };
  for (float v : values.data()) {
    if (log_scale && v <= 0.0f) continue;
    lo = std::min(lo, tv(v));
    hi = std::max(hi, tv(v));
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi == lo) hi = lo + 1;
  const double cell = std::max(1.0, 480.0 / static_cast<double>(std::max(n, m)));
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << num(cell * m + 40) << "\" height=\""
    << num(cell * n + 60) << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"20\" y=\"20\">" << xml_escape(title) << (log_scale ? " (log10)" : "") << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const float v = values(i, j);
      if (log_scale && v <= 0.0f) continue;
      o << "<rect x=\"" << num(20 + cell * j) << "\" y=\"" << num(40 + cell * i) << "\" width=\"" << num(cell)
        << "\" height=\"" << num(cell) << "\" fill=\"" << ramp((tv(v) - lo) / (hi - lo)) << "\"/>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace pvlab
