#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfm/core.hpp"

namespace sfm {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shortest text that round-trips a double exactly under %.17g.
inline std::string format_g17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;  // empty when the file had no header row
  Mat<double> values;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool parse_double(const std::string& field, double& out) {
  const char* begin = field.data();
  const char* end = begin + field.size();
  const auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc{} && res.ptr == end;
}

}  // namespace detail

/// Comma-separated numeric table; a non-numeric first row is taken as the
/// header.  Errors carry the file name and the 1-based line number.
inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);

  CsvTable table;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> fields = detail::split_fields(line);
    std::vector<double> row(fields.size());
    bool numeric = true;
    for (std::size_t i = 0; i < fields.size(); ++i)
      if (!detail::parse_double(fields[i], row[i])) {
        numeric = false;
        break;
      }
    if (!numeric) {
      if (lineno == 1 && rows.empty()) {
        table.header = fields;
        width = fields.size();
        continue;
      }
      throw IoError(path + ":" + std::to_string(lineno) + ": expected a numeric field");
    }
    if (width == 0) width = fields.size();
    if (fields.size() != width)
      throw IoError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(width) +
                    " fields, got " + std::to_string(fields.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError(path + ": no data rows");

  table.values.resize(Index(rows.size()), Index(width));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < width; ++j) table.values(Index(i), Index(j)) = rows[i][j];
  return table;
}

inline void write_csv(const std::string& path, const Mat<double>& values,
                      const std::vector<std::string>& header = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  if (!header.empty()) {
    if (Index(header.size()) != values.cols())
      throw std::invalid_argument("write_csv: header width mismatch");
    for (std::size_t j = 0; j < header.size(); ++j)
      out << (j ? "," : "") << header[j];
    out << "\n";
  }
  for (Index i = 0; i < values.rows(); ++i) {
    for (Index j = 0; j < values.cols(); ++j)
      out << (j ? "," : "") << format_g17(values(i, j));
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace sfm
