#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gflow {

// Prints a double with 17 significant digits (round-trip exact).
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// UTF-8 comma-separated output, one header row, one row per record.
inline void emit_csv(const std::string& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("emit_csv: cannot open " + path);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out << ',';
    out << header[i];
  }
  out << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size())
      throw std::invalid_argument("emit_csv: row width does not match header");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << format_double(row[i]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("emit_csv: write failed for " + path);
}

}  // namespace gflow
