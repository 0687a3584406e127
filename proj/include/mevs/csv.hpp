#pragma once

#include <string>
#include <vector>

namespace mevs {

// RFC-4180-style CSV with a required header row. Lines starting with '#'
// are treated as comments and collected separately on read.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> comments;

  int col(const std::string& name) const;  // -1 when absent
  double num(size_t row, int col) const;
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text);

std::string csv_escape(const std::string& field);
// full-precision float formatting that round-trips
std::string format_double(double v);

void write_csv(const std::string& path, const CsvTable& table);

}  // namespace mevs
