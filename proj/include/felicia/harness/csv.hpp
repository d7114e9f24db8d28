#pragma once

#include "felicia/core.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace felicia::harness {

// Comma-separated table without quoting; every artifact this library writes fits that shape.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  [[nodiscard]] bool has(const std::string& name) const {
    return std::find(header.begin(), header.end(), name) != header.end();
  }

  [[nodiscard]] std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw InvalidArgument("csv: missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  [[nodiscard]] const std::string& at(std::size_t row, const std::string& name) const {
    return rows.at(row).at(column(name));
  }

  static std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  }

  static CsvTable parse(const std::string& text, const std::string& name = "csv") {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw IoError(name + ": empty file");
    t.header = split(line);
    for (std::size_t n = 2; std::getline(in, line); ++n) {
      if (line.empty()) continue;
      auto cells = split(line);
      if (cells.size() != t.header.size())
        throw IoError(name + ":" + std::to_string(n) + ": expected " + std::to_string(t.header.size()) + " fields");
      t.rows.push_back(std::move(cells));
    }
    return t;
  }

  static CsvTable read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }
};

inline double parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw InvalidArgument("csv: not a number: '" + s + "'");
}

}  // namespace felicia::harness
