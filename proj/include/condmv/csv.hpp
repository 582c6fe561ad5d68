#pragma once

#include <condmv/errors.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace condmv::csv
{

// Shortest text that round-trips the double exactly.
inline std::string format(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',')
{
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep))
    out.push_back(cell);
  if (!line.empty() && line.back() == sep)
    out.emplace_back();
  return out;
}

struct Table
{
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

// Reads a numeric CSV with one header row. Lines starting with '#' are skipped.
inline Table read(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in)
    throw InputError("cannot open CSV file " + path.string());
  Table t;
  std::string line;
  bool have_header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.empty() || line.front() == '#')
      continue;
    auto cells = split(line);
    if (!have_header) {
      t.header = cells;
      have_header = true;
      continue;
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(c, &used));
      } catch (const std::exception&) {
        throw InputError(path.string() + ":" + std::to_string(lineno) + ": not a number '" + c + "'");
      }
    }
    if (row.size() != t.header.size())
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(t.header.size()) + " columns");
    t.rows.push_back(std::move(row));
  }
  if (!have_header)
    throw InputError("CSV file " + path.string() + " has no header row");
  return t;
}

class Writer
{
public:
  explicit Writer(const std::filesystem::path& path) : out_(path)
  {
    if (!out_)
      throw InputError("cannot write " + path.string());
  }

  Writer& comment(const std::string& text)
  {
    out_ << "# " << text << '\n';
    return *this;
  }

  Writer& header(const std::vector<std::string>& names)
  {
    for (std::size_t i = 0; i < names.size(); ++i)
      out_ << (i ? "," : "") << names[i];
    out_ << '\n';
    return *this;
  }

  template <class... Ts>
  Writer& row(const Ts&... values)
  {
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(values), first = false), ...);
    out_ << '\n';
    return *this;
  }

private:
  static std::string cell(double v) { return format(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(const std::string& v) { return v; }
  static std::string cell(const char* v) { return v; }

  std::ofstream out_;
};

} // namespace condmv::csv
