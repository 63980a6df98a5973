#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flowlab/common.hpp"

namespace flowlab {

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write file: " + path);
  out << content;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw config_error("");
    return v;
  } catch (...) {
    throw config_error("expected a number for " + what + ", got '" + s + "'");
  }
}

inline long parse_long(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw config_error("");
    return v;
  } catch (...) {
    throw config_error("expected an integer for " + what + ", got '" + s + "'");
  }
}

// Key-value configuration: one `key = value` per line, '#' starts a comment.
// Command lines override file entries through set().
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path) {
    Config c;
    c.merge_file(path);
    return c;
  }

  void merge_file(const std::string& path) {
    const std::string text = read_text_file(path);
    int lineno = 0;
    for (const auto& raw : split(text, '\n')) {
      ++lineno;
      std::string line = raw;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw config_error(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::string require(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw config_error("missing required option --" + key);
    return it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? parse_double(values_.at(key), key) : fallback;
  }
  long get_long(const std::string& key, long fallback) const {
    return has(key) ? parse_long(values_.at(key), key) : fallback;
  }
  int get_int(const std::string& key, int fallback) const {
    return static_cast<int>(get_long(key, fallback));
  }
  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = values_.at(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error("expected true/false for " + key + ", got '" + v + "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// CSV with a versioned schema line followed by the header row. Every cell is
// written explicitly; floats use format_double so output is reproducible.
class CsvWriter {
 public:
  CsvWriter(std::string schema_name, std::vector<std::string> columns)
      : schema_(std::move(schema_name)), columns_(std::move(columns)) {}

  void add_row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_.size())
      throw config_error("csv row width mismatch in schema " + schema_);
    rows_.push_back(cells);
  }

  std::string to_string() const {
    std::ostringstream out;
    out << "# flowlab-csv v1 " << schema_ << "\n";
    for (std::size_t i = 0; i < columns_.size(); ++i)
      out << columns_[i] << (i + 1 < columns_.size() ? "," : "\n");
    for (const auto& row : rows_) {
      for (std::size_t i = 0; i < row.size(); ++i)
        out << row[i] << (i + 1 < row.size() ? "," : "\n");
    }
    return out.str();
  }

  void write(const std::string& path) const { write_text_file(path, to_string()); }

 private:
  std::string schema_;
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string csv_cell(double v) { return format_double(v); }
inline std::string csv_cell(long v) { return std::to_string(v); }
inline std::string csv_cell(int v) { return std::to_string(v); }

// Records artifacts produced by a command together with the seed that made
// them; written as `<relative path>\t<seed>` lines.
class Manifest {
 public:
  void add(const std::string& artifact, std::uint64_t seed) {
    entries_.emplace_back(artifact, seed);
  }
  void write(const std::string& path) const {
    std::ostringstream out;
    for (const auto& [a, s] : entries_) out << a << "\t" << s << "\n";
    write_text_file(path, out.str());
  }

 private:
  std::vector<std::pair<std::string, std::uint64_t>> entries_;
};

}  // namespace flowlab
