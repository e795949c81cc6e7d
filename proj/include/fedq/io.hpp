#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Deterministic file output: every double is printed with %.17g (round-trip
// exact), newlines are '\n', and every artifact starts with a header block
// carrying the config hash and seed, so byte-identical reruns are checkable
// with a plain diff.

namespace fedq::io {

std::string format_double(double v);
std::string format_int(long long v);

std::uint64_t fnv1a(std::string_view data);

// CSV with '#'-prefixed header lines. UTF-8, Unix newlines, '.' decimal
// separator.
class CsvWriter {
public:
  CsvWriter(const std::filesystem::path& path, std::uint64_t config_hash, std::uint64_t seed);

  void comment(const std::string& line);
  void header(std::span<const std::string> columns);
  void raw_row(const std::string& joined);
  template <typename... Cells>
  void row(const Cells&... cells) {
    std::string line;
    append_cells(line, cells...);
    raw_row(line);
  }

private:
  static void append_one(std::string& line, double v) { line += format_double(v); }
  static void append_one(std::string& line, int v) { line += std::to_string(v); }
  static void append_one(std::string& line, long long v) { line += std::to_string(v); }
  static void append_one(std::string& line, std::uint64_t v) { line += std::to_string(v); }
  static void append_one(std::string& line, const std::string& v) { line += v; }
  static void append_one(std::string& line, const char* v) { line += v; }
  template <typename T, typename... Rest>
  static void append_cells(std::string& line, const T& first, const Rest&... rest) {
    append_one(line, first);
    if constexpr (sizeof...(rest) > 0) {
      line += ',';
      append_cells(line, rest...);
    }
  }

  std::ofstream out_;
};

// Model checkpoint: one header line "# d=<d> seed=<seed> round=<round>", then
// d values, one per line.
void write_checkpoint(const std::filesystem::path& path, std::span<const double> values,
                      std::uint64_t seed, long long round);

struct Checkpoint {
  std::vector<double> values;
  std::uint64_t seed = 0;
  long long round = 0;
};
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Minimal glob over one directory level: '*' and '?' in the filename part.
std::vector<std::filesystem::path> glob_files(const std::string& pattern);

std::string read_file(const std::filesystem::path& path);

}  // namespace fedq::io
