#include "fedq/io.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace fedq::io {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_int(long long v) { return std::to_string(v); }

std::uint64_t fnv1a(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, std::uint64_t config_hash,
                     std::uint64_t seed)
    : out_(path, std::ios::binary) {
  if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(config_hash));
  out_ << "# config_hash=" << buf << " seed=" << seed << "\n";
}

void CsvWriter::comment(const std::string& line) { out_ << "# " << line << "\n"; }

void CsvWriter::header(std::span<const std::string> columns) {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (i) out_ << ',';
    out_ << columns[i];
  }
  out_ << "\n";
}

void CsvWriter::raw_row(const std::string& joined) { out_ << joined << "\n"; }

void write_checkpoint(const std::filesystem::path& path, std::span<const double> values,
                      std::uint64_t seed, long long round) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "# d=" << values.size() << " seed=" << seed << " round=" << round << "\n";
  for (double v : values) out << format_double(v) << "\n";
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::string header;
  std::getline(in, header);
  Checkpoint ck;
  std::size_t d = 0;
  if (std::sscanf(header.c_str(), "# d=%zu seed=%llu round=%lld", &d,
                  reinterpret_cast<unsigned long long*>(&ck.seed), &ck.round) != 3) {
    throw std::runtime_error("malformed checkpoint header: " + path.string());
  }
  ck.values.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (!(in >> ck.values[i])) {
      throw std::runtime_error("truncated checkpoint: " + path.string());
    }
  }
  return ck;
}

namespace {

bool wildcard_match(std::string_view pattern, std::string_view text) {
  std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

}  // namespace

std::vector<std::filesystem::path> glob_files(const std::string& pattern) {
  std::filesystem::path pat(pattern);
  std::filesystem::path dir = pat.parent_path();
  std::string name = pat.filename().string();
  if (dir.empty()) dir = ".";
  std::vector<std::filesystem::path> out;
  if (name.find('*') == std::string::npos && name.find('?') == std::string::npos) {
    if (std::filesystem::exists(pat)) out.push_back(pat);
    return out;
  }
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (wildcard_match(name, entry.path().filename().string())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace fedq::io
