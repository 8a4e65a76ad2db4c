#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rsbi/rng.hpp"
#include "rsbi/types.hpp"

namespace rsbi::io {

/// Shortest decimal text that round-trips to the same double.
inline std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double x = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto res = std::from_chars(first, last, x);
  if (res.ec != std::errc{} || res.ptr != last) {
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  }
  return x;
}

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::uint64_t hash_bytes(std::string_view bytes) { return fnv1a64(bytes); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Writes through a temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into '" + path.string() + "': " + ec.message());
}

inline void append_le_doubles(std::string& out, std::span<const double> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 8);
  char* dst = out.data() + start;
  for (const double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      *dst++ = static_cast<char>(bits & 0xffU);
      bits >>= 8;
    }
  }
}

inline void read_le_doubles(std::string_view& in, std::span<double> out) {
  if (in.size() < out.size() * 8) throw IoError("binary block truncated");
  const auto* src = reinterpret_cast<const unsigned char*>(in.data());
  for (auto& v : out) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | src[b];
    v = std::bit_cast<double>(bits);
    src += 8;
  }
  in.remove_prefix(out.size() * 8);
}

/// Ordered "key value" lines terminated by an "end-header" line. Used as the
/// text preamble of every binary artifact.
class TextHeader {
 public:
  void set(std::string key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(std::move(key), std::move(value));
  }

  bool has(std::string_view key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return true;
    return false;
  }

  const std::string& get(std::string_view key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    throw IoError("header is missing key '" + std::string(key) + "'");
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) {
      out += k;
      out += ' ';
      out += v;
      out += '\n';
    }
    out += "end-header\n";
    return out;
  }

  /// Parses a header from the front of `bytes` and advances past it.
  static TextHeader parse(std::string_view& bytes) {
    TextHeader h;
    for (;;) {
      const auto nl = bytes.find('\n');
      if (nl == std::string_view::npos) throw IoError("header not terminated");
      std::string_view line = bytes.substr(0, nl);
      bytes.remove_prefix(nl + 1);
      if (line == "end-header") return h;
      if (line.empty() || line.front() == '#') continue;
      const auto sp = line.find(' ');
      if (sp == std::string_view::npos) {
        h.entries_.emplace_back(std::string(line), std::string());
      } else {
        h.entries_.emplace_back(std::string(line.substr(0, sp)), std::string(line.substr(sp + 1)));
      }
    }
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

inline std::string join_doubles(std::span<const double> v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += format_double(v[i]);
  }
  return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<double> parse_doubles(std::string_view s, char sep = ',') {
  std::vector<double> out;
  if (s.empty()) return out;
  for (const auto& tok : split(s, sep)) out.push_back(parse_double(tok));
  return out;
}

}  // namespace rsbi::io
