#pragma once

// Flat string key-value records used for config snapshots and checkpoint
// metadata. Numbers are written in shortest round-trip form.

#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "bmm/error.hpp"

namespace bmm {

using KeyValues = std::map<std::string, std::string>;

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& key = "value") {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse '" + s + "' as a number for " + key);
  }
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& key = "value") {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse '" + s + "' as an unsigned integer for " + key);
  }
  return v;
}

template <typename Int>
std::string join_ints(const std::vector<Int>& values, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(values[i]);
  }
  return out;
}

inline std::vector<std::size_t> parse_ints(const std::string& s, const std::string& key = "value",
                                           char sep = ',') {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(parse_u64(item, key));
  return out;
}

inline std::vector<double> parse_doubles(const std::string& s, const std::string& key = "value",
                                         char sep = ',') {
  std::vector<double> out;
  if (s.empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(parse_double(item, key));
  return out;
}

inline const std::string& require_key(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("missing key '" + key + "'");
  return it->second;
}

}  // namespace bmm
