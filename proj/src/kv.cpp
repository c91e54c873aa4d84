#include <charconv>
#include <cstdio>
#include <sstream>

#include "takunet/kv.hpp"

namespace taku {

std::string kv_trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = kv_trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = kv_trim(line.substr(0, eq));
    std::string val = kv_trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    if (seen.count(key)) throw std::invalid_argument("config: duplicate key '" + key + "'");
    seen[key] = lineno;
    out.emplace_back(std::move(key), std::move(val));
  }
  return out;
}

bool kv_to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

std::int64_t kv_to_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

double kv_to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

std::array<std::int64_t, 4> kv_to_int4(const std::string& key, const std::string& v) {
  std::array<std::int64_t, 4> out{};
  std::size_t start = 0;
  for (int i = 0; i < 4; ++i) {
    const std::size_t comma = v.find(',', start);
    const bool last = i == 3;
    if (last != (comma == std::string::npos))
      throw std::invalid_argument("config: key '" + key + "' expects 4 comma-separated integers");
    const std::string piece = kv_trim(v.substr(start, last ? std::string::npos : comma - start));
    out[static_cast<std::size_t>(i)] = kv_to_int(key, piece);
    start = comma + 1;
  }
  return out;
}

std::string kv_from_int4(const std::array<std::int64_t, 4>& a) {
  std::string out;
  for (int i = 0; i < 4; ++i) {
    if (i) out += ',';
    out += std::to_string(a[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::string kv_format_double(double v) {
  for (int prec = 1; prec <= 17; ++prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::stod(buf) == v) return buf;
  }
  return std::to_string(v);
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace taku
