#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace taku {

// "key=value" lines; '#' starts a comment, blank lines ignored
std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text);

std::string kv_trim(const std::string& s);
bool kv_to_bool(const std::string& key, const std::string& v);
std::int64_t kv_to_int(const std::string& key, const std::string& v);
double kv_to_double(const std::string& key, const std::string& v);
std::array<std::int64_t, 4> kv_to_int4(const std::string& key, const std::string& v);
std::string kv_from_int4(const std::array<std::int64_t, 4>& a);
std::string kv_format_double(double v);  // shortest round-trip

std::uint64_t fnv1a64(const std::string& s);

}  // namespace taku
