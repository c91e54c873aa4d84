#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "takunet/config.hpp"
#include "takunet/kv.hpp"

namespace taku {

const char* split_mode_name(SplitMode m) { return m == SplitMode::aider ? "aider" : "aiderv2"; }

SplitMode split_mode_from(const std::string& s) {
  if (s == "aider") return SplitMode::aider;
  if (s == "aiderv2") return SplitMode::aiderv2;
  throw std::runtime_error("split_mode must be 'aider' or 'aiderv2', got '" + s + "'");
}

namespace {

bool arch_has_key(const std::string& key) {
  static const std::set<std::string> keys = {
      "channel_shuffle", "conv_bias",  "dense_connections",  "grn",
      "grn_per_channel", "input_h",    "input_w",            "num_classes",
      "precision",       "refiner",    "stage_depths",       "stage_out_channels",
      "stem_channels"};
  return keys.count(key) != 0;
}

bool data_has_key(const std::string& key) {
  static const std::set<std::string> keys = {"augment", "normal_class", "normal_ratio",
                                             "split_mode", "train_ratio"};
  return keys.count(key) != 0;
}

void data_apply_kv(DataConfig& data, const std::string& key, const std::string& value) {
  if (key == "augment")
    data.augment = kv_to_bool(key, value);
  else if (key == "normal_class")
    data.normal_class = value;
  else if (key == "normal_ratio")
    data.normal_ratio = kv_to_double(key, value);
  else if (key == "split_mode")
    data.mode = split_mode_from(value);
  else if (key == "train_ratio")
    data.train_ratio = kv_to_double(key, value);
}

std::string data_canonical_text(const DataConfig& data) {
  std::ostringstream os;
  os << "augment=" << (data.augment ? 1 : 0) << "\n";
  os << "normal_class=" << data.normal_class << "\n";
  os << "normal_ratio=" << kv_format_double(data.normal_ratio) << "\n";
  os << "split_mode=" << split_mode_name(data.mode) << "\n";
  os << "train_ratio=" << kv_format_double(data.train_ratio) << "\n";
  return os.str();
}

}  // namespace

void RunConfig::apply_kv(const std::string& key, const std::string& value) {
  if (arch_has_key(key)) {
    std::string text;
    for (const auto& [k, v] : parse_kv_lines(arch.canonical_text()))
      text += k + "=" + (k == key ? value : v) + "\n";
    arch = ArchConfig::from_text(text);
  } else if (TrainConfig::has_key(key)) {
    train.apply_kv(key, value);
  } else if (data_has_key(key)) {
    data_apply_kv(data, key, value);
  } else {
    throw std::invalid_argument("unknown config key: " + key);
  }
}

std::string RunConfig::canonical_text() const {
  std::vector<std::string> lines;
  for (const std::string& block :
       {arch.canonical_text(), train.canonical_text(), data_canonical_text(data)}) {
    std::istringstream is(block);
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) lines.push_back(line);
  }
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const std::string& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical_text()); }

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  for (const auto& [k, v] : parse_kv_lines(text)) cfg.apply_kv(k, v);
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return from_text(os.str());
}

}  // namespace taku
