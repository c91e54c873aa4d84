#pragma once

#include <cstdint>
#include <string>

#include "takunet/arch.hpp"
#include "takunet/data.hpp"
#include "takunet/trainer.hpp"

namespace taku {

const char* split_mode_name(SplitMode m);
SplitMode split_mode_from(const std::string& s);

// architecture + training + data keys in one flat key=value namespace;
// unknown keys are rejected
struct RunConfig {
  ArchConfig arch;
  TrainConfig train;
  DataConfig data;

  void apply_kv(const std::string& key, const std::string& value);
  std::string canonical_text() const;  // every key, alphabetical
  std::uint64_t hash() const;

  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
};

}  // namespace taku
