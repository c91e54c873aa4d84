#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "takunet/arch.hpp"

namespace taku {

// Checkpoint container: magic "TKCK", version u32 LE, length-prefixed (u32)
// canonical key-value config text (arch keys + meta.epoch), tensor count u32,
// then records of (name length u16, name, tensor in TKTN format).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  ArchConfig config;
  std::int64_t epoch = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;  // file order
};

// writes model parameters and BN buffers plus any extra tensors
// (e.g. optimizer state under "opt." names); atomic on disk
void save_checkpoint(const TakuNet& model, const std::string& path, std::int64_t epoch = 0,
                     const std::vector<std::pair<std::string, Tensor>>& extra = {});

CheckpointData read_checkpoint(const std::string& path);

// rebuilds the model from the stored config and fills every parameter and
// buffer by name, casting to the target precision (f16 -> f32 widens
// losslessly); tensors under "opt." are returned through `extra`; any other
// unknown tensor name is an error
TakuNet load_checkpoint(const std::string& path,
                        std::vector<std::pair<std::string, Tensor>>* extra = nullptr,
                        std::optional<DType> precision_override = std::nullopt);

}  // namespace taku
