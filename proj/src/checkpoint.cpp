#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "takunet/checkpoint.hpp"
#include "takunet/kv.hpp"
#include "takunet/tensor_io.hpp"

namespace taku {

namespace {

constexpr char kMagic[4] = {'T', 'K', 'C', 'K'};

void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw std::runtime_error("checkpoint: truncated");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const TakuNet& model, const std::string& path, std::int64_t epoch,
                     const std::vector<std::pair<std::string, Tensor>>& extra) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  put_u32(os, kCheckpointVersion);
  const std::string cfg = model.config().canonical_text() + "meta.epoch=" + std::to_string(epoch) + "\n";
  put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  std::vector<std::pair<std::string, const Tensor*>> records;
  for (const auto& [name, t] : model.named_params()) records.emplace_back(name, t);
  for (const auto& [name, t] : model.named_buffers()) records.emplace_back(name, t);
  for (const auto& [name, t] : extra) records.emplace_back(name, &t);

  put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    if (name.size() > 0xffff) throw std::invalid_argument("checkpoint: tensor name too long");
    put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    save_tensor(os, *t);
  }
  atomic_write_file(path, os.str());
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t cfg_len = get_u32(is);
  std::string cfg_text(cfg_len, '\0');
  if (!is.read(cfg_text.data(), cfg_len)) throw std::runtime_error("checkpoint: truncated");

  CheckpointData out;
  std::string arch_text;
  for (const auto& [k, v] : parse_kv_lines(cfg_text)) {
    if (k == "meta.epoch") out.epoch = kv_to_int(k, v);
    else arch_text += k + "=" + v + "\n";
  }
  out.config = ArchConfig::from_text(arch_text);

  const std::uint32_t count = get_u32(is);
  out.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = get_u16(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("checkpoint: truncated");
    out.tensors.emplace_back(std::move(name), load_tensor(is));
  }
  return out;
}

TakuNet load_checkpoint(const std::string& path, std::vector<std::pair<std::string, Tensor>>* extra,
                        std::optional<DType> precision_override) {
  CheckpointData data = read_checkpoint(path);
  if (precision_override) data.config.precision = *precision_override;
  TakuNet model(data.config);

  std::map<std::string, Tensor*> slots;
  for (auto& p : model.parameters()) slots[p.name] = p.tensor;
  for (auto& b : model.buffers()) slots[b.name] = b.tensor;

  std::map<std::string, bool> filled;
  for (auto& [name, t] : data.tensors) {
    if (name.rfind("opt.", 0) == 0) {
      if (extra) extra->emplace_back(name, std::move(t));
      continue;
    }
    auto it = slots.find(name);
    if (it == slots.end()) throw std::runtime_error("checkpoint: unknown tensor name '" + name + "'");
    if (t.shape() != it->second->shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    *it->second = t.dtype() == it->second->dtype() ? std::move(t) : cast(t, it->second->dtype());
    filled[name] = true;
  }
  for (const auto& [name, slot] : slots) {
    (void)slot;
    if (!filled.count(name)) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  }
  return model;
}

}  // namespace taku
