#include "takunet/tensor_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

namespace taku {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("tensor file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("tensor file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_tensor(std::ostream& os, const Tensor& t) {
  os.write("TKTN", 4);
  put_u32(os, kTensorFormatVersion);
  os.put(static_cast<char>(static_cast<std::uint8_t>(t.dtype())));
  os.put(static_cast<char>(static_cast<std::uint8_t>(t.rank())));
  for (auto e : t.shape()) put_u64(os, static_cast<std::uint64_t>(e));
  os.write(static_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.nbytes()));
  if (!os) throw std::runtime_error("tensor write failed");
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  save_tensor(f, t);
}

Tensor load_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "TKTN")
    throw std::runtime_error("bad tensor magic");
  std::uint32_t version = get_u32(is);
  if (version != kTensorFormatVersion)
    throw std::runtime_error("unsupported tensor format version " + std::to_string(version));
  int dt_code = is.get();
  int rank = is.get();
  if (dt_code < 0 || rank < 0) throw std::runtime_error("tensor file truncated");
  if (dt_code > 2) throw std::runtime_error("unknown dtype code " + std::to_string(dt_code));
  if (rank > 4) throw std::runtime_error("tensor rank > 4");
  std::vector<std::int64_t> shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) e = static_cast<std::int64_t>(get_u64(is));
  Tensor t(static_cast<DType>(static_cast<std::uint8_t>(dt_code)), shape);
  if (!is.read(static_cast<char*>(t.raw()), static_cast<std::streamsize>(t.nbytes())))
    throw std::runtime_error("tensor file truncated");
  return t;
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return load_tensor(f);
}

void atomic_write_file(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  fs::path p(path);
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + tmp.string());
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

}  // namespace taku
