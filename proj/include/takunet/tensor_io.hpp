#pragma once

#include <iosfwd>
#include <string>

#include "takunet/tensor.hpp"

namespace taku {

// Raw tensor file: magic "TKTN", version u32 LE, dtype u8 (0=f32,1=f16,2=f64),
// rank u8, extents u64 LE, then raw little-endian element data.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void save_tensor(std::ostream& os, const Tensor& t);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(std::istream& is);
Tensor load_tensor(const std::string& path);

// temp-file + rename; directory taken from path
void atomic_write_file(const std::string& path, const std::string& contents);

}  // namespace taku
