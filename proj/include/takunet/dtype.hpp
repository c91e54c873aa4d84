#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "takunet/half.hpp"

namespace taku {

// Codes match the TKTN file format.
enum class DType : std::uint8_t { f32 = 0, f16 = 1, f64 = 2 };

inline std::size_t dtype_size(DType dt) {
  switch (dt) {
    case DType::f32: return 4;
    case DType::f16: return 2;
    case DType::f64: return 8;
  }
  throw std::invalid_argument("bad dtype code");
}

inline const char* dtype_name(DType dt) {
  switch (dt) {
    case DType::f32: return "f32";
    case DType::f16: return "f16";
    case DType::f64: return "f64";
  }
  return "?";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f16") return DType::f16;
  if (s == "f64") return DType::f64;
  throw std::invalid_argument("unknown precision '" + s + "' (expected f16|f32|f64)");
}

template <class T> struct dtype_of;
template <> struct dtype_of<float> { static constexpr DType value = DType::f32; };
template <> struct dtype_of<Half> { static constexpr DType value = DType::f16; };
template <> struct dtype_of<double> { static constexpr DType value = DType::f64; };

// Accumulation type: f16 and f32 reduce in f32, f64 in f64.
template <class T> struct acc_of { using type = float; };
template <> struct acc_of<double> { using type = double; };
template <class T> using acc_t = typename acc_of<T>::type;

}  // namespace taku
