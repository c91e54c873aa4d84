#pragma once

#include <cstdint>
#include <cstring>

namespace taku {

// IEEE-754 binary16 stored in software. Conversions round to nearest even;
// arithmetic goes through float.
class Half {
public:
  Half() = default;
  Half(float f) : bits_(from_float(f)) {}
  Half(double d) : Half(static_cast<float>(d)) {}

  operator float() const { return to_float(bits_); }

  static Half from_bits(std::uint16_t b) {
    Half h;
    h.bits_ = b;
    return h;
  }
  std::uint16_t bits() const { return bits_; }

  Half& operator+=(Half o) { *this = Half(float(*this) + float(o)); return *this; }
  Half& operator*=(Half o) { *this = Half(float(*this) * float(o)); return *this; }

  static std::uint16_t from_float(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    std::uint32_t sign = (u >> 16) & 0x8000u;
    std::uint32_t exp32 = (u >> 23) & 0xffu;
    std::uint32_t mant = u & 0x7fffffu;
    if (exp32 == 0xffu)  // inf or nan
      return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? (0x200u | (mant >> 13)) : 0u));
    int exp = static_cast<int>(exp32) - 127 + 15;
    if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
    if (exp <= 0) {
      if (exp < -10) return static_cast<std::uint16_t>(sign);
      mant |= 0x800000u;
      int shift = 14 - exp;  // 14..24
      std::uint32_t h = mant >> shift;
      std::uint32_t rem = mant & ((1u << shift) - 1u);
      std::uint32_t halfway = 1u << (shift - 1);
      if (rem > halfway || (rem == halfway && (h & 1u))) h++;
      return static_cast<std::uint16_t>(sign | h);
    }
    std::uint32_t h = sign | (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
    std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) h++;  // carry may bump the exponent; that is correct
    return static_cast<std::uint16_t>(h);
  }

  static float to_float(std::uint16_t h) {
    std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t u;
    if (exp == 0) {
      if (mant == 0) {
        u = sign;
      } else {
        int e = -1;
        do {
          mant <<= 1;
          e++;
        } while (!(mant & 0x400u));
        mant &= 0x3ffu;
        u = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mant << 13);
      }
    } else if (exp == 31) {
      u = sign | 0x7f800000u | (mant << 13);
    } else {
      u = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }

private:
  std::uint16_t bits_ = 0;
};

inline Half operator+(Half a, Half b) { return Half(float(a) + float(b)); }
inline Half operator-(Half a, Half b) { return Half(float(a) - float(b)); }
inline Half operator*(Half a, Half b) { return Half(float(a) * float(b)); }
inline Half operator/(Half a, Half b) { return Half(float(a) / float(b)); }

}  // namespace taku
