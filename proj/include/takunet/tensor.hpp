#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "takunet/dtype.hpp"

namespace taku {

// Dense row-major NCHW tensor (rank <= 4) with runtime element type.
class Tensor {
public:
  Tensor() = default;
  Tensor(DType dt, std::vector<std::int64_t> shape);

  static Tensor zeros(DType dt, std::vector<std::int64_t> shape) {
    return Tensor(dt, std::move(shape));
  }
  static Tensor full(DType dt, std::vector<std::int64_t> shape, double value);

  DType dtype() const { return dtype_; }
  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::int64_t numel() const { return numel_; }
  std::size_t nbytes() const { return data_.size(); }
  bool defined() const { return !shape_.empty() || numel_ == 1; }
  bool empty() const { return data_.empty(); }

  template <class T>
  T* data() {
    check_type(dtype_of<T>::value);
    return reinterpret_cast<T*>(data_.data());
  }
  template <class T>
  const T* data() const {
    check_type(dtype_of<T>::value);
    return reinterpret_cast<const T*>(data_.data());
  }
  void* raw() { return data_.data(); }
  const void* raw() const { return data_.data(); }

  // scalar access through double, for tests and cold paths
  double get(std::int64_t flat) const;
  void set(std::int64_t flat, double v);

  std::int64_t index4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  void fill(double v);
  std::string shape_str() const;

private:
  void check_type(DType want) const {
    if (want != dtype_)
      throw std::runtime_error("tensor dtype mismatch: have " + std::string(dtype_name(dtype_)) +
                               ", want " + std::string(dtype_name(want)));
  }

  DType dtype_ = DType::f32;
  std::vector<std::int64_t> shape_;
  std::int64_t numel_ = 0;
  std::vector<std::uint8_t> data_;
};

// Debug-mode finiteness checking (off by default).
void set_debug_checks(bool on);
bool debug_checks();
void check_finite(const Tensor& t, const char* where);

// tensor-core primitive ops
Tensor cast(const Tensor& x, DType to);
Tensor copy(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::int64_t c0, std::int64_t c1);
Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double s);
// y[n,c,h,w] = x[n,c,h,w] * scale[c] + shift[c]
Tensor channel_mul_add(const Tensor& x, const Tensor& scale, const Tensor& shift);
// (N,C,1,1); entry = sqrt(sum over H,W of x^2), accumulated wide
Tensor channel_l2_norms(const Tensor& x);
// mean over one axis, keeping that axis with extent 1
Tensor mean_axis(const Tensor& x, int axis);

}  // namespace taku
