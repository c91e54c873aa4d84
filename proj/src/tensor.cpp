#include "takunet/tensor.hpp"

#include <atomic>
#include <cmath>

namespace taku {

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw std::invalid_argument("negative tensor extent");
    n *= e;
  }
  return n;
}

std::atomic<bool> g_debug_checks{false};

// widen to the accumulation type without truncating f64
inline float ld(Half v) { return static_cast<float>(v); }
inline float ld(float v) { return v; }
inline double ld(double v) { return v; }

template <class F>
auto dispatch(DType dt, F&& f) {
  switch (dt) {
    case DType::f32: return f(float{});
    case DType::f16: return f(Half{});
    case DType::f64: return f(double{});
  }
  throw std::invalid_argument("bad dtype");
}

}  // namespace

Tensor::Tensor(DType dt, std::vector<std::int64_t> shape)
    : dtype_(dt), shape_(std::move(shape)) {
  if (shape_.size() > 4) throw std::invalid_argument("tensor rank > 4");
  numel_ = shape_numel(shape_);
  data_.assign(static_cast<std::size_t>(numel_) * dtype_size(dt), 0);
}

Tensor Tensor::full(DType dt, std::vector<std::int64_t> shape, double value) {
  Tensor t(dt, std::move(shape));
  t.fill(value);
  return t;
}

double Tensor::get(std::int64_t flat) const {
  return dispatch(dtype_, [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(ld(data<T>()[flat]));
  });
}

void Tensor::set(std::int64_t flat, double v) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    data<T>()[flat] = T(v);
    return 0;
  });
}

void Tensor::fill(double v) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    T tv = T(v);
    T* p = data<T>();
    for (std::int64_t i = 0; i < numel_; ++i) p[i] = tv;
    return 0;
  });
}

std::string Tensor::shape_str() const {
  std::string s = "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape_[i]);
  }
  return s + ")";
}

void set_debug_checks(bool on) { g_debug_checks.store(on); }
bool debug_checks() { return g_debug_checks.load(); }

void check_finite(const Tensor& t, const char* where) {
  if (!g_debug_checks.load()) return;
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double v = t.get(i);
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value after ") + where + " at index " +
                               std::to_string(i));
  }
}

Tensor cast(const Tensor& x, DType to) {
  if (x.dtype() == to) return x;
  Tensor out(to, x.shape());
  dispatch(x.dtype(), [&](auto stag) {
    using S = decltype(stag);
    const S* src = x.data<S>();
    dispatch(to, [&](auto dtag) {
      using D = decltype(dtag);
      D* dst = out.data<D>();
      for (std::int64_t i = 0; i < x.numel(); ++i) dst[i] = D(ld(src[i]));
      return 0;
    });
    return 0;
  });
  return out;
}

Tensor copy(const Tensor& x) { return x; }

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4) throw std::invalid_argument("concat_channels: rank-4 inputs required");
  if (a.dtype() != b.dtype()) throw std::invalid_argument("concat_channels: dtype mismatch");
  for (std::size_t i : {std::size_t(0), std::size_t(2), std::size_t(3)})
    if (a.shape()[i] != b.shape()[i])
      throw std::invalid_argument("concat_channels: non-channel axis mismatch " + a.shape_str() +
                                  " vs " + b.shape_str());
  std::int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out(a.dtype(), {N, Ca + Cb, H, W});
  std::size_t es = dtype_size(a.dtype());
  std::size_t plane = static_cast<std::size_t>(H * W) * es;
  const auto* pa = static_cast<const std::uint8_t*>(a.raw());
  const auto* pb = static_cast<const std::uint8_t*>(b.raw());
  auto* po = static_cast<std::uint8_t*>(out.raw());
  for (std::int64_t n = 0; n < N; ++n) {
    std::memcpy(po + static_cast<std::size_t>(n * (Ca + Cb)) * plane,
                pa + static_cast<std::size_t>(n * Ca) * plane, static_cast<std::size_t>(Ca) * plane);
    std::memcpy(po + static_cast<std::size_t>(n * (Ca + Cb) + Ca) * plane,
                pb + static_cast<std::size_t>(n * Cb) * plane, static_cast<std::size_t>(Cb) * plane);
  }
  check_finite(out, "concat_channels");
  return out;
}

Tensor slice_channels(const Tensor& x, std::int64_t c0, std::int64_t c1) {
  if (x.rank() != 4) throw std::invalid_argument("slice_channels: rank-4 input required");
  if (c0 < 0 || c1 > x.dim(1) || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
  std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out(x.dtype(), {N, c1 - c0, H, W});
  std::size_t es = dtype_size(x.dtype());
  std::size_t plane = static_cast<std::size_t>(H * W) * es;
  const auto* px = static_cast<const std::uint8_t*>(x.raw());
  auto* po = static_cast<std::uint8_t*>(out.raw());
  for (std::int64_t n = 0; n < N; ++n)
    std::memcpy(po + static_cast<std::size_t>(n * (c1 - c0)) * plane,
                px + static_cast<std::size_t>(n * C + c0) * plane,
                static_cast<std::size_t>(c1 - c0) * plane);
  return out;
}

namespace {
void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype() || a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape/dtype mismatch");
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  Tensor out(a.dtype(), a.shape());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    using A = acc_t<T>;
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.data<T>();
    for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = T(static_cast<A>(ld(pa[i])) + static_cast<A>(ld(pb[i])));
    return 0;
  });
  check_finite(out, "add");
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  check_same(a, b, "add_inplace");
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* pa = a.data<T>();
    const T* pb = b.data<T>();
    for (std::int64_t i = 0; i < a.numel(); ++i) pa[i] = T(ld(pa[i]) + ld(pb[i]));
    return 0;
  });
}

Tensor mul_scalar(const Tensor& x, double s) {
  Tensor out(x.dtype(), x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    T* po = out.data<T>();
    using A = acc_t<T>;
    for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = T(ld(px[i]) * static_cast<A>(s));
    return 0;
  });
  check_finite(out, "mul_scalar");
  return out;
}

Tensor channel_mul_add(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  if (x.rank() != 4) throw std::invalid_argument("channel_mul_add: rank-4 input required");
  std::int64_t C = x.dim(1);
  if (scale.numel() != C || shift.numel() != C)
    throw std::invalid_argument("channel_mul_add: per-channel parameter length mismatch");
  Tensor out(x.dtype(), x.shape());
  std::int64_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    T* po = out.data<T>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        using A = acc_t<T>;
        A a = static_cast<A>(scale.get(c));
        A b = static_cast<A>(shift.get(c));
        const T* pi = px + (n * C + c) * HW;
        T* pe = po + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) pe[i] = T(ld(pi[i]) * a + b);
      }
    return 0;
  });
  check_finite(out, "channel_mul_add");
  return out;
}

Tensor channel_l2_norms(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("channel_l2_norms: rank-4 input required");
  std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out(x.dtype(), {N, C, 1, 1});
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    using A = acc_t<T>;
    const T* px = x.data<T>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const T* p = px + (n * C + c) * HW;
        A s = 0;
        for (std::int64_t i = 0; i < HW; ++i) {
          A v = static_cast<A>(ld(p[i]));
          s += v * v;
        }
        out.set(n * C + c, std::sqrt(static_cast<double>(s)));
      }
    return 0;
  });
  check_finite(out, "channel_l2_norms");
  return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("mean_axis: bad axis");
  auto oshape = x.shape();
  std::int64_t extent = oshape[axis];
  if (extent == 0) throw std::invalid_argument("mean_axis: zero extent");
  oshape[axis] = 1;
  Tensor out(x.dtype(), oshape);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    using A = acc_t<T>;
    const T* px = x.data<T>();
    T* po = out.data<T>();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        A s = 0;
        for (std::int64_t e = 0; e < extent; ++e) s += static_cast<A>(ld(px[(o * extent + e) * inner + i]));
        po[o * inner + i] = T(static_cast<double>(s) / static_cast<double>(extent));
      }
    return 0;
  });
  return out;
}

}  // namespace taku
