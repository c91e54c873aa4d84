#include <algorithm>
#include <vector>

#include "takunet/ops.hpp"

namespace taku {

namespace {

inline float ld(Half v) { return static_cast<float>(v); }
inline float ld(float v) { return v; }
inline double ld(double v) { return v; }

inline std::int64_t div_floor(std::int64_t a, std::int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline std::int64_t div_ceil(std::int64_t a, std::int64_t b) {
  return a >= 0 ? (a + b - 1) / b : -(-a / b);
}

template <class F>
auto dispatch(DType dt, F&& f) {
  switch (dt) {
    case DType::f32: return f(float{});
    case DType::f16: return f(Half{});
    case DType::f64: return f(double{});
  }
  throw std::invalid_argument("bad dtype");
}

// forward: for each (n,oc,oh) accumulate an output row in the wide type;
// reduction order per element is fixed (icg, kh, kw), so threading over
// (n,oc) is bit-identical to sequential execution.
template <class S>
void conv_forward(const S* x, const S* w, const S* b, S* y, std::int64_t N, std::int64_t Cin,
                  std::int64_t H, std::int64_t W, std::int64_t Cout, std::int64_t OH,
                  std::int64_t OW, const ConvSpec& sp) {
  using A = acc_t<S>;
  const std::int64_t cing = Cin / sp.groups;
  const std::int64_t coutg = Cout / sp.groups;
#ifdef _OPENMP
#pragma omp parallel
#endif
  {
    std::vector<A> row(static_cast<std::size_t>(OW));
#ifdef _OPENMP
#pragma omp for collapse(2) schedule(static)
#endif
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t oc = 0; oc < Cout; ++oc) {
        const std::int64_t g = oc / coutg;
        const std::int64_t ic0 = g * cing;
        const S* woc = w + oc * cing * sp.kh * sp.kw;
        const A bias = b ? static_cast<A>(ld(b[oc])) : A(0);
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          std::fill(row.begin(), row.end(), A(0));
          for (std::int64_t icg = 0; icg < cing; ++icg) {
            const S* xc = x + ((n * Cin + ic0 + icg) * H) * W;
            const S* wk = woc + icg * sp.kh * sp.kw;
            for (int kh = 0; kh < sp.kh; ++kh) {
              const std::int64_t ih = oh * sp.stride_h - sp.pad_h + static_cast<std::int64_t>(kh) * sp.dil_h;
              if (ih < 0 || ih >= H) continue;
              const S* xrow = xc + ih * W;
              for (int kw = 0; kw < sp.kw; ++kw) {
                const A wv = static_cast<A>(ld(wk[kh * sp.kw + kw]));
                const std::int64_t off = -sp.pad_w + static_cast<std::int64_t>(kw) * sp.dil_w;
                const std::int64_t lo = std::max<std::int64_t>(0, div_ceil(-off, sp.stride_w));
                const std::int64_t hi = std::min<std::int64_t>(OW, div_floor(W - 1 - off, sp.stride_w) + 1);
                if (sp.stride_w == 1) {
                  const S* xr = xrow + off;
                  for (std::int64_t ow = lo; ow < hi; ++ow) row[ow] += wv * static_cast<A>(ld(xr[ow]));
                } else {
                  for (std::int64_t ow = lo; ow < hi; ++ow)
                    row[ow] += wv * static_cast<A>(ld(xrow[ow * sp.stride_w + off]));
                }
              }
            }
          }
          S* yrow = y + ((n * Cout + oc) * OH + oh) * OW;
          for (std::int64_t ow = 0; ow < OW; ++ow) yrow[ow] = S(row[ow] + bias);
        }
      }
  }
}

// input gradient: each (n,ic) plane is owned by one thread; for fixed
// (oc,kh,kw) the contribution scatters along a strided row, so the
// accumulation order per input element is the loop order below.
template <class S, class G>
void conv_backward_x(const S* w, const G* gy, G* gx, std::int64_t N, std::int64_t Cin,
                     std::int64_t H, std::int64_t W, std::int64_t Cout, std::int64_t OH,
                     std::int64_t OW, const ConvSpec& sp) {
  using A = acc_t<G>;
  const std::int64_t cing = Cin / sp.groups;
  const std::int64_t coutg = Cout / sp.groups;
#ifdef _OPENMP
#pragma omp parallel
#endif
  {
    std::vector<A> plane(static_cast<std::size_t>(H * W));
#ifdef _OPENMP
#pragma omp for collapse(2) schedule(static)
#endif
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t ic = 0; ic < Cin; ++ic) {
        const std::int64_t g = ic / cing;
        const std::int64_t icg = ic - g * cing;
        std::fill(plane.begin(), plane.end(), A(0));
        for (std::int64_t ocg = 0; ocg < coutg; ++ocg) {
          const std::int64_t oc = g * coutg + ocg;
          const S* wk = w + (oc * cing + icg) * sp.kh * sp.kw;
          const G* gyc = gy + (n * Cout + oc) * OH * OW;
          for (int kh = 0; kh < sp.kh; ++kh)
            for (int kw = 0; kw < sp.kw; ++kw) {
              const A wv = static_cast<A>(ld(wk[kh * sp.kw + kw]));
              if (wv == A(0)) continue;
              const std::int64_t offh = -sp.pad_h + static_cast<std::int64_t>(kh) * sp.dil_h;
              const std::int64_t offw = -sp.pad_w + static_cast<std::int64_t>(kw) * sp.dil_w;
              const std::int64_t oh_lo = std::max<std::int64_t>(0, div_ceil(-offh, sp.stride_h));
              const std::int64_t oh_hi = std::min<std::int64_t>(OH, div_floor(H - 1 - offh, sp.stride_h) + 1);
              const std::int64_t ow_lo = std::max<std::int64_t>(0, div_ceil(-offw, sp.stride_w));
              const std::int64_t ow_hi = std::min<std::int64_t>(OW, div_floor(W - 1 - offw, sp.stride_w) + 1);
              for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                const std::int64_t ih = oh * sp.stride_h + offh;
                const G* gyrow = gyc + oh * OW;
                A* prow = plane.data() + ih * W + offw;
                if (sp.stride_w == 1) {
                  for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow)
                    prow[ow] += wv * static_cast<A>(ld(gyrow[ow]));
                } else {
                  for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow)
                    prow[ow * sp.stride_w] += wv * static_cast<A>(ld(gyrow[ow]));
                }
              }
            }
        }
        G* out = gx + (n * Cin + ic) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) out[i] = static_cast<G>(plane[i]);
      }
  }
}

// weight gradient: one thread owns one weight entry; reduction over
// (n, oh, ow) in fixed order.
template <class S, class G>
void conv_backward_w(const S* x, const G* gy, G* gw, std::int64_t N, std::int64_t Cin,
                     std::int64_t H, std::int64_t W, std::int64_t Cout, std::int64_t OH,
                     std::int64_t OW, const ConvSpec& sp) {
  using A = acc_t<G>;
  const std::int64_t cing = Cin / sp.groups;
  const std::int64_t coutg = Cout / sp.groups;
  const std::int64_t nw = Cout * cing * sp.kh * sp.kw;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::int64_t wi = 0; wi < nw; ++wi) {
    const std::int64_t oc = wi / (cing * sp.kh * sp.kw);
    const std::int64_t rem = wi % (cing * sp.kh * sp.kw);
    const std::int64_t icg = rem / (sp.kh * sp.kw);
    const int kh = static_cast<int>((rem / sp.kw) % sp.kh);
    const int kw = static_cast<int>(rem % sp.kw);
    const std::int64_t g = oc / coutg;
    const std::int64_t ic = g * cing + icg;
    const std::int64_t offh = -sp.pad_h + static_cast<std::int64_t>(kh) * sp.dil_h;
    const std::int64_t offw = -sp.pad_w + static_cast<std::int64_t>(kw) * sp.dil_w;
    const std::int64_t oh_lo = std::max<std::int64_t>(0, div_ceil(-offh, sp.stride_h));
    const std::int64_t oh_hi = std::min<std::int64_t>(OH, div_floor(H - 1 - offh, sp.stride_h) + 1);
    const std::int64_t ow_lo = std::max<std::int64_t>(0, div_ceil(-offw, sp.stride_w));
    const std::int64_t ow_hi = std::min<std::int64_t>(OW, div_floor(W - 1 - offw, sp.stride_w) + 1);
    A acc = 0;
    for (std::int64_t n = 0; n < N; ++n) {
      const S* xc = x + (n * Cin + ic) * H * W;
      const G* gyc = gy + (n * Cout + oc) * OH * OW;
      for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
        const S* xrow = xc + (oh * sp.stride_h + offh) * W + offw;
        const G* gyrow = gyc + oh * OW;
        if (sp.stride_w == 1) {
          for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow)
            acc += static_cast<A>(ld(xrow[ow])) * static_cast<A>(ld(gyrow[ow]));
        } else {
          for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow)
            acc += static_cast<A>(ld(xrow[ow * sp.stride_w])) * static_cast<A>(ld(gyrow[ow]));
        }
      }
    }
    gw[wi] = static_cast<G>(acc);
  }
}

}  // namespace

void ConvSpec::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw std::invalid_argument("conv: channel counts must be positive");
  if (groups <= 0 || in_channels % groups || out_channels % groups)
    throw std::invalid_argument("conv: groups must divide in_channels and out_channels");
  if (kh <= 0 || kw <= 0 || stride_h <= 0 || stride_w <= 0 || dil_h <= 0 || dil_w <= 0)
    throw std::invalid_argument("conv: kernel/stride/dilation must be positive");
  if (pad_h < 0 || pad_w < 0) throw std::invalid_argument("conv: negative padding");
}

DType grad_dtype(DType model_dtype) {
  return model_dtype == DType::f64 ? DType::f64 : DType::f32;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, const ConvSpec& spec) {
  spec.validate();
  if (x.rank() != 4) throw std::invalid_argument("conv2d: input must be rank 4");
  if (x.dim(1) != spec.in_channels)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(x.dim(1)) +
                                " != spec in_channels " + std::to_string(spec.in_channels));
  const std::int64_t cing = spec.in_channels / spec.groups;
  if (w.shape() != std::vector<std::int64_t>{spec.out_channels, cing, spec.kh, spec.kw})
    throw std::invalid_argument("conv2d: weight shape mismatch " + w.shape_str());
  if (b && b->numel() != spec.out_channels) throw std::invalid_argument("conv2d: bias length mismatch");
  const std::int64_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::int64_t OH = spec.out_extent(H, spec.kh, spec.stride_h, spec.pad_h, spec.dil_h);
  const std::int64_t OW = spec.out_extent(W, spec.kw, spec.stride_w, spec.pad_w, spec.dil_w);
  if (OH < 1 || OW < 1)
    throw std::invalid_argument("conv2d: output extent < 1 for input " + x.shape_str());
  Tensor y(x.dtype(), {N, spec.out_channels, OH, OW});
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    conv_forward<S>(x.data<S>(), w.data<S>(), b ? b->data<S>() : nullptr, y.data<S>(), N,
                    spec.in_channels, H, W, spec.out_channels, OH, OW, spec);
    return 0;
  });
  check_finite(y, "conv2d");
  return y;
}

ConvGrads conv2d_vjp(const Tensor& x, const Tensor& w, const ConvSpec& spec,
                     const Tensor& grad_out, bool need_gx) {
  spec.validate();
  const std::int64_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::int64_t OH = spec.out_extent(H, spec.kh, spec.stride_h, spec.pad_h, spec.dil_h);
  const std::int64_t OW = spec.out_extent(W, spec.kw, spec.stride_w, spec.pad_w, spec.dil_w);
  if (grad_out.shape() != std::vector<std::int64_t>{N, spec.out_channels, OH, OW})
    throw std::invalid_argument("conv2d_vjp: grad_out shape mismatch " + grad_out.shape_str());
  const DType gdt = grad_dtype(x.dtype());
  if (grad_out.dtype() != gdt) throw std::invalid_argument("conv2d_vjp: grad dtype mismatch");
  ConvGrads out;
  out.gw = Tensor(gdt, w.shape());
  if (need_gx) out.gx = Tensor(gdt, x.shape());
  if (spec.bias) {
    out.gb = Tensor(gdt, {spec.out_channels});
    dispatch(gdt, [&](auto gtag) {
      using G = decltype(gtag);
      using A = acc_t<G>;
      const G* gy = grad_out.data<G>();
      G* gb = out.gb.data<G>();
      for (std::int64_t oc = 0; oc < spec.out_channels; ++oc) {
        A acc = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const G* p = gy + (n * spec.out_channels + oc) * OH * OW;
          for (std::int64_t i = 0; i < OH * OW; ++i) acc += static_cast<A>(ld(p[i]));
        }
        gb[oc] = static_cast<G>(acc);
      }
      return 0;
    });
  }
  dispatch(x.dtype(), [&](auto stag) {
    using S = decltype(stag);
    dispatch(gdt, [&](auto gtag) {
      using G = decltype(gtag);
      const G* gy = grad_out.data<G>();
      conv_backward_w<S, G>(x.data<S>(), gy, out.gw.data<G>(), N, spec.in_channels, H, W,
                            spec.out_channels, OH, OW, spec);
      if (need_gx)
        conv_backward_x<S, G>(w.data<S>(), gy, out.gx.data<G>(), N, spec.in_channels, H, W,
                              spec.out_channels, OH, OW, spec);
      return 0;
    });
    return 0;
  });
  return out;
}

}  // namespace taku
