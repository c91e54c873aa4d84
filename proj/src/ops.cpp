#include <algorithm>
#include <cmath>

#include "takunet/ops.hpp"

namespace taku {

namespace {

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

// storage type + matching gradient type (f16 and f32 carry f32 grads)
template <class F>
auto dispatch_sg(DType dt, F&& f) {
  switch (dt) {
    case DType::f32: return f(float{}, float{});
    case DType::f16: return f(Half{}, float{});
    case DType::f64: return f(double{}, double{});
  }
  throw std::invalid_argument("bad dtype");
}

void require_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw std::invalid_argument(std::string(op) + ": input must be rank 4");
}

void require_grad(const Tensor& g, DType model, const char* op) {
  if (g.dtype() != grad_dtype(model))
    throw std::invalid_argument(std::string(op) + ": gradient dtype must be " +
                                dtype_name(grad_dtype(model)));
}

std::int64_t pool_out(std::int64_t in, int k, int s) { return in < k ? 0 : (in - k) / s + 1; }

}  // namespace

Tensor relu6(const Tensor& x) {
  Tensor y(x.dtype(), x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    using A = acc_t<S>;
    const S* in = x.data<S>();
    S* out = y.data<S>();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i)
      out[i] = S(std::min<A>(std::max<A>(static_cast<A>(ld(in[i])), A(0)), A(6)));
    return 0;
  });
  return y;
}

Tensor relu6_vjp(const Tensor& x, const Tensor& grad_out) {
  if (grad_out.shape() != x.shape()) throw std::invalid_argument("relu6_vjp: shape mismatch");
  require_grad(grad_out, x.dtype(), "relu6_vjp");
  Tensor gx(grad_out.dtype(), x.shape());
  dispatch_sg(x.dtype(), [&](auto stag, auto gtag) {
    using S = decltype(stag);
    using G = decltype(gtag);
    const S* in = x.data<S>();
    const G* g = grad_out.data<G>();
    G* out = gx.data<G>();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      const auto v = ld(in[i]);
      out[i] = (v > 0 && v < 6) ? g[i] : G(0);
    }
    return 0;
  });
  return gx;
}

Tensor batch_norm_train(const Tensor& x, BatchNormState& state, BnCache& cache) {
  require_rank4(x, "batch_norm_train");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (state.gamma.numel() != C || state.beta.numel() != C)
    throw std::invalid_argument("batch_norm_train: gamma/beta length mismatch");
  const std::int64_t m = N * H * W;
  if (m <= 0) throw std::invalid_argument("batch_norm_train: empty batch");
  cache.mean.assign(C, 0.0);
  cache.invstd.assign(C, 0.0);
  std::vector<double> var(C, 0.0);
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* in = x.data<S>();
    for (std::int64_t c = 0; c < C; ++c) {
      double sum = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) sum += static_cast<double>(ld(p[i]));
      }
      const double mean = sum / static_cast<double>(m);
      double sq = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          const double d = static_cast<double>(ld(p[i])) - mean;
          sq += d * d;
        }
      }
      const double v = sq / static_cast<double>(m);
      cache.mean[c] = mean;
      cache.invstd[c] = 1.0 / std::sqrt(v + state.eps);
      var[c] = v;
    }
    return 0;
  });
  // running stats keep the unbiased variance
  const double mom = state.momentum;
  for (std::int64_t c = 0; c < C; ++c) {
    const double unbiased = m > 1 ? var[c] * static_cast<double>(m) / static_cast<double>(m - 1) : var[c];
    state.running_mean.set(c, (1.0 - mom) * state.running_mean.get(c) + mom * cache.mean[c]);
    state.running_var.set(c, (1.0 - mom) * state.running_var.get(c) + mom * unbiased);
  }
  Tensor y = bn_apply_cached(x, state, cache);
  check_finite(y, "batch_norm_train");
  return y;
}

Tensor bn_apply_cached(const Tensor& x, const BatchNormState& state, const BnCache& cache) {
  require_rank4(x, "bn_apply_cached");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (static_cast<std::int64_t>(cache.mean.size()) != C)
    throw std::invalid_argument("bn_apply_cached: stale cache");
  Tensor y(x.dtype(), x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* in = x.data<S>();
    S* out = y.data<S>();
    for (std::int64_t c = 0; c < C; ++c) {
      const double scale = state.gamma.get(c) * cache.invstd[c];
      const double shift = state.beta.get(c) - cache.mean[c] * scale;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * H * W;
        S* q = out + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i)
          q[i] = S(static_cast<acc_t<S>>(static_cast<double>(ld(p[i])) * scale + shift));
      }
    }
    return 0;
  });
  return y;
}

Tensor batch_norm_eval(const Tensor& x, const BatchNormState& state) {
  require_rank4(x, "batch_norm_eval");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (state.gamma.numel() != C) throw std::invalid_argument("batch_norm_eval: gamma length mismatch");
  Tensor y(x.dtype(), x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* in = x.data<S>();
    S* out = y.data<S>();
    for (std::int64_t c = 0; c < C; ++c) {
      const double scale = state.gamma.get(c) / std::sqrt(state.running_var.get(c) + state.eps);
      const double shift = state.beta.get(c) - state.running_mean.get(c) * scale;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * H * W;
        S* q = out + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i)
          q[i] = S(static_cast<acc_t<S>>(static_cast<double>(ld(p[i])) * scale + shift));
      }
    }
    return 0;
  });
  return y;
}

BnGrads batch_norm_vjp(const Tensor& x, const BatchNormState& state, const BnCache& cache,
                       const Tensor& grad_out) {
  require_rank4(x, "batch_norm_vjp");
  if (grad_out.shape() != x.shape()) throw std::invalid_argument("batch_norm_vjp: shape mismatch");
  require_grad(grad_out, x.dtype(), "batch_norm_vjp");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (static_cast<std::int64_t>(cache.mean.size()) != C)
    throw std::invalid_argument("batch_norm_vjp: stale cache");
  const std::int64_t m = N * H * W;
  BnGrads out;
  const DType gdt = grad_dtype(x.dtype());
  out.gx = Tensor(gdt, x.shape());
  out.ggamma = Tensor(gdt, {C});
  out.gbeta = Tensor(gdt, {C});
  dispatch_sg(x.dtype(), [&](auto stag, auto gtag) {
    using S = decltype(stag);
    using G = decltype(gtag);
    const S* in = x.data<S>();
    const G* g = grad_out.data<G>();
    G* gx = out.gx.data<G>();
    for (std::int64_t c = 0; c < C; ++c) {
      const double mean = cache.mean[c], invstd = cache.invstd[c];
      double sum_g = 0, sum_gxh = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * H * W;
        const G* gp = g + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          const double gv = static_cast<double>(ld(gp[i]));
          sum_g += gv;
          sum_gxh += gv * (static_cast<double>(ld(p[i])) - mean) * invstd;
        }
      }
      out.ggamma.set(c, sum_gxh);
      out.gbeta.set(c, sum_g);
      const double k = state.gamma.get(c) * invstd / static_cast<double>(m);
      for (std::int64_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * H * W;
        const G* gp = g + (n * C + c) * H * W;
        G* q = gx + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          const double xh = (static_cast<double>(ld(p[i])) - mean) * invstd;
          q[i] = static_cast<G>(k * (static_cast<double>(m) * static_cast<double>(ld(gp[i])) -
                                     sum_g - xh * sum_gxh));
        }
      }
    }
    return 0;
  });
  return out;
}

namespace {

void grn_check(const Tensor& x, const GrnState& state) {
  require_rank4(x, "grn");
  const std::int64_t C = x.dim(1);
  if (state.gamma.numel() != C && state.gamma.numel() != 1)
    throw std::invalid_argument("grn: gamma must have length C or 1");
  if (state.beta.numel() != state.gamma.numel())
    throw std::invalid_argument("grn: gamma/beta length mismatch");
}

}  // namespace

Tensor grn(const Tensor& x, const GrnState& state, GrnCache& cache) {
  grn_check(x, state);
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const bool per_channel = state.gamma.numel() != 1;
  cache.norms.assign(static_cast<std::size_t>(N * C), 0.0);
  cache.mean_norms.assign(static_cast<std::size_t>(N), 0.0);
  Tensor y(x.dtype(), x.shape());
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* in = x.data<S>();
    S* out = y.data<S>();
    for (std::int64_t n = 0; n < N; ++n) {
      double total = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        const S* p = in + (n * C + c) * HW;
        double sq = 0;
        for (std::int64_t i = 0; i < HW; ++i) {
          const double v = static_cast<double>(ld(p[i]));
          sq += v * v;
        }
        const double r = std::sqrt(sq);
        cache.norms[n * C + c] = r;
        total += r;
      }
      const double mean = total / static_cast<double>(C);
      cache.mean_norms[n] = mean;
      for (std::int64_t c = 0; c < C; ++c) {
        const double nc = cache.norms[n * C + c] / (mean + state.eps);
        const double ga = state.gamma.get(per_channel ? c : 0);
        const double be = state.beta.get(per_channel ? c : 0);
        const double scale = 1.0 + ga * nc;
        const S* p = in + (n * C + c) * HW;
        S* q = out + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i)
          q[i] = S(static_cast<acc_t<S>>(static_cast<double>(ld(p[i])) * scale + be));
      }
    }
    return 0;
  });
  check_finite(y, "grn");
  return y;
}

GrnGrads grn_vjp(const Tensor& x, const GrnState& state, const GrnCache& cache,
                 const Tensor& grad_out) {
  grn_check(x, state);
  if (grad_out.shape() != x.shape()) throw std::invalid_argument("grn_vjp: shape mismatch");
  require_grad(grad_out, x.dtype(), "grn_vjp");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (static_cast<std::int64_t>(cache.norms.size()) != N * C)
    throw std::invalid_argument("grn_vjp: stale cache");
  const bool per_channel = state.gamma.numel() != 1;
  const std::int64_t plen = state.gamma.numel();
  const DType gdt = grad_dtype(x.dtype());
  GrnGrads out;
  out.gx = Tensor(gdt, x.shape());
  out.ggamma = Tensor(gdt, {plen});
  out.gbeta = Tensor(gdt, {plen});
  std::vector<double> ggamma(static_cast<std::size_t>(plen), 0.0);
  std::vector<double> gbeta(static_cast<std::size_t>(plen), 0.0);
  dispatch_sg(x.dtype(), [&](auto stag, auto gtag) {
    using S = decltype(stag);
    using G = decltype(gtag);
    const S* in = x.data<S>();
    const G* g = grad_out.data<G>();
    G* gx = out.gx.data<G>();
    std::vector<double> p(static_cast<std::size_t>(C));
    for (std::int64_t n = 0; n < N; ++n) {
      const double denom = cache.mean_norms[n] + state.eps;
      double q_total = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        const S* xp = in + (n * C + c) * HW;
        const G* gp = g + (n * C + c) * HW;
        double dot = 0, gsum = 0;
        for (std::int64_t i = 0; i < HW; ++i) {
          gsum += static_cast<double>(ld(gp[i]));
          dot += static_cast<double>(ld(gp[i])) * static_cast<double>(ld(xp[i]));
        }
        p[c] = dot;
        const double ga = state.gamma.get(per_channel ? c : 0);
        const double r = cache.norms[n * C + c];
        const std::int64_t pi = per_channel ? c : 0;
        ggamma[pi] += dot * (r / denom);
        gbeta[pi] += gsum;
        q_total += ga * dot * r;
      }
      for (std::int64_t c = 0; c < C; ++c) {
        const double r = cache.norms[n * C + c];
        const double ga = state.gamma.get(per_channel ? c : 0);
        const double nc = r / denom;
        const double diag = 1.0 + ga * nc;
        const double coef =
            r > 0 ? (ga * p[c] - q_total / (static_cast<double>(C) * denom)) / (denom * r) : 0.0;
        const S* xp = in + (n * C + c) * HW;
        const G* gp = g + (n * C + c) * HW;
        G* q = gx + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i)
          q[i] = static_cast<G>(static_cast<double>(ld(gp[i])) * diag +
                                static_cast<double>(ld(xp[i])) * coef);
      }
    }
    return 0;
  });
  for (std::int64_t i = 0; i < plen; ++i) {
    out.ggamma.set(i, ggamma[i]);
    out.gbeta.set(i, gbeta[i]);
  }
  return out;
}

Tensor max_pool2d(const Tensor& x, int k, int s, std::vector<std::int64_t>* argmax) {
  require_rank4(x, "max_pool2d");
  if (k <= 0 || s <= 0) throw std::invalid_argument("max_pool2d: bad kernel/stride");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t OH = pool_out(H, k, s), OW = pool_out(W, k, s);
  if (OH < 1 || OW < 1) throw std::invalid_argument("max_pool2d: window larger than input");
  Tensor y(x.dtype(), {N, C, OH, OW});
  if (argmax) argmax->assign(static_cast<std::size_t>(y.numel()), 0);
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* in = x.data<S>();
    S* out = y.data<S>();
    std::int64_t oi = 0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const std::int64_t base = (n * C + c) * H * W;
        for (std::int64_t oh = 0; oh < OH; ++oh)
          for (std::int64_t ow = 0; ow < OW; ++ow, ++oi) {
            std::int64_t best = base + (oh * s) * W + ow * s;
            auto bv = ld(in[best]);
            for (int dh = 0; dh < k; ++dh)
              for (int dw = 0; dw < k; ++dw) {
                const std::int64_t idx = base + (oh * s + dh) * W + (ow * s + dw);
                const auto v = ld(in[idx]);
                if (v > bv) {  // first occurrence wins ties
                  bv = v;
                  best = idx;
                }
              }
            out[oi] = in[best];
            if (argmax) (*argmax)[oi] = best;
          }
      }
    return 0;
  });
  return y;
}

Tensor max_pool2d_vjp(const std::vector<std::int64_t>& argmax,
                      const std::vector<std::int64_t>& in_shape, const Tensor& grad_out) {
  if (argmax.size() != static_cast<std::size_t>(grad_out.numel()))
    throw std::invalid_argument("max_pool2d_vjp: argmax length mismatch");
  Tensor gx(grad_out.dtype(), in_shape);
  dispatch(grad_out.dtype(), [&](auto tag) {
    using G = decltype(tag);
    const G* g = grad_out.data<G>();
    G* out = gx.data<G>();
    for (std::size_t i = 0; i < argmax.size(); ++i) out[argmax[i]] += g[i];
    return 0;
  });
  return gx;
}

Tensor avg_pool2d(const Tensor& x, int k, int s) {
  require_rank4(x, "avg_pool2d");
  if (k <= 0 || s <= 0) throw std::invalid_argument("avg_pool2d: bad kernel/stride");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t OH = pool_out(H, k, s), OW = pool_out(W, k, s);
  if (OH < 1 || OW < 1) throw std::invalid_argument("avg_pool2d: window larger than input");
  Tensor y(x.dtype(), {N, C, OH, OW});
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    using A = acc_t<S>;
    const A inv = A(1) / static_cast<A>(k * k);
    const S* in = x.data<S>();
    S* out = y.data<S>();
    std::int64_t oi = 0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const S* plane = in + (n * C + c) * H * W;
        for (std::int64_t oh = 0; oh < OH; ++oh)
          for (std::int64_t ow = 0; ow < OW; ++ow, ++oi) {
            A acc = 0;
            for (int dh = 0; dh < k; ++dh)
              for (int dw = 0; dw < k; ++dw)
                acc += static_cast<A>(ld(plane[(oh * s + dh) * W + ow * s + dw]));
            out[oi] = S(acc * inv);
          }
      }
    return 0;
  });
  return y;
}

Tensor avg_pool2d_vjp(const std::vector<std::int64_t>& in_shape, int k, int s,
                      const Tensor& grad_out) {
  Tensor gx(grad_out.dtype(), in_shape);
  const std::int64_t N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
  const std::int64_t OH = grad_out.dim(2), OW = grad_out.dim(3);
  dispatch(grad_out.dtype(), [&](auto tag) {
    using G = decltype(tag);
    using A = acc_t<G>;
    const A inv = A(1) / static_cast<A>(k * k);
    const G* g = grad_out.data<G>();
    G* out = gx.data<G>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        G* plane = out + (n * C + c) * H * W;
        const G* gp = g + (n * C + c) * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh)
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const A share = static_cast<A>(ld(gp[oh * OW + ow])) * inv;
            for (int dh = 0; dh < k; ++dh)
              for (int dw = 0; dw < k; ++dw)
                plane[(oh * s + dh) * W + ow * s + dw] += G(share);
          }
      }
    return 0;
  });
  return gx;
}

Tensor adaptive_avg_pool(const Tensor& x) {
  require_rank4(x, "adaptive_avg_pool");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor y(x.dtype(), {N, C, 1, 1});
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    using A = acc_t<S>;
    const S* in = x.data<S>();
    S* out = y.data<S>();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      A acc = 0;
      const S* p = in + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) acc += static_cast<A>(ld(p[i]));
      out[nc] = S(acc / static_cast<A>(HW));
    }
    return 0;
  });
  return y;
}

Tensor adaptive_avg_pool_vjp(const std::vector<std::int64_t>& in_shape, const Tensor& grad_out) {
  Tensor gx(grad_out.dtype(), in_shape);
  const std::int64_t N = in_shape[0], C = in_shape[1], HW = in_shape[2] * in_shape[3];
  dispatch(grad_out.dtype(), [&](auto tag) {
    using G = decltype(tag);
    using A = acc_t<G>;
    const G* g = grad_out.data<G>();
    G* out = gx.data<G>();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const G share = G(static_cast<A>(ld(g[nc])) / static_cast<A>(HW));
      G* p = out + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) p[i] = share;
    }
    return 0;
  });
  return gx;
}

Tensor channel_shuffle(const Tensor& x, std::int64_t groups) {
  require_rank4(x, "channel_shuffle");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups <= 0 || C % groups) throw std::invalid_argument("channel_shuffle: groups must divide C");
  const std::int64_t per = C / groups;
  Tensor y(x.dtype(), x.shape());
  const std::size_t plane = static_cast<std::size_t>(HW) * dtype_size(x.dtype());
  const auto* in = static_cast<const std::uint8_t*>(x.raw());
  auto* out = static_cast<std::uint8_t*>(y.raw());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t dst = (c % per) * groups + c / per;
      std::memcpy(out + (static_cast<std::size_t>(n * C + dst)) * plane,
                  in + (static_cast<std::size_t>(n * C + c)) * plane, plane);
    }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b) {
  if (w.rank() != 2) throw std::invalid_argument("linear: weight must be rank 2");
  const std::int64_t N = x.dim(0);
  const std::int64_t F = x.numel() / N;
  const std::int64_t K = w.dim(0);
  if (w.dim(1) != F)
    throw std::invalid_argument("linear: feature mismatch, input " + std::to_string(F) +
                                " vs weight " + std::to_string(w.dim(1)));
  if (b && b->numel() != K) throw std::invalid_argument("linear: bias length mismatch");
  Tensor y(x.dtype(), {N, K});
  dispatch(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    using A = acc_t<S>;
    const S* in = x.data<S>();
    const S* wp = w.data<S>();
    S* out = y.data<S>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t k = 0; k < K; ++k) {
        A acc = b ? static_cast<A>(ld(b->data<S>()[k])) : A(0);
        const S* xr = in + n * F;
        const S* wr = wp + k * F;
        for (std::int64_t f = 0; f < F; ++f)
          acc += static_cast<A>(ld(xr[f])) * static_cast<A>(ld(wr[f]));
        out[n * K + k] = S(acc);
      }
    return 0;
  });
  return y;
}

LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& grad_out) {
  const std::int64_t N = x.dim(0);
  const std::int64_t F = x.numel() / N;
  const std::int64_t K = w.dim(0);
  if (grad_out.shape() != std::vector<std::int64_t>{N, K})
    throw std::invalid_argument("linear_vjp: grad shape mismatch");
  require_grad(grad_out, x.dtype(), "linear_vjp");
  const DType gdt = grad_dtype(x.dtype());
  LinearGrads out;
  out.gx = Tensor(gdt, x.shape());
  out.gw = Tensor(gdt, w.shape());
  out.gb = Tensor(gdt, {K});
  dispatch_sg(x.dtype(), [&](auto stag, auto gtag) {
    using S = decltype(stag);
    using G = decltype(gtag);
    using A = acc_t<G>;
    const S* xp = x.data<S>();
    const S* wp = w.data<S>();
    const G* g = grad_out.data<G>();
    G* gx = out.gx.data<G>();
    G* gw = out.gw.data<G>();
    G* gb = out.gb.data<G>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t f = 0; f < F; ++f) {
        A acc = 0;
        for (std::int64_t k = 0; k < K; ++k)
          acc += static_cast<A>(ld(g[n * K + k])) * static_cast<A>(ld(wp[k * F + f]));
        gx[n * F + f] = static_cast<G>(acc);
      }
    for (std::int64_t k = 0; k < K; ++k) {
      A bacc = 0;
      for (std::int64_t n = 0; n < N; ++n) bacc += static_cast<A>(ld(g[n * K + k]));
      gb[k] = static_cast<G>(bacc);
      for (std::int64_t f = 0; f < F; ++f) {
        A acc = 0;
        for (std::int64_t n = 0; n < N; ++n)
          acc += static_cast<A>(ld(g[n * K + k])) * static_cast<A>(ld(xp[n * F + f]));
        gw[k * F + f] = static_cast<G>(acc);
      }
    }
    return 0;
  });
  return out;
}

CeResult softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be rank 2");
  const std::int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != N)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  CeResult res;
  res.grad_logits = Tensor(grad_dtype(logits.dtype()), logits.shape());
  double total = 0;
  dispatch_sg(logits.dtype(), [&](auto stag, auto gtag) {
    using S = decltype(stag);
    using G = decltype(gtag);
    const S* z = logits.data<S>();
    G* g = res.grad_logits.data<G>();
    std::vector<double> row(static_cast<std::size_t>(K));
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t lab = labels[static_cast<std::size_t>(n)];
      if (lab < 0 || lab >= K)
        throw std::invalid_argument("softmax_cross_entropy: label out of range");
      double mx = -1e300;
      for (std::int64_t k = 0; k < K; ++k) {
        row[k] = static_cast<double>(ld(z[n * K + k]));
        mx = std::max(mx, row[k]);
      }
      double sum = 0;
      for (std::int64_t k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
      const double lse = mx + std::log(sum);
      total += lse - row[lab];
      for (std::int64_t k = 0; k < K; ++k) {
        const double p = std::exp(row[k] - lse);
        g[n * K + k] = static_cast<G>((p - (k == lab ? 1.0 : 0.0)) / static_cast<double>(N));
      }
    }
    return 0;
  });
  res.loss = total / static_cast<double>(N);
  return res;
}

}  // namespace taku
