#pragma once

#include <optional>
#include <vector>

#include "takunet/tensor.hpp"

namespace taku {

struct ConvSpec {
  std::int64_t in_channels = 0, out_channels = 0;
  int kh = 1, kw = 1;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dil_h = 1, dil_w = 1;
  std::int64_t groups = 1;
  bool bias = false;

  void validate() const;
  std::int64_t out_extent(std::int64_t in, int k, int s, int p, int d) const {
    return (in + 2 * p - static_cast<std::int64_t>(d) * (k - 1) - 1) / s + 1;
  }
};

// gradients stored in f32 unless the forward ran in f64
DType grad_dtype(DType model_dtype);

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, const ConvSpec& spec);

struct ConvGrads {
  Tensor gx, gw, gb;  // gx undefined when skipped
};
ConvGrads conv2d_vjp(const Tensor& x, const Tensor& w, const ConvSpec& spec,
                     const Tensor& grad_out, bool need_gx = true);

Tensor relu6(const Tensor& x);
Tensor relu6_vjp(const Tensor& x, const Tensor& grad_out);

struct BatchNormState {
  Tensor gamma, beta;               // model dtype
  Tensor running_mean, running_var; // f32 (f64 in f64 mode)
  double eps = 1e-5;
  double momentum = 0.1;
};

struct BnCache {
  std::vector<double> mean, invstd;
};

Tensor batch_norm_train(const Tensor& x, BatchNormState& state, BnCache& cache);
Tensor batch_norm_eval(const Tensor& x, const BatchNormState& state);
// normalization with frozen cached statistics; batch_norm_train routes its
// output through this, so recomputing an activation from (x, cache) is
// bit-identical to the original forward
Tensor bn_apply_cached(const Tensor& x, const BatchNormState& state, const BnCache& cache);

struct BnGrads {
  Tensor gx, ggamma, gbeta;
};
BnGrads batch_norm_vjp(const Tensor& x, const BatchNormState& state, const BnCache& cache,
                       const Tensor& grad_out);

struct GrnState {
  Tensor gamma, beta;  // length C (per-channel) or length 1 (scalar)
  double eps = 1e-6;
};

struct GrnCache {
  std::vector<double> norms;       // r_c per (n,c)
  std::vector<double> mean_norms;  // M per n
};

Tensor grn(const Tensor& x, const GrnState& state, GrnCache& cache);

struct GrnGrads {
  Tensor gx, ggamma, gbeta;
};
GrnGrads grn_vjp(const Tensor& x, const GrnState& state, const GrnCache& cache,
                 const Tensor& grad_out);

Tensor max_pool2d(const Tensor& x, int k, int s, std::vector<std::int64_t>* argmax = nullptr);
Tensor max_pool2d_vjp(const std::vector<std::int64_t>& argmax,
                      const std::vector<std::int64_t>& in_shape, const Tensor& grad_out);
Tensor avg_pool2d(const Tensor& x, int k, int s);
Tensor avg_pool2d_vjp(const std::vector<std::int64_t>& in_shape, int k, int s,
                      const Tensor& grad_out);
Tensor adaptive_avg_pool(const Tensor& x);
Tensor adaptive_avg_pool_vjp(const std::vector<std::int64_t>& in_shape, const Tensor& grad_out);

Tensor channel_shuffle(const Tensor& x, std::int64_t groups);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b);
struct LinearGrads {
  Tensor gx, gw, gb;
};
LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& grad_out);

struct CeResult {
  double loss;
  Tensor grad_logits;
};
CeResult softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

}  // namespace taku
