#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "takunet/ops.hpp"
#include "takunet/tensor.hpp"

namespace taku {

struct ArchConfig {
  std::int64_t input_h = 240, input_w = 240;
  std::int64_t num_classes = 5;
  std::int64_t stem_channels = 40;
  std::array<std::int64_t, 4> stage_depths{5, 5, 5, 4};
  std::array<std::int64_t, 4> stage_out_channels{40, 240, 240, 240};
  bool dense_connections = true;
  bool grn = true;
  bool channel_shuffle = true;
  bool refiner = true;
  bool conv_bias = false;      // biases on convs that precede BN
  bool grn_per_channel = false;  // false: scalar gamma/beta
  DType precision = DType::f32;

  void validate() const;
  // width the Taku blocks of stage s (0-based) run at
  std::int64_t stage_width(int s) const {
    return s == 0 ? stem_channels : stage_out_channels[static_cast<std::size_t>(s - 1)];
  }
  // pointwise-conv input channels of downsampler s
  std::int64_t ds_in_channels(int s) const {
    return dense_connections ? 2 * stage_width(s) : stage_width(s);
  }
  // groups = floor((in_channels + out_channels) / 4); without dense
  // connections the in term degenerates to the Taku-block output width
  std::int64_t ds_groups(int s) const { return (2 * stage_width(s)) / 4; }

  std::string canonical_text() const;
  static ArchConfig from_text(const std::string& text);
};

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

struct ConvBnLayer {
  ConvSpec spec;
  Tensor w, b;  // b empty unless spec.bias
  BatchNormState bn;
};

struct DownsamplerLayer {
  ConvSpec spec;
  Tensor w, b;
  BatchNormState bn;
  GrnState grn;
  bool max_pool = true;
};

// per-batch activation cache captured by a train-mode forward;
// ReLU6 inputs are recomputed from the cached conv outputs and BN stats
struct FwdCache {
  bool valid = false;
  Tensor input;
  Tensor stem_u1, stem_u2;
  BnCache stem_bn1, stem_bn2;
  struct BlockCache {
    Tensor x, u;
    BnCache bn;
  };
  std::array<std::vector<BlockCache>, 4> blocks;
  struct DsCache {
    Tensor pw_in;  // after concat + shuffle
    Tensor u;      // pointwise conv output
    Tensor p;      // pooled activation (GRN input)
    BnCache bn;
    GrnCache grn;
    std::vector<std::int64_t> argmax;     // max-pool stages only
    std::vector<std::int64_t> act_shape;  // pre-pool shape
    std::vector<std::int64_t> cat_shape;
  } ds[4];
  Tensor ref_x, ref_u;
  BnCache ref_bn;
  std::vector<std::int64_t> ref_out_shape;
  Tensor pooled;  // classifier input
};

class TakuNet {
public:
  explicit TakuNet(ArchConfig cfg);

  const ArchConfig& config() const { return cfg_; }

  // Kaiming-uniform fan-in for conv/linear weights, BN gamma=1/beta=0,
  // GRN gamma=beta=0, biases 0; draw order == parameters() order
  void init_params(std::uint64_t seed);

  // train mode updates BN running stats and fills the cache when given
  Tensor forward(const Tensor& x, bool train, FwdCache* cache = nullptr);

  // gradients aligned with parameters() order, in grad_dtype(precision)
  std::vector<Tensor> backward(const FwdCache& cache, const Tensor& grad_logits);

  std::vector<ParamRef> parameters();
  std::vector<ParamRef> buffers();  // BN running stats
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  std::vector<std::pair<std::string, const Tensor*>> named_buffers() const;

  ConvBnLayer stem_conv, stem_dw;
  std::array<std::vector<ConvBnLayer>, 4> stages;
  std::array<DownsamplerLayer, 4> downsamplers;
  ConvBnLayer refiner;
  Tensor classifier_w, classifier_b;

private:
  ArchConfig cfg_;
};

struct CountRow {
  std::string name;
  std::int64_t value = 0;
};

struct CountReport {
  std::vector<CountRow> rows;
  std::int64_t total = 0;
};

// learnables only: conv w/b, BN gamma/beta, GRN gamma/beta, linear w/b
CountReport count_params(const ArchConfig& cfg);
CountReport count_params(const TakuNet& model);  // from live tensors

// 1 MAC = 1 FLOP; BN/activation/pool 1 op per output element;
// residual add 1 per element; GRN 4 per element + C per sample;
// concat and shuffle are free
CountReport count_flops(const ArchConfig& cfg, std::int64_t h, std::int64_t w);

struct DeriveConstraints {
  std::int64_t stem = 40;
  std::array<std::int64_t, 4> depths{5, 5, 5, 4};
  std::int64_t final_width = 240;  // classifier in-features, fixed by the 241 param delta
  std::int64_t target_params_5 = 37'685;
  std::int64_t target_params_4 = 37'444;
  double flops_240 = 35.93e6;
  double flops_224 = 31.38e6;
  std::int64_t width_lo = 40, width_hi = 240, width_step = 2;
  double param_tolerance = 0.05;  // fallback window
  double flop_tolerance = 0.02;
};

struct DeriveCandidate {
  std::array<std::int64_t, 4> widths;
  bool conv_bias = false;
  bool grn_per_channel = false;
  std::int64_t params5 = 0, params4 = 0;
  std::int64_t flops_240 = 0, flops_224 = 0;
  bool in_flop_window = false;
};

struct DeriveResult {
  bool exact = false;
  ArchConfig config;              // shipped choice
  DeriveCandidate chosen;
  std::vector<DeriveCandidate> exact_matches;
  std::vector<DeriveCandidate> nearest;  // by |params5 - target|, ties lexicographic
  std::vector<std::string> report;
};

// exhaustive search over monotone width progressions
// stem <= w1 <= w2 <= w3 <= final, free bits: conv_bias, grn_per_channel
DeriveResult derive_channel_config(const DeriveConstraints& constraints = {});

}  // namespace taku
