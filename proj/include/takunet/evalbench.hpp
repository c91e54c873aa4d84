#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "takunet/arch.hpp"
#include "takunet/data.hpp"

namespace taku {

struct ConfusionMatrix {
  std::int64_t num_classes = 0;
  std::vector<std::int64_t> counts;  // row-major, row = actual, col = predicted

  explicit ConfusionMatrix(std::int64_t k = 0)
      : num_classes(k), counts(static_cast<std::size_t>(k * k), 0) {}
  std::int64_t& at(std::int64_t actual, std::int64_t pred) {
    return counts[static_cast<std::size_t>(actual * num_classes + pred)];
  }
  std::int64_t at(std::int64_t actual, std::int64_t pred) const {
    return counts[static_cast<std::size_t>(actual * num_classes + pred)];
  }
  std::int64_t total() const;
};

struct F1Report {
  std::vector<double> per_class;
  double macro = 0.0;
};

// per-class F1 = 2TP / (2TP + FP + FN); classes with an empty denominator
// score 0, macro is the unweighted mean
F1Report f1_scores(const ConfusionMatrix& cm);

struct EvalResult {
  ConfusionMatrix confusion;
  F1Report f1;
  double mean_loss = 0.0;  // sample-weighted cross-entropy
  double accuracy = 0.0;
};

// runs the model in eval mode over every batch
EvalResult evaluate(TakuNet& model, BatchSource& batches);

struct BenchResult {
  std::string device = "cpu";
  std::int64_t batch = 1;
  std::int64_t input_h = 0, input_w = 0;
  std::int64_t warmup = 0, iters = 0;
  std::vector<double> times_ms;  // per timed iteration, run order
  double mean_ms = 0.0, median_ms = 0.0, p95_ms = 0.0, fps = 0.0;
};

// batch-1 eval-mode forward latency on one thread; warmup runs excluded,
// iters clamped up to 30, fps = 1000/mean_ms
BenchResult bench_model(TakuNet& model, std::int64_t iters, std::uint64_t seed,
                        std::int64_t warmup = 3);

struct ActivationTime {
  std::string name;
  double total_ms = 0.0;
};

// the six activations timed by bench_activations, usable standalone
inline float act_relu(float x) { return x > 0.0f ? x : 0.0f; }
inline float act_relu6(float x) { return x < 0.0f ? 0.0f : (x > 6.0f ? 6.0f : x); }
inline float act_leaky_relu(float x) { return x > 0.0f ? x : 0.01f * x; }
inline float act_elu(float x) { return x > 0.0f ? x : std::expm1(x); }
inline float act_celu(float x, float alpha) {
  return x > 0.0f ? x : alpha * std::expm1(x / alpha);
}
inline float act_gelu(float x) {
  const float c = 0.7978845608028654f;  // sqrt(2/pi), tanh approximation
  return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

// elementwise sweep over an `elems`-long f32 buffer, `iters` passes each,
// one thread; returns times sorted ascending
std::vector<ActivationTime> bench_activations(std::int64_t elems, std::int64_t iters,
                                              std::uint64_t seed);

// consolidated report document:
// {model: {params, flops, size_bytes, config}, metrics: {confusion,
//  f1_per_class, f1_macro, ...}, latency: {device, batch, input, mean_ms,
//  median_ms, p95_ms, fps, ...}}
std::string report_json(const ArchConfig& arch, const EvalResult& ev, const BenchResult& bench,
                        const std::vector<std::string>& class_names);

}  // namespace taku
