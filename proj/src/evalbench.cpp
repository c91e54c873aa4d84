#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <json.hpp>

#include "takunet/evalbench.hpp"
#include "takunet/kv.hpp"
#include "takunet/ops.hpp"

namespace taku {

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

F1Report f1_scores(const ConfusionMatrix& cm) {
  const std::int64_t k = cm.num_classes;
  F1Report rep;
  rep.per_class.resize(static_cast<std::size_t>(k), 0.0);
  for (std::int64_t c = 0; c < k; ++c) {
    std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::int64_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::int64_t denom = 2 * tp + fp + fn;
    rep.per_class[static_cast<std::size_t>(c)] =
        denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  rep.macro = k == 0 ? 0.0
                     : std::accumulate(rep.per_class.begin(), rep.per_class.end(), 0.0) /
                           static_cast<double>(k);
  return rep;
}

EvalResult evaluate(TakuNet& model, BatchSource& batches) {
  const std::int64_t k = model.config().num_classes;
  EvalResult res;
  res.confusion = ConfusionMatrix(k);
  double loss_sum = 0.0;
  std::int64_t n_total = 0, correct = 0;
  batches.reset(0);
  Batch b;
  while (batches.next(b)) {
    Tensor logits = model.forward(b.x, false);
    const CeResult ce = softmax_cross_entropy(logits, b.labels);
    const auto n = static_cast<std::int64_t>(b.labels.size());
    loss_sum += ce.loss * static_cast<double>(n);
    n_total += n;
    Tensor lf = logits.dtype() == DType::f64 ? logits : cast(logits, DType::f32);
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t pred = 0;
      double best = -1e300;
      for (std::int64_t c = 0; c < k; ++c) {
        const double v = lf.dtype() == DType::f64 ? lf.data<double>()[i * k + c]
                                                  : static_cast<double>(lf.data<float>()[i * k + c]);
        if (v > best) {
          best = v;
          pred = c;
        }
      }
      res.confusion.at(b.labels[static_cast<std::size_t>(i)], pred) += 1;
      correct += pred == b.labels[static_cast<std::size_t>(i)];
    }
  }
  if (n_total == 0) throw std::runtime_error("evaluate: no samples");
  res.f1 = f1_scores(res.confusion);
  res.mean_loss = loss_sum / static_cast<double>(n_total);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(n_total);
  return res;
}

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct SingleThreadScope {
#ifdef _OPENMP
  int saved = omp_get_max_threads();
  SingleThreadScope() { omp_set_num_threads(1); }
  ~SingleThreadScope() { omp_set_num_threads(saved); }
#endif
};

}  // namespace

BenchResult bench_model(TakuNet& model, std::int64_t iters, std::uint64_t seed,
                        std::int64_t warmup) {
  iters = std::max<std::int64_t>(iters, 30);
  warmup = std::max<std::int64_t>(warmup, 0);
  const ArchConfig& cfg = model.config();
  BenchResult res;
  res.input_h = cfg.input_h;
  res.input_w = cfg.input_w;
  res.warmup = warmup;
  res.iters = iters;
  Tensor x(DType::f32, {1, 3, cfg.input_h, cfg.input_w});
  Rng rng(seed);
  float* p = x.data<float>();
  for (std::int64_t i = 0; i < x.numel(); ++i) p[i] = static_cast<float>(rng.uniform());
  if (cfg.precision != DType::f32) x = cast(x, cfg.precision);
  SingleThreadScope pin;
  for (std::int64_t i = 0; i < warmup; ++i) (void)model.forward(x, false);
  res.times_ms.resize(static_cast<std::size_t>(iters));
  for (std::int64_t i = 0; i < iters; ++i) {
    const double t0 = now_ms();
    (void)model.forward(x, false);
    res.times_ms[static_cast<std::size_t>(i)] = now_ms() - t0;
  }
  std::vector<double> times = res.times_ms;
  std::sort(times.begin(), times.end());
  const auto n = times.size();
  res.mean_ms = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(n);
  res.median_ms = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  const auto p95_idx =
      static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)) - 1);
  res.p95_ms = times[std::min(p95_idx, n - 1)];
  res.fps = res.mean_ms > 0 ? 1000.0 / res.mean_ms : 0.0;
  return res;
}

namespace {

volatile float g_bench_sink = 0.0f;
volatile float g_celu_alpha = 1.0f;

template <class F>
double time_activation(const std::vector<float>& in, std::vector<float>& out, std::int64_t iters,
                       F f) {
  const std::size_t n = in.size();
  float sink = 0.0f;
  const double t0 = now_ms();
  for (std::int64_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(in[i]);
    sink += out[n / 2] + out[n - 1];
  }
  const double t1 = now_ms();
  g_bench_sink = sink;
  return t1 - t0;
}

}  // namespace

std::vector<ActivationTime> bench_activations(std::int64_t elems, std::int64_t iters,
                                              std::uint64_t seed) {
  if (elems < 1 || iters < 1) throw std::invalid_argument("bench_activations: bad sizes");
  std::vector<float> in(static_cast<std::size_t>(elems));
  std::vector<float> out(static_cast<std::size_t>(elems));
  Rng rng(seed);
  for (auto& v : in) v = static_cast<float>(rng.uniform(-3.0, 3.0));

  SingleThreadScope pin;
  std::vector<ActivationTime> res;
  res.push_back({"relu", time_activation(in, out, iters, [](float x) { return act_relu(x); })});
  res.push_back({"relu6", time_activation(in, out, iters, [](float x) { return act_relu6(x); })});
  res.push_back({"leaky_relu",
                 time_activation(in, out, iters, [](float x) { return act_leaky_relu(x); })});
  res.push_back({"elu", time_activation(in, out, iters, [](float x) { return act_elu(x); })});
  const float celu_a = g_celu_alpha;
  res.push_back(
      {"celu", time_activation(in, out, iters, [celu_a](float x) { return act_celu(x, celu_a); })});
  res.push_back({"gelu", time_activation(in, out, iters, [](float x) { return act_gelu(x); })});
  std::stable_sort(res.begin(), res.end(), [](const ActivationTime& a, const ActivationTime& b) {
    return a.total_ms < b.total_ms;
  });
  return res;
}

std::string report_json(const ArchConfig& arch, const EvalResult& ev, const BenchResult& bench,
                        const std::vector<std::string>& class_names) {
  using nlohmann::json;
  json cfg = json::object();
  for (const auto& [k, v] : parse_kv_lines(arch.canonical_text())) cfg[k] = v;
  const CountReport params = count_params(arch);
  const CountReport flops = count_flops(arch, arch.input_h, arch.input_w);
  json rep;
  rep["model"] = {
      {"params", params.total},
      {"flops", flops.total},
      {"size_bytes", params.total * static_cast<std::int64_t>(dtype_size(arch.precision))},
      {"config", cfg}};
  json conf = json::array();
  for (std::int64_t a = 0; a < ev.confusion.num_classes; ++a) {
    json row = json::array();
    for (std::int64_t p = 0; p < ev.confusion.num_classes; ++p) row.push_back(ev.confusion.at(a, p));
    conf.push_back(row);
  }
  rep["metrics"] = {{"confusion", conf},
                    {"f1_per_class", ev.f1.per_class},
                    {"f1_macro", ev.f1.macro},
                    {"accuracy", ev.accuracy},
                    {"mean_loss", ev.mean_loss},
                    {"classes", class_names}};
  rep["latency"] = {{"device", bench.device},
                    {"batch", bench.batch},
                    {"input", {bench.input_h, bench.input_w}},
                    {"warmup", bench.warmup},
                    {"iters", bench.iters},
                    {"mean_ms", bench.mean_ms},
                    {"median_ms", bench.median_ms},
                    {"p95_ms", bench.p95_ms},
                    {"fps", bench.fps}};
  return rep.dump(2) + "\n";
}

}  // namespace taku
