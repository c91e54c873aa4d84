#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "takunet/evalbench.hpp"
#include "takunet/rng.hpp"

using namespace taku;

namespace {

ArchConfig tiny_arch(std::int64_t classes = 2) {
  ArchConfig c;
  c.input_h = c.input_w = 64;
  c.stem_channels = 4;
  c.stage_depths = {1, 1, 1, 1};
  c.stage_out_channels = {8, 8, 8, 8};
  c.num_classes = classes;
  return c;
}

ConfusionMatrix cm_from(const std::vector<std::int64_t>& y_true,
                        const std::vector<std::int64_t>& y_pred, std::int64_t k) {
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < y_true.size(); ++i) ++cm.at(y_true[i], y_pred[i]);
  return cm;
}

}  // namespace

TEST_CASE("f1 oracle: perfect predictions") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 5;
  cm.at(1, 1) = 2;
  cm.at(2, 2) = 9;
  const F1Report r = f1_scores(cm);
  for (const double f : r.per_class) CHECK(f == doctest::Approx(1.0));
  CHECK(r.macro == doctest::Approx(1.0));
  CHECK(cm.total() == 16);
}

TEST_CASE("f1 oracle: two class worked example") {
  // y_true = 0,0,1,1  y_pred = 0,1,1,1
  const ConfusionMatrix cm = cm_from({0, 0, 1, 1}, {0, 1, 1, 1}, 2);
  const F1Report r = f1_scores(cm);
  REQUIRE(r.per_class.size() == 2);
  CHECK(r.per_class[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(r.per_class[1] == doctest::Approx(4.0 / 5).epsilon(1e-12));
  CHECK(r.macro == doctest::Approx(11.0 / 15).epsilon(1e-12));
}

TEST_CASE("f1 oracle: constant predictor on a balanced set") {
  // always predict class 0 over five balanced classes:
  // class 0 F1 = 2*2/(2*2+8+0) = 1/3, others 0 -> macro 1/15
  std::vector<std::int64_t> y_true, y_pred;
  for (std::int64_t c = 0; c < 5; ++c)
    for (int i = 0; i < 2; ++i) {
      y_true.push_back(c);
      y_pred.push_back(0);
    }
  const F1Report r = f1_scores(cm_from(y_true, y_pred, 5));
  CHECK(r.per_class[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  for (int c = 1; c < 5; ++c) CHECK(r.per_class[c] == 0.0);
  CHECK(r.macro == doctest::Approx(1.0 / 15).epsilon(1e-12));
}

TEST_CASE("f1 of an absent class is zero, not NaN") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 4;
  cm.at(1, 1) = 4;  // class 2 never appears in truth or prediction
  const F1Report r = f1_scores(cm);
  CHECK(r.per_class[2] == 0.0);
  CHECK(std::isfinite(r.macro));
  CHECK(r.macro == doctest::Approx(2.0 / 3).epsilon(1e-12));
}

TEST_CASE("per-class f1 is invariant under confusion transpose") {
  Rng rng(17);
  ConfusionMatrix cm(4);
  for (auto& c : cm.counts) c = static_cast<std::int64_t>(rng.randint(10));
  ConfusionMatrix tr(4);
  for (int a = 0; a < 4; ++a)
    for (int p = 0; p < 4; ++p) tr.at(a, p) = cm.at(p, a);
  const F1Report r1 = f1_scores(cm);
  const F1Report r2 = f1_scores(tr);
  for (int c = 0; c < 4; ++c)
    CHECK(r1.per_class[c] == doctest::Approx(r2.per_class[c]).epsilon(1e-12));
}

TEST_CASE("macro f1 is invariant under class relabeling") {
  Rng rng(19);
  std::vector<std::int64_t> y_true, y_pred;
  for (int i = 0; i < 60; ++i) {
    y_true.push_back(static_cast<std::int64_t>(rng.randint(3)));
    y_pred.push_back(static_cast<std::int64_t>(rng.randint(3)));
  }
  const F1Report base = f1_scores(cm_from(y_true, y_pred, 3));
  const std::int64_t perm[3] = {2, 0, 1};
  std::vector<std::int64_t> t2, p2;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    t2.push_back(perm[y_true[i]]);
    p2.push_back(perm[y_pred[i]]);
  }
  const F1Report rel = f1_scores(cm_from(t2, p2, 3));
  CHECK(base.macro == doctest::Approx(rel.macro).epsilon(1e-12));
}

TEST_CASE("duplicating the data doubles every confusion entry and keeps f1") {
  Rng rng(23);
  std::vector<std::int64_t> y_true, y_pred;
  for (int i = 0; i < 40; ++i) {
    y_true.push_back(static_cast<std::int64_t>(rng.randint(3)));
    y_pred.push_back(static_cast<std::int64_t>(rng.randint(3)));
  }
  auto t2 = y_true;
  auto p2 = y_pred;
  t2.insert(t2.end(), y_true.begin(), y_true.end());
  p2.insert(p2.end(), y_pred.begin(), y_pred.end());
  const ConfusionMatrix a = cm_from(y_true, y_pred, 3);
  const ConfusionMatrix b = cm_from(t2, p2, 3);
  for (std::size_t i = 0; i < a.counts.size(); ++i) CHECK(b.counts[i] == 2 * a.counts[i]);
  CHECK(f1_scores(a).macro == doctest::Approx(f1_scores(b).macro).epsilon(1e-12));
}

TEST_CASE("evaluate runs the model and fills every field") {
  ArchConfig arch = tiny_arch(3);
  TakuNet model(arch);
  model.init_params(2);
  auto samples = make_synthetic_samples(3, 4, 64, 64, 5);
  SampleBatches batches(samples, 5, 64, 64, DType::f32, false, 0);
  const EvalResult ev = evaluate(model, batches);

  CHECK(ev.confusion.num_classes == 3);
  CHECK(ev.confusion.total() == 12);  // one count per sample
  CHECK(ev.accuracy >= 0.0);
  CHECK(ev.accuracy <= 1.0);
  CHECK(std::isfinite(ev.mean_loss));
  CHECK(ev.mean_loss > 0.0);
  REQUIRE(ev.f1.per_class.size() == 3);

  // accuracy equals the diagonal mass
  std::int64_t diag = 0;
  for (int c = 0; c < 3; ++c) diag += ev.confusion.at(c, c);
  CHECK(ev.accuracy == doctest::Approx(static_cast<double>(diag) / 12).epsilon(1e-12));

  // deterministic: same model and data give the same confusion
  SampleBatches again(samples, 5, 64, 64, DType::f32, false, 0);
  const EvalResult ev2 = evaluate(model, again);
  CHECK(ev2.confusion.counts == ev.confusion.counts);
  CHECK(ev2.mean_loss == doctest::Approx(ev.mean_loss).epsilon(1e-12));

  SampleBatches empty({}, 4, 64, 64, DType::f32, false, 0);
  CHECK_THROWS_AS(evaluate(model, empty), std::runtime_error);
}

TEST_CASE("bench_model clamps iterations and reports consistent statistics") {
  ArchConfig arch = tiny_arch();
  TakuNet model(arch);
  model.init_params(0);
  const BenchResult r = bench_model(model, 5, 1, 1);  // asks for 5, gets 30

  CHECK(r.iters == 30);
  CHECK(r.warmup == 1);
  CHECK(r.device == "cpu");
  CHECK(r.batch == 1);
  CHECK(r.input_h == 64);
  CHECK(r.input_w == 64);
  REQUIRE(r.times_ms.size() == 30);
  for (const double t : r.times_ms) CHECK(t > 0.0);

  double sum = 0;
  for (const double t : r.times_ms) sum += t;
  CHECK(r.mean_ms == doctest::Approx(sum / 30).epsilon(1e-12));
  CHECK(r.fps == doctest::Approx(1000.0 / r.mean_ms).epsilon(1e-9));

  auto sorted = r.times_ms;
  std::sort(sorted.begin(), sorted.end());
  CHECK(r.median_ms == doctest::Approx((sorted[14] + sorted[15]) / 2).epsilon(1e-12));
  const std::size_t p95_idx =
      static_cast<std::size_t>(std::ceil(0.95 * 30)) - 1;  // index 28
  CHECK(r.p95_ms == doctest::Approx(sorted[p95_idx]).epsilon(1e-12));
  CHECK(r.p95_ms >= r.median_ms);
  CHECK(r.mean_ms >= 0.5 * r.median_ms);  // sanity against a broken timer
}

TEST_CASE("activation microbenchmark output shape and values") {
  const auto times = bench_activations(10000, 20, 3);
  REQUIRE(times.size() == 6);
  std::set<std::string> names;
  for (const auto& t : times) {
    names.insert(t.name);
    CHECK(t.total_ms > 0.0);
  }
  CHECK(names == std::set<std::string>{"relu", "relu6", "leaky_relu", "elu", "celu", "gelu"});
  for (std::size_t i = 1; i < times.size(); ++i)
    CHECK(times[i - 1].total_ms <= times[i].total_ms);  // sorted ascending
}

TEST_CASE("activation functions agree with their definitions") {
  CHECK(act_relu(0.0f) == 0.0f);
  CHECK(act_relu(-1.5f) == 0.0f);
  CHECK(act_relu(1.5f) == 1.5f);
  CHECK(act_relu6(7.0f) == 6.0f);
  CHECK(act_relu6(-1.0f) == 0.0f);
  CHECK(act_relu6(3.0f) == 3.0f);
  CHECK(act_leaky_relu(-2.0f) == doctest::Approx(-0.02f));
  CHECK(act_leaky_relu(2.0f) == 2.0f);
  CHECK(act_elu(0.0f) == 0.0f);
  CHECK(act_elu(-1.0f) == doctest::Approx(std::expm1(-1.0)));
  CHECK(act_celu(-1.0f, 1.0f) == doctest::Approx(act_elu(-1.0f)));
  CHECK(act_celu(-1.0f, 2.0f) == doctest::Approx(2.0 * std::expm1(-0.5)));
  CHECK(act_celu(3.0f, 2.0f) == 3.0f);
  CHECK(act_gelu(0.0f) == 0.0f);
  CHECK(act_gelu(10.0f) == doctest::Approx(10.0f).epsilon(1e-4));
  CHECK(act_gelu(-10.0f) == doctest::Approx(0.0f).epsilon(1e-4));
}

TEST_CASE("report json carries the full schema") {
  ArchConfig arch = tiny_arch(2);
  TakuNet model(arch);
  model.init_params(1);
  auto samples = make_synthetic_samples(2, 3, 64, 64, 2);
  SampleBatches batches(samples, 6, 64, 64, DType::f32, false, 0);
  const EvalResult ev = evaluate(model, batches);
  BenchResult bench;
  bench.input_h = bench.input_w = 64;

  const std::string text = report_json(arch, ev, bench, {"smoke", "normal"});
  const nlohmann::json doc = nlohmann::json::parse(text);

  CHECK(doc.at("model").at("params").get<std::int64_t>() == count_params(arch).total);
  CHECK(doc.at("model").at("flops").get<std::int64_t>() == count_flops(arch, 64, 64).total);
  CHECK(doc.at("model").at("size_bytes").get<std::int64_t>() == 4 * count_params(arch).total);
  CHECK(doc.at("model").at("config").is_object());

  const auto& metrics = doc.at("metrics");
  CHECK(metrics.at("confusion").size() == 2);
  CHECK(metrics.at("confusion")[0].size() == 2);
  CHECK(metrics.at("f1_per_class").size() == 2);
  CHECK(metrics.at("f1_macro").get<double>() == doctest::Approx(ev.f1.macro));
  CHECK(metrics.at("accuracy").get<double>() == doctest::Approx(ev.accuracy));
  CHECK(metrics.at("mean_loss").get<double>() == doctest::Approx(ev.mean_loss));
  CHECK(metrics.at("classes") == nlohmann::json({"smoke", "normal"}));

  const auto& lat = doc.at("latency");
  CHECK(lat.at("device").get<std::string>() == "cpu");
  CHECK(lat.at("batch").get<std::int64_t>() == 1);
  CHECK(lat.at("input") == nlohmann::json({64, 64}));
  for (const char* k : {"warmup", "iters", "mean_ms", "median_ms", "p95_ms", "fps"})
    CHECK(lat.contains(k));
}
