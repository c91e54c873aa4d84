#include <cstdio>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "takunet/checkpoint.hpp"
#include "takunet/config.hpp"
#include "takunet/evalbench.hpp"
#include "takunet/kv.hpp"
#include "takunet/tensor_io.hpp"

namespace {

constexpr const char* kVersion = "1.0.0";

using nlohmann::json;
using namespace taku;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config, data, out, precision, input;
  std::int64_t seed = 0, classes = 0, iters = 50;
  bool no_timing = false;
  std::vector<std::string> extras;
};

void add_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "key=value config file");
  sub->add_option("--data", f.data, "dataset root directory");
  sub->add_option("--out", f.out, "output path");
  sub->add_option("--seed", f.seed, "RNG seed");
  sub->add_option("--precision", f.precision, "f16|f32|f64")
      ->check(CLI::IsMember({"f16", "f32", "f64"}));
  sub->add_option("--input", f.input, "input size HxW");
  sub->add_option("--classes", f.classes, "number of classes");
  sub->add_option("--iters", f.iters, "benchmark iterations");
  sub->add_flag("--no-timing", f.no_timing, "zero all wall-clock fields");
  sub->add_option("overrides", f.extras, "key=value config overrides");
}

std::pair<std::int64_t, std::int64_t> parse_hxw(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= s.size())
    throw UsageError("--input wants HxW, got '" + s + "'");
  return {kv_to_int("input_h", s.substr(0, x)), kv_to_int("input_w", s.substr(x + 1))};
}

RunConfig build_config(const CLI::App* sub, const Flags& f, std::string* checkpoint) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = RunConfig::from_file(f.config);
  if (sub->count("--seed")) cfg.train.seed = static_cast<std::uint64_t>(f.seed);
  if (!f.precision.empty()) cfg.apply_kv("precision", f.precision);
  if (!f.input.empty()) {
    const auto [h, w] = parse_hxw(f.input);
    cfg.apply_kv("input_h", std::to_string(h));
    cfg.apply_kv("input_w", std::to_string(w));
  }
  if (sub->count("--classes")) cfg.apply_kv("num_classes", std::to_string(f.classes));
  for (const std::string& kv : f.extras) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError("overrides must be key=value, got '" + kv + "'");
    const std::string key = kv_trim(kv.substr(0, eq));
    const std::string value = kv_trim(kv.substr(eq + 1));
    if (key == "checkpoint") {
      if (!checkpoint) throw UsageError("'checkpoint' is not used by this command");
      *checkpoint = value;
      continue;
    }
    try {
      cfg.apply_kv(key, value);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  cfg.arch.validate();
  cfg.train.validate();
  return cfg;
}

void print_header(const RunConfig& cfg) {
  std::printf("takunet %s seed=%llu config=%016llx\n", kVersion,
              static_cast<unsigned long long>(cfg.train.seed),
              static_cast<unsigned long long>(cfg.hash()));
}

json config_json(const ArchConfig& arch) {
  json j = json::object();
  for (const auto& [k, v] : parse_kv_lines(arch.canonical_text())) j[k] = v;
  return j;
}

json model_json(const ArchConfig& arch) {
  const CountReport params = count_params(arch);
  const CountReport flops = count_flops(arch, arch.input_h, arch.input_w);
  return json{{"params", params.total},
              {"flops", flops.total},
              {"size_bytes", params.total * static_cast<std::int64_t>(dtype_size(arch.precision))},
              {"config", config_json(arch)}};
}

json latency_json(const BenchResult& b) {
  return json{{"device", b.device},
              {"batch", b.batch},
              {"input", {b.input_h, b.input_w}},
              {"iters", b.iters},
              {"mean_ms", b.mean_ms},
              {"median_ms", b.median_ms},
              {"p95_ms", b.p95_ms},
              {"fps", b.fps}};
}

DatasetIndex load_index(const Flags& f, const RunConfig& cfg) {
  if (f.data.empty()) throw UsageError("--data is required for this command");
  return index_dataset(f.data, cfg.data, cfg.train.seed);
}

std::vector<Sample> class_checked_samples(const DatasetIndex& idx, const RunConfig& cfg,
                                          Split split) {
  if (static_cast<std::int64_t>(idx.class_names.size()) != cfg.arch.num_classes)
    throw std::runtime_error("dataset has " + std::to_string(idx.class_names.size()) +
                             " classes but the model wants " +
                             std::to_string(cfg.arch.num_classes) + "; pass --classes");
  return samples_from_index(idx, split);
}

int cmd_train(const CLI::App* sub, const Flags& f) {
  std::string ckpt;
  RunConfig cfg = build_config(sub, f, nullptr);
  (void)ckpt;
  print_header(cfg);
  const DatasetIndex idx = load_index(f, cfg);
  std::vector<Sample> samples = class_checked_samples(idx, cfg, Split::train);
  AugmentationPolicy policy;
  FitOptions opts;
  opts.out_dir = f.out.empty() ? "." : f.out;
  opts.timing = !f.no_timing;
  opts.policy = cfg.data.augment ? &policy : nullptr;
  opts.verbose = true;
  std::filesystem::create_directories(opts.out_dir);
  atomic_write_file(opts.out_dir + "/config.txt", cfg.canonical_text());
  const FitResult r = fit(cfg.arch, cfg.train, samples, opts);
  std::printf("best fold=%lld epoch=%lld val_f1_macro=%s checkpoint=%s\n",
              static_cast<long long>(r.best_fold), static_cast<long long>(r.best_epoch),
              kv_format_double(r.best_val_f1).c_str(), r.best_checkpoint.c_str());
  std::printf("metrics=%s\n", r.metrics_path.c_str());
  return 0;
}

int cmd_eval(const CLI::App* sub, const Flags& f) {
  std::string ckpt;
  RunConfig cfg = build_config(sub, f, &ckpt);
  if (ckpt.empty()) throw UsageError("eval needs checkpoint=PATH");
  print_header(cfg);
  std::optional<DType> override_dt;
  if (!f.precision.empty()) override_dt = parse_dtype(f.precision);
  TakuNet model = load_checkpoint(ckpt, nullptr, override_dt);
  const ArchConfig& arch = model.config();
  const DatasetIndex idx = load_index(f, cfg);
  if (static_cast<std::int64_t>(idx.class_names.size()) != arch.num_classes)
    throw std::runtime_error("dataset has " + std::to_string(idx.class_names.size()) +
                             " classes but the checkpoint wants " +
                             std::to_string(arch.num_classes));
  SampleBatches batches(samples_from_index(idx, Split::test), cfg.train.batch_size, arch.input_h,
                        arch.input_w, arch.precision, false, 0);
  const EvalResult ev = evaluate(model, batches);

  BenchResult bench;
  bench.input_h = arch.input_h;
  bench.input_w = arch.input_w;
  if (!f.no_timing) bench = bench_model(model, f.iters, cfg.train.seed);

  const std::string out = f.out.empty() ? "report.json" : f.out;
  atomic_write_file(out, report_json(arch, ev, bench, idx.class_names));
  std::printf("test samples=%lld f1_macro=%s accuracy=%s loss=%s\n",
              static_cast<long long>(ev.confusion.total()),
              kv_format_double(ev.f1.macro).c_str(), kv_format_double(ev.accuracy).c_str(),
              kv_format_double(ev.mean_loss).c_str());
  std::printf("report=%s\n", out.c_str());
  return 0;
}

int cmd_analyze(const CLI::App* sub, const Flags& f) {
  RunConfig cfg = build_config(sub, f, nullptr);
  print_header(cfg);
  const CountReport params = count_params(cfg.arch);
  const CountReport flops = count_flops(cfg.arch, cfg.arch.input_h, cfg.arch.input_w);
  std::printf("parameters\n");
  for (const CountRow& r : params.rows)
    std::printf("  %-28s %12lld\n", r.name.c_str(), static_cast<long long>(r.value));
  std::printf("  %-28s %12lld\n", "total", static_cast<long long>(params.total));
  std::printf("flops @%lldx%lld\n", static_cast<long long>(cfg.arch.input_h),
              static_cast<long long>(cfg.arch.input_w));
  for (const CountRow& r : flops.rows)
    std::printf("  %-28s %12lld\n", r.name.c_str(), static_cast<long long>(r.value));
  std::printf("  %-28s %12lld\n", "total", static_cast<long long>(flops.total));
  std::printf("size_bytes=%lld (%s)\n",
              static_cast<long long>(params.total *
                                     static_cast<std::int64_t>(dtype_size(cfg.arch.precision))),
              dtype_name(cfg.arch.precision));
  if (!f.out.empty()) {
    atomic_write_file(f.out, json{{"model", model_json(cfg.arch)}}.dump(2) + "\n");
    std::printf("report=%s\n", f.out.c_str());
  }
  return 0;
}

int cmd_bench(const CLI::App* sub, const Flags& f) {
  std::string ckpt;
  RunConfig cfg = build_config(sub, f, &ckpt);
  print_header(cfg);
  std::optional<DType> override_dt;
  if (!f.precision.empty()) override_dt = parse_dtype(f.precision);
  TakuNet model = ckpt.empty() ? TakuNet(cfg.arch) : load_checkpoint(ckpt, nullptr, override_dt);
  if (ckpt.empty()) model.init_params(cfg.train.seed);
  const BenchResult b = bench_model(model, f.iters, cfg.train.seed);
  std::printf("device=%s batch=%lld input=%lldx%lld iters=%lld\n", b.device.c_str(),
              static_cast<long long>(b.batch), static_cast<long long>(b.input_h),
              static_cast<long long>(b.input_w), static_cast<long long>(b.iters));
  std::printf("mean_ms=%.3f median_ms=%.3f p95_ms=%.3f fps=%.2f\n", b.mean_ms, b.median_ms,
              b.p95_ms, b.fps);
  if (!f.out.empty()) {
    atomic_write_file(f.out, json{{"latency", latency_json(b)}}.dump(2) + "\n");
    std::printf("report=%s\n", f.out.c_str());
  }
  return 0;
}

int cmd_bench_act(const CLI::App* sub, const Flags& f) {
  RunConfig cfg = build_config(sub, f, nullptr);
  print_header(cfg);
  const std::vector<ActivationTime> times =
      bench_activations(1'000'000, f.iters, cfg.train.seed);
  std::printf("%-12s %12s\n", "activation", "total_ms");
  for (const ActivationTime& t : times) std::printf("%-12s %12.3f\n", t.name.c_str(), t.total_ms);
  if (!f.out.empty()) {
    json arr = json::array();
    for (const ActivationTime& t : times) arr.push_back({{"name", t.name}, {"total_ms", t.total_ms}});
    atomic_write_file(f.out, json{{"activations", arr}}.dump(2) + "\n");
    std::printf("report=%s\n", f.out.c_str());
  }
  return 0;
}

int cmd_derive(const CLI::App* sub, const Flags& f) {
  RunConfig cfg = build_config(sub, f, nullptr);
  print_header(cfg);
  const DeriveResult r = derive_channel_config();
  std::string text;
  for (const std::string& line : r.report) {
    std::printf("%s\n", line.c_str());
    text += line;
    text += '\n';
  }
  if (!f.out.empty()) {
    atomic_write_file(f.out, text);
    std::printf("report=%s\n", f.out.c_str());
  }
  return 0;
}

int cmd_split(const CLI::App* sub, const Flags& f) {
  RunConfig cfg = build_config(sub, f, nullptr);
  print_header(cfg);
  const DatasetIndex idx = load_index(f, cfg);
  const std::string out = f.out.empty() ? "manifest.csv" : f.out;
  write_manifest_csv(idx, out);
  std::printf("%-16s %8s %8s %8s %8s\n", "class", "train", "val", "test", "total");
  for (std::size_t c = 0; c < idx.class_names.size(); ++c) {
    const auto ci = static_cast<std::int64_t>(c);
    const std::int64_t tr = idx.count(Split::train, ci), va = idx.count(Split::val, ci),
                       te = idx.count(Split::test, ci);
    std::printf("%-16s %8lld %8lld %8lld %8lld\n", idx.class_names[c].c_str(),
                static_cast<long long>(tr), static_cast<long long>(va),
                static_cast<long long>(te), static_cast<long long>(tr + va + te));
  }
  std::printf("%-16s %8lld %8lld %8lld %8lld\n", "total",
              static_cast<long long>(idx.count(Split::train)),
              static_cast<long long>(idx.count(Split::val)),
              static_cast<long long>(idx.count(Split::test)),
              static_cast<long long>(idx.records.size()));
  std::printf("manifest=%s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TakuNet: efficient CNN training and analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Flags ft, fe, fa, fb, fba, fd, fs;
  CLI::App* c_train = app.add_subcommand("train", "k-fold training run");
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint (checkpoint=PATH)");
  CLI::App* c_analyze = app.add_subcommand("analyze", "parameter and FLOP breakdown");
  CLI::App* c_bench = app.add_subcommand("bench", "batch-1 latency benchmark");
  CLI::App* c_bench_act = app.add_subcommand("bench-act", "activation microbenchmark");
  CLI::App* c_derive = app.add_subcommand("derive-channels", "stage width search");
  CLI::App* c_split = app.add_subcommand("split", "index a dataset and write the manifest");
  add_flags(c_train, ft);
  add_flags(c_eval, fe);
  add_flags(c_analyze, fa);
  add_flags(c_bench, fb);
  add_flags(c_bench_act, fba);
  add_flags(c_derive, fd);
  add_flags(c_split, fs);

  try {
    app.parse(argc, argv);
    if (c_train->parsed()) return cmd_train(c_train, ft);
    if (c_eval->parsed()) return cmd_eval(c_eval, fe);
    if (c_analyze->parsed()) return cmd_analyze(c_analyze, fa);
    if (c_bench->parsed()) return cmd_bench(c_bench, fb);
    if (c_bench_act->parsed()) return cmd_bench_act(c_bench_act, fba);
    if (c_derive->parsed()) return cmd_derive(c_derive, fd);
    if (c_split->parsed()) return cmd_split(c_split, fs);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
