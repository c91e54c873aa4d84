#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "takunet/checkpoint.hpp"
#include "takunet/evalbench.hpp"
#include "takunet/kv.hpp"
#include "takunet/ops.hpp"
#include "takunet/tensor_io.hpp"
#include "takunet/trainer.hpp"

namespace taku {

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw std::invalid_argument("lr0 must be > 0");
  if (!(rms_decay >= 0 && rms_decay < 1)) throw std::invalid_argument("rms_decay must be in [0,1)");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must be in [0,1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(lr_gamma > 0 && lr_gamma <= 1)) throw std::invalid_argument("lr_gamma must be in (0,1]");
  if (!(eps > 0)) throw std::invalid_argument("eps must be > 0");
  if (lr_step < 1) throw std::invalid_argument("lr_step must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (k_folds < 1) throw std::invalid_argument("k_folds must be >= 1");
}

void TrainConfig::apply_kv(const std::string& key, const std::string& value) {
  if (key == "batch_size")
    batch_size = kv_to_int(key, value);
  else if (key == "epochs")
    epochs = kv_to_int(key, value);
  else if (key == "eps")
    eps = kv_to_double(key, value);
  else if (key == "k_folds")
    k_folds = kv_to_int(key, value);
  else if (key == "lr0")
    lr0 = kv_to_double(key, value);
  else if (key == "lr_gamma")
    lr_gamma = kv_to_double(key, value);
  else if (key == "lr_step")
    lr_step = kv_to_int(key, value);
  else if (key == "momentum")
    momentum = kv_to_double(key, value);
  else if (key == "rms_decay")
    rms_decay = kv_to_double(key, value);
  else if (key == "seed")
    seed = static_cast<std::uint64_t>(kv_to_int(key, value));
  else if (key == "weight_decay")
    weight_decay = kv_to_double(key, value);
  else
    throw std::invalid_argument("unknown training key: " + key);
}

bool TrainConfig::has_key(const std::string& key) {
  static const std::set<std::string> keys = {
      "batch_size", "epochs",    "eps",  "k_folds",      "lr0",  "lr_gamma",
      "lr_step",    "momentum", "rms_decay", "seed", "weight_decay"};
  return keys.count(key) != 0;
}

std::string TrainConfig::canonical_text() const {
  std::ostringstream os;
  os << "batch_size=" << batch_size << "\n";
  os << "epochs=" << epochs << "\n";
  os << "eps=" << kv_format_double(eps) << "\n";
  os << "k_folds=" << k_folds << "\n";
  os << "lr0=" << kv_format_double(lr0) << "\n";
  os << "lr_gamma=" << kv_format_double(lr_gamma) << "\n";
  os << "lr_step=" << lr_step << "\n";
  os << "momentum=" << kv_format_double(momentum) << "\n";
  os << "rms_decay=" << kv_format_double(rms_decay) << "\n";
  os << "seed=" << seed << "\n";
  os << "weight_decay=" << kv_format_double(weight_decay) << "\n";
  return os.str();
}

double lr_at_epoch(const TrainConfig& cfg, std::int64_t epoch) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  return cfg.lr0 * std::pow(cfg.lr_gamma, static_cast<double>(epoch / cfg.lr_step));
}

namespace {

template <class T>
void rmsprop_kernel(T* w, const T* g0, T* v, T* m, std::int64_t n, double lr,
                    const TrainConfig& cfg) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(g0[i]) + cfg.weight_decay * static_cast<double>(w[i]);
    const double vv = cfg.rms_decay * static_cast<double>(v[i]) + (1.0 - cfg.rms_decay) * g * g;
    const double mm = cfg.momentum * static_cast<double>(m[i]) + g / std::sqrt(vv + cfg.eps);
    v[i] = static_cast<T>(vv);
    m[i] = static_cast<T>(mm);
    w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mm);
  }
}

}  // namespace

void rmsprop_step(Tensor& w, const Tensor& grad, Tensor& v, Tensor& m, double lr,
                  const TrainConfig& cfg) {
  if (w.shape() != grad.shape() || w.shape() != v.shape() || w.shape() != m.shape())
    throw std::invalid_argument("rmsprop_step: shape mismatch");
  if (w.dtype() != grad.dtype() || w.dtype() != v.dtype() || w.dtype() != m.dtype())
    throw std::invalid_argument("rmsprop_step: dtype mismatch");
  if (w.dtype() == DType::f32)
    rmsprop_kernel(w.data<float>(), grad.data<float>(), v.data<float>(), m.data<float>(),
                   w.numel(), lr, cfg);
  else if (w.dtype() == DType::f64)
    rmsprop_kernel(w.data<double>(), grad.data<double>(), v.data<double>(), m.data<double>(),
                   w.numel(), lr, cfg);
  else
    throw std::invalid_argument("rmsprop_step: masters must be f32 or f64");
}

Optimizer::Optimizer(TakuNet& model, const TrainConfig& cfg) : model_(&model), cfg_(cfg) {
  cfg_.validate();
  const DType mdt = grad_dtype(model.config().precision);
  for (const ParamRef& pr : model.parameters()) {
    names_.push_back(pr.name);
    master_.push_back(pr.tensor->dtype() == mdt ? copy(*pr.tensor) : cast(*pr.tensor, mdt));
    v_.push_back(Tensor::zeros(mdt, pr.tensor->shape()));
    m_.push_back(Tensor::zeros(mdt, pr.tensor->shape()));
  }
}

void Optimizer::step(const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != master_.size()) throw std::invalid_argument("optimizer: gradient count mismatch");
  std::vector<ParamRef> params = model_->parameters();
  for (std::size_t i = 0; i < master_.size(); ++i) {
    rmsprop_step(master_[i], grads[i], v_[i], m_[i], lr, cfg_);
    *params[i].tensor = master_[i].dtype() == params[i].tensor->dtype()
                            ? copy(master_[i])
                            : cast(master_[i], params[i].tensor->dtype());
  }
}

std::vector<std::pair<std::string, Tensor>> Optimizer::state_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out.emplace_back("opt.v." + names_[i], v_[i]);
    out.emplace_back("opt.m." + names_[i], m_[i]);
  }
  return out;
}

double train_epoch(TakuNet& model, BatchSource& batches, Optimizer& opt, const TrainConfig& cfg,
                   std::int64_t epoch) {
  const double lr = lr_at_epoch(cfg, epoch);
  batches.reset(static_cast<std::uint64_t>(epoch));
  Batch b;
  double loss_sum = 0.0;
  std::int64_t n_total = 0;
  FwdCache cache;
  while (batches.next(b)) {
    Tensor logits = model.forward(b.x, true, &cache);
    const CeResult ce = softmax_cross_entropy(logits, b.labels);
    std::vector<Tensor> grads = model.backward(cache, ce.grad_logits);
    opt.step(grads, lr);
    const auto n = static_cast<std::int64_t>(b.labels.size());
    loss_sum += ce.loss * static_cast<double>(n);
    n_total += n;
  }
  if (n_total == 0) throw std::runtime_error("train_epoch: no samples");
  return loss_sum / static_cast<double>(n_total);
}

std::vector<FoldSplit> kfold_split(const std::vector<std::int64_t>& labels, std::int64_t k,
                                   std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("k_folds must be >= 1");
  if (labels.empty()) throw std::invalid_argument("kfold_split: empty labels");
  const std::size_t n = labels.size();
  if (k == 1) {
    FoldSplit f;
    f.train_idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) f.train_idx[i] = i;
    f.val_idx = f.train_idx;
    return {f};
  }
  std::map<std::int64_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> vals(static_cast<std::size_t>(k));
  std::size_t deal = 0;  // rolling across classes keeps fold sizes within 1
  for (auto& [cls, idxs] : by_class) {
    if (static_cast<std::int64_t>(idxs.size()) < k)
      throw std::invalid_argument("kfold_split: class " + std::to_string(cls) + " has " +
                               std::to_string(idxs.size()) + " samples, needs >= " +
                               std::to_string(k));
    rng.shuffle(idxs);
    for (std::size_t i = 0; i < idxs.size(); ++i)
      vals[deal++ % static_cast<std::size_t>(k)].push_back(idxs[i]);
  }
  std::vector<FoldSplit> out(static_cast<std::size_t>(k));
  for (std::size_t f = 0; f < vals.size(); ++f) {
    std::sort(vals[f].begin(), vals[f].end());
    out[f].val_idx = vals[f];
    std::vector<char> in_val(n, 0);
    for (std::size_t i : vals[f]) in_val[i] = 1;
    for (std::size_t i = 0; i < n; ++i)
      if (!in_val[i]) out[f].train_idx.push_back(i);
  }
  return out;
}

namespace {

std::string metrics_line(std::int64_t epoch, std::int64_t fold, double lr, double train_loss,
                         double val_loss, double val_f1, std::int64_t wall_ms) {
  std::ostringstream os;
  os << "{\"epoch\":" << epoch << ",\"fold\":" << fold << ",\"lr\":" << kv_format_double(lr)
     << ",\"train_loss\":" << kv_format_double(train_loss)
     << ",\"val_loss\":" << kv_format_double(val_loss)
     << ",\"val_f1_macro\":" << kv_format_double(val_f1) << ",\"wall_ms\":" << wall_ms << "}";
  return os.str();
}

}  // namespace

FitResult fit(const ArchConfig& arch, const TrainConfig& tcfg, const std::vector<Sample>& samples,
              const FitOptions& opts) {
  arch.validate();
  tcfg.validate();
  if (samples.empty()) throw std::invalid_argument("fit: no samples");
  const std::string out_dir = opts.out_dir.empty() ? "." : opts.out_dir;
  std::filesystem::create_directories(out_dir);

  std::vector<std::int64_t> labels;
  labels.reserve(samples.size());
  for (const Sample& s : samples) labels.push_back(s.label);
  const std::vector<FoldSplit> folds = kfold_split(labels, tcfg.k_folds, tcfg.seed);

  FitResult res;
  res.metrics_path = out_dir + "/metrics.jsonl";
  res.best_checkpoint = out_dir + "/best.tkck";

  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<Sample> train_s, val_s;
    for (std::size_t i : folds[f].train_idx) train_s.push_back(samples[i]);
    for (std::size_t i : folds[f].val_idx) val_s.push_back(samples[i]);

    TakuNet model(arch);
    model.init_params(tcfg.seed + f);
    Optimizer opt(model, tcfg);
    SampleBatches train_b(std::move(train_s), tcfg.batch_size, arch.input_h, arch.input_w,
                          arch.precision, true, tcfg.seed ^ fnv1a64("fold" + std::to_string(f)),
                          opts.policy);
    SampleBatches val_b(std::move(val_s), tcfg.batch_size, arch.input_h, arch.input_w,
                        arch.precision, false, 0);

    for (std::int64_t e = 0; e < tcfg.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      const double train_loss = train_epoch(model, train_b, opt, tcfg, e);
      const EvalResult ev = evaluate(model, val_b);
      const std::int64_t wall_ms =
          opts.timing ? std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - t0)
                            .count()
                      : 0;
      const std::string line = metrics_line(e, static_cast<std::int64_t>(f), lr_at_epoch(tcfg, e),
                                            train_loss, ev.mean_loss, ev.f1.macro, wall_ms);
      res.metrics_lines.push_back(line);
      if (opts.verbose) std::printf("%s\n", line.c_str());
      if (ev.f1.macro > res.best_val_f1) {
        res.best_val_f1 = ev.f1.macro;
        res.best_epoch = e;
        res.best_fold = static_cast<std::int64_t>(f);
        save_checkpoint(model, res.best_checkpoint, e);
      }
    }
  }

  std::string blob;
  for (const std::string& line : res.metrics_lines) {
    blob += line;
    blob += '\n';
  }
  atomic_write_file(res.metrics_path, blob);
  return res;
}

}  // namespace taku
