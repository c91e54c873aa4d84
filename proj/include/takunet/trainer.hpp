#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "takunet/arch.hpp"
#include "takunet/data.hpp"

namespace taku {

struct TrainConfig {
  double lr0 = 1e-3;
  double rms_decay = 0.9;  // squared-gradient average
  double momentum = 0.9;
  double weight_decay = 1e-5;  // coupled, added to the gradient
  double lr_gamma = 0.975;
  double eps = 1e-8;  // inside the square root
  std::int64_t lr_step = 2;
  std::int64_t epochs = 300;
  std::int64_t batch_size = 64;
  std::int64_t k_folds = 5;
  std::uint64_t seed = 0;

  void validate() const;
  void apply_kv(const std::string& key, const std::string& value);  // throws on unknown key
  std::string canonical_text() const;
  static bool has_key(const std::string& key);
};

// lr0 * lr_gamma^floor(epoch / lr_step)
double lr_at_epoch(const TrainConfig& cfg, std::int64_t epoch);

// one update: g = grad + weight_decay*w; v = a*v + (1-a)*g^2;
// m = mu*m + g / sqrt(v + eps); w -= lr*m. All math in double, stored back
// in the tensors' dtype. w, v, m share dtype and shape with grad.
void rmsprop_step(Tensor& w, const Tensor& grad, Tensor& v, Tensor& m, double lr,
                  const TrainConfig& cfg);

// holds master copies of the trainable parameters in the gradient dtype
// (f32, or f64 for an f64 model) plus the running optimizer state; step()
// updates the masters and writes them back into the model's tensors
class Optimizer {
public:
  Optimizer(TakuNet& model, const TrainConfig& cfg);

  void step(const std::vector<Tensor>& grads, double lr);

  const std::vector<Tensor>& masters() const { return master_; }
  std::vector<std::pair<std::string, Tensor>> state_tensors() const;

private:
  TakuNet* model_;
  TrainConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor> master_, v_, m_;
};

// one pass over the batches (reset with the epoch first); returns the
// sample-weighted mean training loss
double train_epoch(TakuNet& model, BatchSource& batches, Optimizer& opt, const TrainConfig& cfg,
                   std::int64_t epoch);

struct FoldSplit {
  std::vector<std::size_t> train_idx, val_idx;
};

// stratified k folds: per-class shuffle, round-robin deal; every class needs
// at least k samples; k == 1 trains and validates on the full set
std::vector<FoldSplit> kfold_split(const std::vector<std::int64_t>& labels, std::int64_t k,
                                   std::uint64_t seed);

struct FitOptions {
  std::string out_dir;
  bool timing = true;  // false pins wall_ms to 0 in the metrics
  const AugmentationPolicy* policy = nullptr;
  bool verbose = false;
};

struct FitResult {
  std::string best_checkpoint;
  std::string metrics_path;
  double best_val_f1 = -1.0;
  std::int64_t best_epoch = -1;
  std::int64_t best_fold = -1;
  std::vector<std::string> metrics_lines;
};

// k-fold training loop; re-initializes the model per fold with seed+fold,
// logs one JSONL metrics line per (fold, epoch), keeps the checkpoint with
// the best validation macro F1
FitResult fit(const ArchConfig& arch, const TrainConfig& tcfg, const std::vector<Sample>& samples,
              const FitOptions& opts);

}  // namespace taku
