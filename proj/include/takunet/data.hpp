#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "takunet/rng.hpp"
#include "takunet/tensor.hpp"

namespace taku {

enum class Split : int { train = 0, val = 1, test = 2 };
const char* split_name(Split s);

enum class SplitMode { aider, aiderv2 };

struct DataConfig {
  SplitMode mode = SplitMode::aider;
  double train_ratio = 0.70;
  double normal_ratio = 0.65;           // train share of the normal class
  std::string normal_class = "normal";  // matched case-insensitively
  bool augment = true;
};

struct DatasetIndex {
  std::vector<std::string> class_names;  // sorted directory names
  struct Record {
    std::string path;
    std::int64_t class_id;
    Split split;
  };
  std::vector<Record> records;

  std::int64_t count(Split s) const;
  std::int64_t count(Split s, std::int64_t class_id) const;
};

// AIDER mode: root/<class>/*             split per class by ratio, floor(train)
// AIDERv2 mode: root/{train,val,test}/<class>/*   honored verbatim
DatasetIndex index_dataset(const std::string& root, const DataConfig& cfg, std::uint64_t seed);

// CSV "path,class,split" with header, rows ordered by (class, path, split)
void write_manifest_csv(const DatasetIndex& index, const std::string& path);

// binary PPM (P6, maxval 255) -> byte/255, or TKTN rank-3 tensor pass-through;
// result is (3,H,W) f32
Tensor decode_image(const std::string& path);
void write_ppm(const std::string& path, const Tensor& img);

// half-pixel-center bilinear (corner-aligned false), border clamped
Tensor resize_bilinear(const Tensor& img, std::int64_t out_h, std::int64_t out_w);

struct AugmentationPolicy {
  double p_lo = 0.05, p_hi = 0.5;  // per-image per-transform probability range
  double color_shift = 0.1;
  double translate_frac = 0.10;
  double rotate_deg = 15.0;
  double crop_lo = 0.85;
  double sharpen_amount = 1.0;
  double shadow_lo = 0.7, shadow_hi = 1.3;
  double illum_lo = 0.7, illum_hi = 1.3;
  double zoom_lo = 0.9, zoom_hi = 1.1;
};

// transform order: color shift, blur, translation, rotation, mirror,
// random crop, sharpen, shadow, illumination, zoom; each drawn with its own
// p ~ U(p_lo, p_hi), geometric out-of-bounds filled with zeros, clamped to
// [0,1] after every transform
Tensor augment(const Tensor& img, const AugmentationPolicy& policy, Rng& rng);

struct Sample {
  std::string path;  // empty for in-memory samples
  Tensor image;
  std::int64_t label = 0;
};

std::vector<Sample> samples_from_index(const DatasetIndex& index, Split split);

struct Batch {
  Tensor x;
  std::vector<std::int64_t> labels;
};

class BatchSource {
public:
  virtual ~BatchSource() = default;
  virtual void reset(std::uint64_t epoch) = 0;  // restart; permutation depends on epoch
  virtual bool next(Batch& out) = 0;
  virtual std::int64_t size() const = 0;
};

class SampleBatches : public BatchSource {
public:
  // policy == nullptr disables augmentation; images are decoded lazily and
  // resized to (h, w); batches come out in dtype
  SampleBatches(std::vector<Sample> samples, std::int64_t batch_size, std::int64_t h,
                std::int64_t w, DType dtype, bool shuffle, std::uint64_t seed,
                const AugmentationPolicy* policy = nullptr);

  void reset(std::uint64_t epoch) override;
  bool next(Batch& out) override;
  std::int64_t size() const override { return static_cast<std::int64_t>(samples_.size()); }

private:
  std::vector<Sample> samples_;
  std::int64_t batch_size_, h_, w_;
  DType dtype_;
  bool shuffle_;
  std::uint64_t seed_;
  const AugmentationPolicy* policy_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_{0};
};

// class-colored structured noise, PPM tree root/class_<k>/img_<i>.ppm
void make_synthetic_dataset(const std::string& root, std::int64_t classes,
                            std::int64_t per_class, std::int64_t h, std::int64_t w,
                            std::uint64_t seed);
std::vector<Sample> make_synthetic_samples(std::int64_t classes, std::int64_t per_class,
                                           std::int64_t h, std::int64_t w, std::uint64_t seed);

}  // namespace taku
