#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "takunet/data.hpp"
#include "takunet/kv.hpp"
#include "takunet/tensor_io.hpp"

namespace fs = std::filesystem;

namespace taku {

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::int64_t DatasetIndex::count(Split s) const {
  std::int64_t n = 0;
  for (const auto& r : records) n += r.split == s;
  return n;
}

std::int64_t DatasetIndex::count(Split s, std::int64_t class_id) const {
  std::int64_t n = 0;
  for (const auto& r : records) n += r.split == s && r.class_id == class_id;
  return n;
}

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_image_file(const fs::path& p) {
  const std::string ext = lower(p.extension().string());
  return ext == ".ppm" || ext == ".tktn";
}

std::vector<std::string> sorted_dirs(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> sorted_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DatasetIndex index_dataset(const std::string& root, const DataConfig& cfg, std::uint64_t seed) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root not found: " + root);
  DatasetIndex idx;
  if (cfg.mode == SplitMode::aider) {
    idx.class_names = sorted_dirs(root);
    if (idx.class_names.empty()) throw std::runtime_error("dataset has no class directories: " + root);
    for (std::size_t c = 0; c < idx.class_names.size(); ++c) {
      const std::string& cls = idx.class_names[c];
      std::vector<std::string> files = sorted_files(fs::path(root) / cls);
      if (files.empty()) throw std::runtime_error("empty class directory: " + cls);
      Rng rng(seed ^ fnv1a64(cls));
      rng.shuffle(files);
      const double ratio = lower(cls) == lower(cfg.normal_class) ? cfg.normal_ratio : cfg.train_ratio;
      const auto n_train = static_cast<std::size_t>(
          std::floor(ratio * static_cast<double>(files.size())));
      for (std::size_t i = 0; i < files.size(); ++i)
        idx.records.push_back({files[i], static_cast<std::int64_t>(c),
                               i < n_train ? Split::train : Split::test});
    }
  } else {
    const Split splits[3] = {Split::train, Split::val, Split::test};
    for (const Split s : splits)
      if (!fs::is_directory(fs::path(root) / split_name(s)))
        throw std::runtime_error(std::string("missing split directory '") + split_name(s) +
                                 "' under " + root);
    std::vector<std::string> names;
    for (const Split s : splits)
      for (const auto& cls : sorted_dirs(fs::path(root) / split_name(s)))
        if (std::find(names.begin(), names.end(), cls) == names.end()) names.push_back(cls);
    std::sort(names.begin(), names.end());
    idx.class_names = names;
    for (const Split s : splits)
      for (std::size_t c = 0; c < names.size(); ++c) {
        const fs::path dir = fs::path(root) / split_name(s) / names[c];
        if (!fs::is_directory(dir)) continue;
        for (const auto& f : sorted_files(dir))
          idx.records.push_back({f, static_cast<std::int64_t>(c), s});
      }
    if (idx.records.empty()) throw std::runtime_error("dataset is empty: " + root);
  }
  std::sort(idx.records.begin(), idx.records.end(), [](const auto& a, const auto& b) {
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.path != b.path) return a.path < b.path;
    return static_cast<int>(a.split) < static_cast<int>(b.split);
  });
  return idx;
}

void write_manifest_csv(const DatasetIndex& index, const std::string& path) {
  std::string out = "path,class,split\n";
  for (const auto& r : index.records) {
    out += r.path;
    out += ',';
    out += index.class_names[static_cast<std::size_t>(r.class_id)];
    out += ',';
    out += split_name(r.split);
    out += '\n';
  }
  atomic_write_file(path, out);
}

namespace {

int ppm_token(std::istream& is) {
  // next integer token, skipping whitespace and '#' comments
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw std::runtime_error("ppm: malformed header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  if (c != EOF) is.unget();
  return v;
}

}  // namespace

Tensor decode_image(const std::string& path) {
  if (lower(fs::path(path).extension().string()) == ".tktn") {
    Tensor t = load_tensor(path);
    if (t.rank() != 3 || t.dim(0) != 3)
      throw std::runtime_error("tensor image must be (3,H,W): " + path);
    return t.dtype() == DType::f32 ? t : cast(t, DType::f32);
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error("unsupported image format (want P6): " + path);
  const int w = ppm_token(is), h = ppm_token(is), maxval = ppm_token(is);
  if (w <= 0 || h <= 0) throw std::runtime_error("ppm: bad dimensions in " + path);
  if (maxval != 255) throw std::runtime_error("ppm: unsupported maxval " + std::to_string(maxval));
  is.get();  // single whitespace byte after maxval
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw std::runtime_error("ppm: truncated pixel data in " + path);
  Tensor img(DType::f32, {3, h, w});
  float* out = img.data<float>();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      out[c * plane + i] = static_cast<float>(raw[static_cast<std::size_t>(i) * 3 + c]) / 255.0f;
  return img;
}

void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("write_ppm: image must be (3,H,W)");
  const std::int64_t h = img.dim(1), w = img.dim(2), plane = h * w;
  Tensor f = img.dtype() == DType::f32 ? img : cast(img, DType::f32);
  const float* p = f.data<float>();
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(plane) * 3);
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::min(1.0f, std::max(0.0f, p[c * plane + i]));
      out += static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
  atomic_write_file(path, out);
}

Tensor resize_bilinear(const Tensor& img, std::int64_t out_h, std::int64_t out_w) {
  if (img.rank() != 3) throw std::invalid_argument("resize_bilinear: image must be rank 3");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: bad output size");
  const std::int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (out_h == H && out_w == W) return img;
  Tensor f = img.dtype() == DType::f32 ? img : cast(img, DType::f32);
  Tensor out(DType::f32, {C, out_h, out_w});
  const float* in = f.data<float>();
  float* o = out.data<float>();
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::int64_t y = 0; y < out_h; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
    const std::int64_t y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < out_w; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
      const std::int64_t x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < C; ++c) {
        const float* pl = in + c * H * W;
        const double top = static_cast<double>(pl[y0 * W + x0]) * (1 - wx) +
                           static_cast<double>(pl[y0 * W + x1]) * wx;
        const double bot = static_cast<double>(pl[y1 * W + x0]) * (1 - wx) +
                           static_cast<double>(pl[y1 * W + x1]) * wx;
        o[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

namespace {

void clamp01(Tensor& img) {
  float* p = img.data<float>();
  const std::int64_t n = img.numel();
  for (std::int64_t i = 0; i < n; ++i) p[i] = std::min(1.0f, std::max(0.0f, p[i]));
}

Tensor box_blur3(const Tensor& img) {
  const std::int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor out(DType::f32, img.shape());
  const float* in = img.data<float>();
  float* o = out.data<float>();
  for (std::int64_t c = 0; c < C; ++c) {
    const float* pl = in + c * H * W;
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        double acc = 0;  // zero padding at the border
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const std::int64_t yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < H && xx >= 0 && xx < W) acc += pl[yy * W + xx];
          }
        o[(c * H + y) * W + x] = static_cast<float>(acc / 9.0);
      }
  }
  return out;
}

// inverse-mapped bilinear sample with zero fill outside the source
Tensor warp(const Tensor& img, double m00, double m01, double m02, double m10, double m11,
            double m12) {
  const std::int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor out = Tensor::zeros(DType::f32, img.shape());
  const float* in = img.data<float>();
  float* o = out.data<float>();
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      const double fx = m00 * static_cast<double>(x) + m01 * static_cast<double>(y) + m02;
      const double fy = m10 * static_cast<double>(x) + m11 * static_cast<double>(y) + m12;
      if (fx < -1 || fy < -1 || fx > static_cast<double>(W) || fy > static_cast<double>(H)) continue;
      const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
      const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
      const double wx = fx - static_cast<double>(x0), wy = fy - static_cast<double>(y0);
      for (std::int64_t c = 0; c < C; ++c) {
        const float* pl = in + c * H * W;
        auto at = [&](std::int64_t yy, std::int64_t xx) -> double {
          return (yy >= 0 && yy < H && xx >= 0 && xx < W) ? pl[yy * W + xx] : 0.0;
        };
        const double v = (at(y0, x0) * (1 - wx) + at(y0, x0 + 1) * wx) * (1 - wy) +
                         (at(y0 + 1, x0) * (1 - wx) + at(y0 + 1, x0 + 1) * wx) * wy;
        o[(c * H + y) * W + x] = static_cast<float>(v);
      }
    }
  return out;
}

}  // namespace

Tensor augment(const Tensor& img, const AugmentationPolicy& policy, Rng& rng) {
  Tensor cur = img.dtype() == DType::f32 ? copy(img) : cast(img, DType::f32);
  const std::int64_t C = cur.dim(0), H = cur.dim(1), W = cur.dim(2);
  auto roll = [&]() { return rng.bernoulli(rng.uniform(policy.p_lo, policy.p_hi)); };

  if (roll()) {  // color shift
    float* p = cur.data<float>();
    for (std::int64_t c = 0; c < C; ++c) {
      const float d = static_cast<float>(rng.uniform(-policy.color_shift, policy.color_shift));
      for (std::int64_t i = 0; i < H * W; ++i) p[c * H * W + i] += d;
    }
    clamp01(cur);
  }
  if (roll()) {  // blur
    cur = box_blur3(cur);
    clamp01(cur);
  }
  if (roll()) {  // translation
    const double dx = std::round(rng.uniform(-policy.translate_frac, policy.translate_frac) *
                                 static_cast<double>(W));
    const double dy = std::round(rng.uniform(-policy.translate_frac, policy.translate_frac) *
                                 static_cast<double>(H));
    cur = warp(cur, 1, 0, -dx, 0, 1, -dy);
    clamp01(cur);
  }
  if (roll()) {  // rotation about the center
    const double th = rng.uniform(-policy.rotate_deg, policy.rotate_deg) * 3.14159265358979323846 / 180.0;
    const double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;
    const double c = std::cos(th), s = std::sin(th);
    cur = warp(cur, c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy);
    clamp01(cur);
  }
  if (roll()) {  // mirror
    float* p = cur.data<float>();
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < H; ++y) {
        float* row = p + (c * H + y) * W;
        std::reverse(row, row + W);
      }
  }
  if (roll()) {  // random crop, resized back
    const double s = rng.uniform(policy.crop_lo, 1.0);
    const auto ch = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(s * static_cast<double>(H))));
    const auto cw = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(s * static_cast<double>(W))));
    const auto oy = static_cast<std::int64_t>(rng.randint(static_cast<std::uint64_t>(H - ch + 1)));
    const auto ox = static_cast<std::int64_t>(rng.randint(static_cast<std::uint64_t>(W - cw + 1)));
    Tensor crop(DType::f32, {C, ch, cw});
    const float* p = cur.data<float>();
    float* q = crop.data<float>();
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < ch; ++y)
        std::memcpy(q + (c * ch + y) * cw, p + (c * H + oy + y) * W + ox,
                    static_cast<std::size_t>(cw) * sizeof(float));
    cur = resize_bilinear(crop, H, W);
    clamp01(cur);
  }
  if (roll()) {  // unsharp mask
    Tensor blur = box_blur3(cur);
    float* p = cur.data<float>();
    const float* b = blur.data<float>();
    const auto amt = static_cast<float>(policy.sharpen_amount);
    for (std::int64_t i = 0; i < cur.numel(); ++i) p[i] += amt * (p[i] - b[i]);
    clamp01(cur);
  }
  if (roll()) {  // rectangular shadow / highlight
    const auto y0 = static_cast<std::int64_t>(rng.randint(static_cast<std::uint64_t>(H)));
    const auto y1 = y0 + 1 + static_cast<std::int64_t>(rng.randint(static_cast<std::uint64_t>(H - y0)));
    const auto x0 = static_cast<std::int64_t>(rng.randint(static_cast<std::uint64_t>(W)));
    const auto x1 = x0 + 1 + static_cast<std::int64_t>(rng.randint(static_cast<std::uint64_t>(W - x0)));
    const auto f = static_cast<float>(rng.uniform(policy.shadow_lo, policy.shadow_hi));
    float* p = cur.data<float>();
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = y0; y < y1; ++y)
        for (std::int64_t x = x0; x < x1; ++x) p[(c * H + y) * W + x] *= f;
    clamp01(cur);
  }
  if (roll()) {  // global illumination
    const auto f = static_cast<float>(rng.uniform(policy.illum_lo, policy.illum_hi));
    float* p = cur.data<float>();
    for (std::int64_t i = 0; i < cur.numel(); ++i) p[i] *= f;
    clamp01(cur);
  }
  if (roll()) {  // zoom about the center
    const double z = rng.uniform(policy.zoom_lo, policy.zoom_hi);
    const double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;
    cur = warp(cur, 1 / z, 0, cx - cx / z, 0, 1 / z, cy - cy / z);
    clamp01(cur);
  }
  return cur;
}

std::vector<Sample> samples_from_index(const DatasetIndex& index, Split split) {
  std::vector<Sample> out;
  for (const auto& r : index.records)
    if (r.split == split) out.push_back({r.path, Tensor(), r.class_id});
  return out;
}

SampleBatches::SampleBatches(std::vector<Sample> samples, std::int64_t batch_size, std::int64_t h,
                             std::int64_t w, DType dtype, bool shuffle, std::uint64_t seed,
                             const AugmentationPolicy* policy)
    : samples_(std::move(samples)),
      batch_size_(batch_size),
      h_(h),
      w_(w),
      dtype_(dtype),
      shuffle_(shuffle),
      seed_(seed),
      policy_(policy) {
  if (batch_size_ < 1) throw std::invalid_argument("batch size must be >= 1");
  order_.resize(samples_.size());
  reset(0);
}

void SampleBatches::reset(std::uint64_t epoch) {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  rng_ = Rng(seed_ + 0x9E3779B97F4A7C15ull * (epoch + 1));
  if (shuffle_) rng_.shuffle(order_);
  cursor_ = 0;
}

bool SampleBatches::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t n = std::min(static_cast<std::size_t>(batch_size_), order_.size() - cursor_);
  Tensor x(DType::f32, {static_cast<std::int64_t>(n), 3, h_, w_});
  out.labels.assign(n, 0);
  float* dst = x.data<float>();
  const std::int64_t img_elems = 3 * h_ * w_;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = samples_[order_[cursor_ + i]];
    Tensor img = s.image.numel() ? s.image : decode_image(s.path);
    if (img.dtype() != DType::f32) img = cast(img, DType::f32);
    if (policy_) img = augment(img, *policy_, rng_);
    if (img.dim(1) != h_ || img.dim(2) != w_) img = resize_bilinear(img, h_, w_);
    std::memcpy(dst + static_cast<std::int64_t>(i) * img_elems, img.raw(),
                static_cast<std::size_t>(img_elems) * sizeof(float));
    out.labels[i] = s.label;
  }
  cursor_ += n;
  out.x = dtype_ == DType::f32 ? std::move(x) : cast(x, dtype_);
  return true;
}

namespace {

void synth_palette(std::int64_t k, float& r, float& g, float& b) {
  static const float base[5][3] = {{0.85f, 0.20f, 0.15f},
                                   {0.15f, 0.75f, 0.25f},
                                   {0.15f, 0.30f, 0.85f},
                                   {0.85f, 0.80f, 0.15f},
                                   {0.70f, 0.20f, 0.80f}};
  if (k < 5) {
    r = base[k][0];
    g = base[k][1];
    b = base[k][2];
    return;
  }
  const double hue = std::fmod(0.61803398875 * static_cast<double>(k), 1.0) * 6.0;
  const double f = hue - std::floor(hue);
  const int sector = static_cast<int>(hue) % 6;
  const double vals[6][3] = {{1, f, 0}, {1 - f, 1, 0}, {0, 1, f},
                             {0, 1 - f, 1}, {f, 0, 1}, {1, 0, 1 - f}};
  r = static_cast<float>(0.15 + 0.7 * vals[sector][0]);
  g = static_cast<float>(0.15 + 0.7 * vals[sector][1]);
  b = static_cast<float>(0.15 + 0.7 * vals[sector][2]);
}

Tensor synth_image(std::int64_t k, std::int64_t h, std::int64_t w, Rng& rng) {
  float cr, cg, cb;
  synth_palette(k, cr, cg, cb);
  Tensor img(DType::f32, {3, h, w});
  float* p = img.data<float>();
  const double freq = 2.0 + static_cast<double>(k);
  const double phase = rng.uniform(0.0, 6.28318530717958647692);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double stripe =
          0.5 + 0.5 * std::sin(freq * 6.28318530717958647692 * static_cast<double>(x + y) /
                                   static_cast<double>(h + w) +
                               phase);
      const auto m = static_cast<float>(0.55 + 0.35 * stripe);
      const auto noise = [&]() { return static_cast<float>(rng.uniform(-0.08, 0.08)); };
      p[(0 * h + y) * w + x] = std::min(1.0f, std::max(0.0f, cr * m + noise()));
      p[(1 * h + y) * w + x] = std::min(1.0f, std::max(0.0f, cg * m + noise()));
      p[(2 * h + y) * w + x] = std::min(1.0f, std::max(0.0f, cb * m + noise()));
    }
  return img;
}

}  // namespace

std::vector<Sample> make_synthetic_samples(std::int64_t classes, std::int64_t per_class,
                                           std::int64_t h, std::int64_t w, std::uint64_t seed) {
  std::vector<Sample> out;
  Rng rng(seed);
  for (std::int64_t k = 0; k < classes; ++k)
    for (std::int64_t i = 0; i < per_class; ++i) out.push_back({"", synth_image(k, h, w, rng), k});
  return out;
}

void make_synthetic_dataset(const std::string& root, std::int64_t classes, std::int64_t per_class,
                            std::int64_t h, std::int64_t w, std::uint64_t seed) {
  Rng rng(seed);
  for (std::int64_t k = 0; k < classes; ++k) {
    const fs::path dir = fs::path(root) / ("class_" + std::to_string(k));
    fs::create_directories(dir);
    for (std::int64_t i = 0; i < per_class; ++i)
      write_ppm((dir / ("img_" + std::to_string(i) + ".ppm")).string(), synth_image(k, h, w, rng));
  }
}

}  // namespace taku
