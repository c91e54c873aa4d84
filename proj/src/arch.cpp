#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <unordered_map>

#include "takunet/arch.hpp"
#include "takunet/kv.hpp"
#include "takunet/rng.hpp"

namespace taku {

namespace {

struct ShapeChain {
  std::int64_t h1, w1;  // after stem conv
  std::int64_t h2, w2;  // after stem dwconv / pooled residual
  std::array<std::int64_t, 4> sh, sw;  // stage input spatial
  std::int64_t fh, fw;                 // refiner input spatial
};

std::int64_t conv_out(std::int64_t in, int k, int s, int p, int d) {
  return (in + 2 * p - static_cast<std::int64_t>(d) * (k - 1) - 1) / s + 1;
}

ShapeChain shape_chain(const ArchConfig& cfg, std::int64_t h, std::int64_t w) {
  ShapeChain c{};
  c.h1 = conv_out(h, 3, 2, 2, 2);
  c.w1 = conv_out(w, 3, 2, 2, 2);
  c.h2 = conv_out(c.h1, 3, 2, 1, 1);
  c.w2 = conv_out(c.w1, 3, 2, 1, 1);
  const std::int64_t ph = (c.h1 - 2) / 2 + 1, pw = (c.w1 - 2) / 2 + 1;
  if (c.h1 < 3 || c.w1 < 3 || c.h2 < 1 || c.w2 < 1)
    throw std::invalid_argument("spatial collapse in stem for input " + std::to_string(h) + "x" +
                                std::to_string(w));
  if (ph != c.h2 || pw != c.w2)
    throw std::invalid_argument("stem residual shape conflict for input " + std::to_string(h) +
                                "x" + std::to_string(w) + " (stem conv output must be even)");
  std::int64_t sh = c.h2, sw = c.w2;
  for (int s = 0; s < 4; ++s) {
    c.sh[static_cast<std::size_t>(s)] = sh;
    c.sw[static_cast<std::size_t>(s)] = sw;
    if (sh < 2 || sw < 2)
      throw std::invalid_argument("spatial collapse before downsampler " + std::to_string(s + 1));
    sh = (sh - 2) / 2 + 1;
    sw = (sw - 2) / 2 + 1;
  }
  c.fh = sh;
  c.fw = sw;
  if (sh < 1 || sw < 1) throw std::invalid_argument("spatial collapse after stage 4");
  return c;
}

BatchNormState make_bn(std::int64_t c, DType model_dt, DType stat_dt) {
  BatchNormState bn;
  bn.gamma = Tensor::full(model_dt, {c}, 1.0);
  bn.beta = Tensor::zeros(model_dt, {c});
  bn.running_mean = Tensor::zeros(stat_dt, {c});
  bn.running_var = Tensor::full(stat_dt, {c}, 1.0);
  return bn;
}

}  // namespace

void ArchConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("config: num_classes must be >= 2");
  if (stem_channels < 2 || stem_channels % 2)
    throw std::invalid_argument("config: stem_channels must be even and >= 2");
  for (int s = 0; s < 4; ++s) {
    const auto si = static_cast<std::size_t>(s);
    if (stage_depths[si] < 1) throw std::invalid_argument("config: stage_depths must be >= 1");
    if (stage_out_channels[si] < 1)
      throw std::invalid_argument("config: stage_out_channels must be >= 1");
    const std::int64_t width = stage_width(s);
    const std::int64_t g = ds_groups(s);
    if (g < 1) throw std::invalid_argument("config: downsampler groups < 1");
    if (ds_in_channels(s) % g)
      throw std::invalid_argument("config: downsampler " + std::to_string(s + 1) + " groups " +
                                  std::to_string(g) + " do not divide input channels " +
                                  std::to_string(ds_in_channels(s)));
    if (stage_out_channels[si] % g)
      throw std::invalid_argument("config: downsampler " + std::to_string(s + 1) + " groups " +
                                  std::to_string(g) + " do not divide output channels " +
                                  std::to_string(stage_out_channels[si]));
    (void)width;
  }
  shape_chain(*this, input_h, input_w);
}

std::string ArchConfig::canonical_text() const {
  std::string out;
  auto put = [&](const char* k, const std::string& v) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  };
  put("channel_shuffle", channel_shuffle ? "1" : "0");
  put("conv_bias", conv_bias ? "1" : "0");
  put("dense_connections", dense_connections ? "1" : "0");
  put("grn", grn ? "1" : "0");
  put("grn_per_channel", grn_per_channel ? "1" : "0");
  put("input_h", std::to_string(input_h));
  put("input_w", std::to_string(input_w));
  put("num_classes", std::to_string(num_classes));
  put("precision", dtype_name(precision));
  put("refiner", refiner ? "1" : "0");
  put("stage_depths", kv_from_int4(stage_depths));
  put("stage_out_channels", kv_from_int4(stage_out_channels));
  put("stem_channels", std::to_string(stem_channels));
  return out;
}

ArchConfig ArchConfig::from_text(const std::string& text) {
  ArchConfig cfg;
  for (const auto& [k, v] : parse_kv_lines(text)) {
    if (k == "channel_shuffle") cfg.channel_shuffle = kv_to_bool(k, v);
    else if (k == "conv_bias") cfg.conv_bias = kv_to_bool(k, v);
    else if (k == "dense_connections") cfg.dense_connections = kv_to_bool(k, v);
    else if (k == "grn") cfg.grn = kv_to_bool(k, v);
    else if (k == "grn_per_channel") cfg.grn_per_channel = kv_to_bool(k, v);
    else if (k == "input_h") cfg.input_h = kv_to_int(k, v);
    else if (k == "input_w") cfg.input_w = kv_to_int(k, v);
    else if (k == "num_classes") cfg.num_classes = kv_to_int(k, v);
    else if (k == "precision") cfg.precision = parse_dtype(v);
    else if (k == "refiner") cfg.refiner = kv_to_bool(k, v);
    else if (k == "stage_depths") cfg.stage_depths = kv_to_int4(k, v);
    else if (k == "stage_out_channels") cfg.stage_out_channels = kv_to_int4(k, v);
    else if (k == "stem_channels") cfg.stem_channels = kv_to_int(k, v);
    else throw std::invalid_argument("config: unknown key '" + k + "'");
  }
  return cfg;
}

TakuNet::TakuNet(ArchConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const DType dt = cfg_.precision;
  const DType stat = dt == DType::f64 ? DType::f64 : DType::f32;
  const bool bias = cfg_.conv_bias;

  stem_conv.spec = {3, cfg_.stem_channels, 3, 3, 2, 2, 2, 2, 2, 2, 1, bias};
  stem_conv.w = Tensor(dt, {cfg_.stem_channels, 3, 3, 3});
  if (bias) stem_conv.b = Tensor(dt, {cfg_.stem_channels});
  stem_conv.bn = make_bn(cfg_.stem_channels, dt, stat);

  stem_dw.spec = {cfg_.stem_channels, cfg_.stem_channels, 3, 3, 2, 2, 1, 1, 1, 1,
                  cfg_.stem_channels, bias};
  stem_dw.w = Tensor(dt, {cfg_.stem_channels, 1, 3, 3});
  if (bias) stem_dw.b = Tensor(dt, {cfg_.stem_channels});
  stem_dw.bn = make_bn(cfg_.stem_channels, dt, stat);

  for (int s = 0; s < 4; ++s) {
    const std::int64_t w = cfg_.stage_width(s);
    const std::int64_t t = cfg_.stage_out_channels[static_cast<std::size_t>(s)];
    auto& blocks = stages[static_cast<std::size_t>(s)];
    blocks.resize(static_cast<std::size_t>(cfg_.stage_depths[static_cast<std::size_t>(s)]));
    for (auto& blk : blocks) {
      blk.spec = {w, w, 3, 3, 1, 1, 1, 1, 1, 1, w, bias};
      blk.w = Tensor(dt, {w, 1, 3, 3});
      if (bias) blk.b = Tensor(dt, {w});
      blk.bn = make_bn(w, dt, stat);
    }
    auto& ds = downsamplers[static_cast<std::size_t>(s)];
    const std::int64_t cin = cfg_.ds_in_channels(s);
    const std::int64_t g = cfg_.ds_groups(s);
    ds.spec = {cin, t, 1, 1, 1, 1, 0, 0, 1, 1, g, bias};
    ds.w = Tensor(dt, {t, cin / g, 1, 1});
    if (bias) ds.b = Tensor(dt, {t});
    ds.bn = make_bn(t, dt, stat);
    if (cfg_.grn) {
      const std::int64_t plen = cfg_.grn_per_channel ? t : 1;
      ds.grn.gamma = Tensor::zeros(dt, {plen});
      ds.grn.beta = Tensor::zeros(dt, {plen});
    }
    ds.max_pool = s < 3;
  }

  const std::int64_t f = cfg_.stage_out_channels[3];
  if (cfg_.refiner) {
    refiner.spec = {f, f, 3, 3, 1, 1, 1, 1, 1, 1, f, bias};
    refiner.w = Tensor(dt, {f, 1, 3, 3});
    if (bias) refiner.b = Tensor(dt, {f});
    refiner.bn = make_bn(f, dt, stat);
  }
  classifier_w = Tensor(dt, {cfg_.num_classes, f});
  classifier_b = Tensor(dt, {cfg_.num_classes});
}

namespace {

using Visitor = std::function<void(const std::string&, Tensor&)>;

void visit_conv_bn(const std::string& conv_name, const std::string& bn_name, ConvBnLayer& l,
                   const Visitor& fn) {
  fn(conv_name + ".w", l.w);
  if (l.spec.bias) fn(conv_name + ".b", l.b);
  fn(bn_name + ".gamma", l.bn.gamma);
  fn(bn_name + ".beta", l.bn.beta);
}

void visit_params(TakuNet& m, const Visitor& fn) {
  const ArchConfig& cfg = m.config();
  visit_conv_bn("stem.conv", "stem.bn1", m.stem_conv, fn);
  visit_conv_bn("stem.dw", "stem.bn2", m.stem_dw, fn);
  for (int s = 0; s < 4; ++s) {
    const std::string sp = "stage" + std::to_string(s + 1);
    auto& blocks = m.stages[static_cast<std::size_t>(s)];
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string bp = sp + ".block" + std::to_string(b + 1);
      visit_conv_bn(bp + ".dw", bp + ".bn", blocks[b], fn);
    }
    const std::string dp = "downsampler" + std::to_string(s + 1);
    auto& ds = m.downsamplers[static_cast<std::size_t>(s)];
    fn(dp + ".pw.w", ds.w);
    if (ds.spec.bias) fn(dp + ".pw.b", ds.b);
    fn(dp + ".bn.gamma", ds.bn.gamma);
    fn(dp + ".bn.beta", ds.bn.beta);
    if (cfg.grn) {
      fn(dp + ".grn.gamma", ds.grn.gamma);
      fn(dp + ".grn.beta", ds.grn.beta);
    }
  }
  if (cfg.refiner) visit_conv_bn("refiner.dw", "refiner.bn", m.refiner, fn);
  fn("classifier.w", m.classifier_w);
  fn("classifier.b", m.classifier_b);
}

void visit_buffers(TakuNet& m, const Visitor& fn) {
  auto bn = [&](const std::string& name, BatchNormState& s) {
    fn(name + ".running_mean", s.running_mean);
    fn(name + ".running_var", s.running_var);
  };
  bn("stem.bn1", m.stem_conv.bn);
  bn("stem.bn2", m.stem_dw.bn);
  for (int s = 0; s < 4; ++s) {
    const std::string sp = "stage" + std::to_string(s + 1);
    auto& blocks = m.stages[static_cast<std::size_t>(s)];
    for (std::size_t b = 0; b < blocks.size(); ++b)
      bn(sp + ".block" + std::to_string(b + 1) + ".bn", blocks[b].bn);
    bn("downsampler" + std::to_string(s + 1) + ".bn",
       m.downsamplers[static_cast<std::size_t>(s)].bn);
  }
  if (m.config().refiner) bn("refiner.bn", m.refiner.bn);
}

}  // namespace

std::vector<ParamRef> TakuNet::parameters() {
  std::vector<ParamRef> out;
  visit_params(*this, [&](const std::string& n, Tensor& t) { out.push_back({n, &t}); });
  return out;
}

std::vector<ParamRef> TakuNet::buffers() {
  std::vector<ParamRef> out;
  visit_buffers(*this, [&](const std::string& n, Tensor& t) { out.push_back({n, &t}); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> TakuNet::named_params() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_params(const_cast<TakuNet&>(*this),
               [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> TakuNet::named_buffers() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_buffers(const_cast<TakuNet&>(*this),
                [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

void TakuNet::init_params(std::uint64_t seed) {
  Rng rng(seed);
  visit_params(*this, [&](const std::string& name, Tensor& t) {
    const auto ends_with = [&](const char* sfx) {
      const std::string s(sfx);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".w")) {
      std::int64_t fan_in = 0;
      if (t.rank() == 4) fan_in = t.dim(1) * t.dim(2) * t.dim(3);
      else fan_in = t.dim(1);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-bound, bound));
    } else if (name.find(".grn.") != std::string::npos) {
      t.fill(0.0);
    } else if (ends_with(".gamma")) {
      t.fill(1.0);
    } else {
      t.fill(0.0);  // bn beta and all biases
    }
  });
  visit_buffers(*this, [&](const std::string& name, Tensor& t) {
    t.fill(name.find("running_var") != std::string::npos ? 1.0 : 0.0);
  });
}

Tensor TakuNet::forward(const Tensor& x, bool train, FwdCache* cache) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.input_h || x.dim(3) != cfg_.input_w)
    throw std::invalid_argument("forward: input must be (N,3," + std::to_string(cfg_.input_h) +
                                "," + std::to_string(cfg_.input_w) + "), got " + x.shape_str());
  if (x.dtype() != cfg_.precision)
    throw std::invalid_argument("forward: input dtype must match model precision");

  if (!train) {
    Tensor y1 = relu6(batch_norm_eval(
        conv2d(x, stem_conv.w, stem_conv.spec.bias ? &stem_conv.b : nullptr, stem_conv.spec),
        stem_conv.bn));
    Tensor cur = add(
        relu6(batch_norm_eval(
            conv2d(y1, stem_dw.w, stem_dw.spec.bias ? &stem_dw.b : nullptr, stem_dw.spec),
            stem_dw.bn)),
        avg_pool2d(y1, 2, 2));
    y1 = Tensor();
    for (int s = 0; s < 4; ++s) {
      Tensor stage_in = cur;
      for (auto& blk : stages[static_cast<std::size_t>(s)])
        cur = add(relu6(batch_norm_eval(
                      conv2d(cur, blk.w, blk.spec.bias ? &blk.b : nullptr, blk.spec), blk.bn)),
                  cur);
      auto& ds = downsamplers[static_cast<std::size_t>(s)];
      Tensor cat = cfg_.dense_connections ? concat_channels(stage_in, cur) : std::move(cur);
      stage_in = Tensor();
      Tensor shuf =
          cfg_.channel_shuffle ? channel_shuffle(cat, ds.spec.groups) : std::move(cat);
      Tensor a = relu6(batch_norm_eval(
          conv2d(shuf, ds.w, ds.spec.bias ? &ds.b : nullptr, ds.spec), ds.bn));
      shuf = Tensor();
      Tensor p = ds.max_pool ? max_pool2d(a, 2, 2) : avg_pool2d(a, 2, 2);
      a = Tensor();
      if (cfg_.grn) {
        GrnCache scratch;
        cur = grn(p, ds.grn, scratch);
      } else {
        cur = std::move(p);
      }
    }
    if (cfg_.refiner)
      cur = batch_norm_eval(
          conv2d(cur, refiner.w, refiner.spec.bias ? &refiner.b : nullptr, refiner.spec),
          refiner.bn);
    return linear(adaptive_avg_pool(cur), classifier_w, &classifier_b);
  }

  FwdCache local;
  FwdCache& cc = cache ? *cache : local;
  cc = FwdCache{};
  cc.input = x;

  cc.stem_u1 = conv2d(x, stem_conv.w, stem_conv.spec.bias ? &stem_conv.b : nullptr, stem_conv.spec);
  Tensor y1 = relu6(batch_norm_train(cc.stem_u1, stem_conv.bn, cc.stem_bn1));
  cc.stem_u2 = conv2d(y1, stem_dw.w, stem_dw.spec.bias ? &stem_dw.b : nullptr, stem_dw.spec);
  Tensor cur =
      add(relu6(batch_norm_train(cc.stem_u2, stem_dw.bn, cc.stem_bn2)), avg_pool2d(y1, 2, 2));
  y1 = Tensor();

  for (int s = 0; s < 4; ++s) {
    const auto si = static_cast<std::size_t>(s);
    auto& blocks = stages[si];
    cc.blocks[si].resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& bc = cc.blocks[si][b];
      auto& blk = blocks[b];
      bc.u = conv2d(cur, blk.w, blk.spec.bias ? &blk.b : nullptr, blk.spec);
      Tensor y = relu6(batch_norm_train(bc.u, blk.bn, bc.bn));
      Tensor out = add(y, cur);
      bc.x = std::move(cur);
      cur = std::move(out);
    }
    auto& ds = downsamplers[si];
    auto& dc = cc.ds[si];
    Tensor cat =
        cfg_.dense_connections ? concat_channels(cc.blocks[si][0].x, cur) : std::move(cur);
    dc.cat_shape = cat.shape();
    Tensor shuf = cfg_.channel_shuffle ? channel_shuffle(cat, ds.spec.groups) : std::move(cat);
    dc.pw_in = std::move(shuf);
    dc.u = conv2d(dc.pw_in, ds.w, ds.spec.bias ? &ds.b : nullptr, ds.spec);
    Tensor a = relu6(batch_norm_train(dc.u, ds.bn, dc.bn));
    dc.act_shape = a.shape();
    Tensor p = ds.max_pool ? max_pool2d(a, 2, 2, &dc.argmax) : avg_pool2d(a, 2, 2);
    a = Tensor();
    if (cfg_.grn) {
      Tensor g = grn(p, ds.grn, dc.grn);
      dc.p = std::move(p);
      cur = std::move(g);
    } else {
      cur = std::move(p);
    }
  }

  if (cfg_.refiner) {
    cc.ref_u = conv2d(cur, refiner.w, refiner.spec.bias ? &refiner.b : nullptr, refiner.spec);
    Tensor v = batch_norm_train(cc.ref_u, refiner.bn, cc.ref_bn);
    cc.ref_x = std::move(cur);
    cc.ref_out_shape = v.shape();
    cc.pooled = adaptive_avg_pool(v);
  } else {
    cc.ref_out_shape = cur.shape();
    cc.pooled = adaptive_avg_pool(cur);
  }
  Tensor logits = linear(cc.pooled, classifier_w, &classifier_b);
  cc.valid = true;
  return logits;
}

std::vector<Tensor> TakuNet::backward(const FwdCache& cache, const Tensor& grad_logits) {
  if (!cache.valid) throw std::runtime_error("backward: no cached train-mode forward");
  auto params = parameters();
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.size(); ++i) index[params[i].name] = i;
  std::vector<Tensor> grads(params.size());
  auto put = [&](const std::string& name, Tensor g) {
    grads.at(index.at(name)) = std::move(g);
  };

  LinearGrads lg = linear_vjp(cache.pooled, classifier_w, grad_logits);
  put("classifier.w", std::move(lg.gw));
  put("classifier.b", std::move(lg.gb));

  Tensor cur;  // gradient flowing toward the input
  if (cfg_.refiner) {
    Tensor gv = adaptive_avg_pool_vjp(cache.ref_out_shape, lg.gx);
    BnGrads bg = batch_norm_vjp(cache.ref_u, refiner.bn, cache.ref_bn, gv);
    gv = Tensor();
    put("refiner.bn.gamma", std::move(bg.ggamma));
    put("refiner.bn.beta", std::move(bg.gbeta));
    ConvGrads cg = conv2d_vjp(cache.ref_x, refiner.w, refiner.spec, bg.gx);
    put("refiner.dw.w", std::move(cg.gw));
    if (refiner.spec.bias) put("refiner.dw.b", std::move(cg.gb));
    cur = std::move(cg.gx);
  } else {
    cur = adaptive_avg_pool_vjp(cache.ref_out_shape, lg.gx);
  }
  lg.gx = Tensor();

  for (int s = 3; s >= 0; --s) {
    const auto si = static_cast<std::size_t>(s);
    auto& ds = downsamplers[si];
    const auto& dc = cache.ds[si];
    const std::string dp = "downsampler" + std::to_string(s + 1);
    Tensor gp;
    if (cfg_.grn) {
      GrnGrads gg = grn_vjp(dc.p, ds.grn, dc.grn, cur);
      put(dp + ".grn.gamma", std::move(gg.ggamma));
      put(dp + ".grn.beta", std::move(gg.gbeta));
      gp = std::move(gg.gx);
    } else {
      gp = std::move(cur);
    }
    Tensor ga = ds.max_pool ? max_pool2d_vjp(dc.argmax, dc.act_shape, gp)
                            : avg_pool2d_vjp(dc.act_shape, 2, 2, gp);
    gp = Tensor();
    Tensor gv = relu6_vjp(bn_apply_cached(dc.u, ds.bn, dc.bn), ga);
    ga = Tensor();
    BnGrads bg = batch_norm_vjp(dc.u, ds.bn, dc.bn, gv);
    gv = Tensor();
    put(dp + ".bn.gamma", std::move(bg.ggamma));
    put(dp + ".bn.beta", std::move(bg.gbeta));
    ConvGrads cg = conv2d_vjp(dc.pw_in, ds.w, ds.spec, bg.gx);
    bg.gx = Tensor();
    put(dp + ".pw.w", std::move(cg.gw));
    if (ds.spec.bias) put(dp + ".pw.b", std::move(cg.gb));
    Tensor gcat = cfg_.channel_shuffle
                      ? channel_shuffle(cg.gx, dc.cat_shape[1] / ds.spec.groups)
                      : std::move(cg.gx);
    cg.gx = Tensor();

    Tensor gstage_in;
    const std::int64_t width = cfg_.stage_width(s);
    if (cfg_.dense_connections) {
      gstage_in = slice_channels(gcat, 0, width);
      cur = slice_channels(gcat, width, 2 * width);
    } else {
      cur = std::move(gcat);
    }
    gcat = Tensor();

    auto& blocks = stages[si];
    const std::string sp = "stage" + std::to_string(s + 1);
    for (int b = static_cast<int>(blocks.size()) - 1; b >= 0; --b) {
      const auto bi = static_cast<std::size_t>(b);
      const auto& bc = cache.blocks[si][bi];
      auto& blk = blocks[bi];
      const std::string bp = sp + ".block" + std::to_string(b + 1);
      Tensor gv2 = relu6_vjp(bn_apply_cached(bc.u, blk.bn, bc.bn), cur);
      BnGrads bg2 = batch_norm_vjp(bc.u, blk.bn, bc.bn, gv2);
      gv2 = Tensor();
      put(bp + ".bn.gamma", std::move(bg2.ggamma));
      put(bp + ".bn.beta", std::move(bg2.gbeta));
      ConvGrads cg2 = conv2d_vjp(bc.x, blk.w, blk.spec, bg2.gx);
      bg2.gx = Tensor();
      put(bp + ".dw.w", std::move(cg2.gw));
      if (blk.spec.bias) put(bp + ".dw.b", std::move(cg2.gb));
      add_inplace(cur, cg2.gx);  // residual path
    }
    if (cfg_.dense_connections) add_inplace(cur, gstage_in);
  }

  // stem
  Tensor gy1 = avg_pool2d_vjp(cache.stem_u1.shape(), 2, 2, cur);
  {
    Tensor gv2 = relu6_vjp(bn_apply_cached(cache.stem_u2, stem_dw.bn, cache.stem_bn2), cur);
    cur = Tensor();
    BnGrads bg = batch_norm_vjp(cache.stem_u2, stem_dw.bn, cache.stem_bn2, gv2);
    gv2 = Tensor();
    put("stem.bn2.gamma", std::move(bg.ggamma));
    put("stem.bn2.beta", std::move(bg.gbeta));
    Tensor y1 = relu6(bn_apply_cached(cache.stem_u1, stem_conv.bn, cache.stem_bn1));
    ConvGrads cg = conv2d_vjp(y1, stem_dw.w, stem_dw.spec, bg.gx);
    put("stem.dw.w", std::move(cg.gw));
    if (stem_dw.spec.bias) put("stem.dw.b", std::move(cg.gb));
    add_inplace(gy1, cg.gx);
  }
  {
    Tensor gv1 = relu6_vjp(bn_apply_cached(cache.stem_u1, stem_conv.bn, cache.stem_bn1), gy1);
    gy1 = Tensor();
    BnGrads bg = batch_norm_vjp(cache.stem_u1, stem_conv.bn, cache.stem_bn1, gv1);
    gv1 = Tensor();
    put("stem.bn1.gamma", std::move(bg.ggamma));
    put("stem.bn1.beta", std::move(bg.gbeta));
    ConvGrads cg = conv2d_vjp(cache.input, stem_conv.w, stem_conv.spec, bg.gx, false);
    put("stem.conv.w", std::move(cg.gw));
    if (stem_conv.spec.bias) put("stem.conv.b", std::move(cg.gb));
  }

  for (std::size_t i = 0; i < grads.size(); ++i)
    if (grads[i].numel() == 0)
      throw std::runtime_error("backward: missing gradient for " + params[i].name);
  return grads;
}

namespace {

std::int64_t bn_params(std::int64_t c) { return 2 * c; }

}  // namespace

CountReport count_params(const ArchConfig& cfg) {
  CountReport r;
  const std::int64_t b = cfg.conv_bias ? 1 : 0;
  auto row = [&](const std::string& n, std::int64_t v) {
    r.rows.push_back({n, v});
    r.total += v;
  };
  row("stem.conv", cfg.stem_channels * 3 * 9 + b * cfg.stem_channels);
  row("stem.bn1", bn_params(cfg.stem_channels));
  row("stem.dw", cfg.stem_channels * 9 + b * cfg.stem_channels);
  row("stem.bn2", bn_params(cfg.stem_channels));
  for (int s = 0; s < 4; ++s) {
    const auto si = static_cast<std::size_t>(s);
    const std::int64_t w = cfg.stage_width(s);
    const std::int64_t t = cfg.stage_out_channels[si];
    for (std::int64_t blk = 0; blk < cfg.stage_depths[si]; ++blk) {
      const std::string bp = "stage" + std::to_string(s + 1) + ".block" + std::to_string(blk + 1);
      row(bp + ".dw", w * 9 + b * w);
      row(bp + ".bn", bn_params(w));
    }
    const std::string dp = "downsampler" + std::to_string(s + 1);
    row(dp + ".pw", t * (cfg.ds_in_channels(s) / cfg.ds_groups(s)) + b * t);
    row(dp + ".bn", bn_params(t));
    if (cfg.grn) row(dp + ".grn", 2 * (cfg.grn_per_channel ? t : 1));
  }
  const std::int64_t f = cfg.stage_out_channels[3];
  if (cfg.refiner) {
    row("refiner.dw", f * 9 + b * f);
    row("refiner.bn", bn_params(f));
  }
  row("classifier", f * cfg.num_classes + cfg.num_classes);
  return r;
}

CountReport count_params(const TakuNet& model) {
  CountReport r;
  for (const auto& [name, t] : model.named_params()) {
    r.rows.push_back({name, t->numel()});
    r.total += t->numel();
  }
  return r;
}

CountReport count_flops(const ArchConfig& cfg, std::int64_t h, std::int64_t w) {
  const ShapeChain sc = shape_chain(cfg, h, w);
  CountReport r;
  auto row = [&](const std::string& n, std::int64_t v) {
    r.rows.push_back({n, v});
    r.total += v;
  };
  const std::int64_t c0 = cfg.stem_channels;
  row("stem.conv", sc.h1 * sc.w1 * c0 * 3 * 9);
  row("stem.bn1", sc.h1 * sc.w1 * c0);
  row("stem.relu1", sc.h1 * sc.w1 * c0);
  row("stem.dw", sc.h2 * sc.w2 * c0 * 9);
  row("stem.bn2", sc.h2 * sc.w2 * c0);
  row("stem.relu2", sc.h2 * sc.w2 * c0);
  row("stem.pool", sc.h2 * sc.w2 * c0);
  row("stem.add", sc.h2 * sc.w2 * c0);
  for (int s = 0; s < 4; ++s) {
    const auto si = static_cast<std::size_t>(s);
    const std::int64_t cw = cfg.stage_width(s);
    const std::int64_t t = cfg.stage_out_channels[si];
    const std::int64_t hw = sc.sh[si] * sc.sw[si];
    const std::int64_t ph = (sc.sh[si] - 2) / 2 + 1, pw2 = (sc.sw[si] - 2) / 2 + 1;
    for (std::int64_t blk = 0; blk < cfg.stage_depths[si]; ++blk) {
      const std::string bp = "stage" + std::to_string(s + 1) + ".block" + std::to_string(blk + 1);
      row(bp + ".dw", hw * cw * 9);
      row(bp + ".bn", hw * cw);
      row(bp + ".relu", hw * cw);
      row(bp + ".add", hw * cw);
    }
    const std::string dp = "downsampler" + std::to_string(s + 1);
    row(dp + ".pw", hw * t * (cfg.ds_in_channels(s) / cfg.ds_groups(s)));
    row(dp + ".bn", hw * t);
    row(dp + ".relu", hw * t);
    row(dp + ".pool", ph * pw2 * t);
    if (cfg.grn) row(dp + ".grn", 4 * ph * pw2 * t + t);
  }
  const std::int64_t f = cfg.stage_out_channels[3];
  if (cfg.refiner) {
    row("refiner.dw", sc.fh * sc.fw * f * 9);
    row("refiner.bn", sc.fh * sc.fw * f);
    row("refiner.pool", f);
  } else {
    row("pool", f);
  }
  row("classifier", f * cfg.num_classes);
  return r;
}

DeriveResult derive_channel_config(const DeriveConstraints& c) {
  DeriveResult res;
  std::vector<DeriveCandidate> window;  // param fallback window
  std::vector<DeriveCandidate> all;

  auto eval = [&](std::int64_t w1, std::int64_t w2, std::int64_t w3, bool bias, bool grn_pc,
                  DeriveCandidate& cand) -> bool {
    ArchConfig cfg;
    cfg.stem_channels = c.stem;
    cfg.stage_depths = c.depths;
    cfg.stage_out_channels = {w1, w2, w3, c.final_width};
    cfg.conv_bias = bias;
    cfg.grn_per_channel = grn_pc;
    cfg.num_classes = 5;
    try {
      cfg.validate();
    } catch (const std::invalid_argument&) {
      return false;
    }
    cand.widths = cfg.stage_out_channels;
    cand.conv_bias = bias;
    cand.grn_per_channel = grn_pc;
    cand.params5 = count_params(cfg).total;
    ArchConfig cfg4 = cfg;
    cfg4.num_classes = 4;
    cand.params4 = count_params(cfg4).total;
    cand.flops_240 = count_flops(cfg, 240, 240).total;
    ArchConfig cfg224 = cfg;
    cfg224.input_h = cfg224.input_w = 224;
    cand.flops_224 = count_flops(cfg224, 224, 224).total;
    const auto in_win = [&](std::int64_t got, double want) {
      return std::abs(static_cast<double>(got) - want) <= c.flop_tolerance * want;
    };
    cand.in_flop_window = in_win(cand.flops_240, c.flops_240) && in_win(cand.flops_224, c.flops_224);
    return true;
  };

  std::int64_t n_valid = 0;
  for (std::int64_t w1 = std::max(c.width_lo, c.stem); w1 <= c.width_hi; w1 += c.width_step)
    for (std::int64_t w2 = w1; w2 <= c.width_hi; w2 += c.width_step)
      for (std::int64_t w3 = w2; w3 <= std::min(c.width_hi, c.final_width); w3 += c.width_step)
        for (int bias = 0; bias < 2; ++bias)
          for (int grn_pc = 0; grn_pc < 2; ++grn_pc) {
            DeriveCandidate cand;
            if (!eval(w1, w2, w3, bias != 0, grn_pc != 0, cand)) continue;
            ++n_valid;
            all.push_back(cand);
            if (cand.params5 == c.target_params_5) res.exact_matches.push_back(cand);
            const double rel = std::abs(static_cast<double>(cand.params5 - c.target_params_5)) /
                               static_cast<double>(c.target_params_5);
            if (rel <= c.param_tolerance) window.push_back(cand);
          }

  auto dist = [&](const DeriveCandidate& x) {
    return std::abs(x.params5 - c.target_params_5);
  };
  std::stable_sort(all.begin(), all.end(),
                   [&](const DeriveCandidate& a, const DeriveCandidate& b) {
                     return dist(a) < dist(b);
                   });
  res.nearest.assign(all.begin(), all.begin() + std::min<std::size_t>(5, all.size()));

  bool have_chosen = false;
  if (!res.exact_matches.empty()) {
    res.exact = true;
    res.chosen = res.exact_matches.front();  // enumeration order is lexicographic
    have_chosen = true;
  } else {
    auto pick = [&](const std::vector<DeriveCandidate>& v) {
      for (const auto& cand : v)
        if (!have_chosen || dist(cand) < dist(res.chosen)) {  // ties: first lexicographic
          res.chosen = cand;
          have_chosen = true;
        }
    };
    std::vector<DeriveCandidate> strict;
    for (const auto& cand : window)
      if (cand.in_flop_window) strict.push_back(cand);
    pick(strict.empty() ? window : strict);
  }
  if (!have_chosen) throw std::runtime_error("derive_channel_config: empty search space");
  res.config = ArchConfig{};
  res.config.stem_channels = c.stem;
  res.config.stage_depths = c.depths;
  res.config.stage_out_channels = res.chosen.widths;
  res.config.conv_bias = res.chosen.conv_bias;
  res.config.grn_per_channel = res.chosen.grn_per_channel;

  auto line = [&](std::string s) { res.report.push_back(std::move(s)); };
  line("search: monotone widths " + std::to_string(c.stem) + " <= w1 <= w2 <= w3 <= " +
       std::to_string(c.final_width) + ", step " + std::to_string(c.width_step) +
       ", free bits {conv_bias, grn_per_channel}; " + std::to_string(n_valid) +
       " valid candidates");
  line("exact matches at " + std::to_string(c.target_params_5) + " params: " +
       std::to_string(res.exact_matches.size()));
  if (!res.exact) {
    line("fallback: params within ±" + std::to_string(static_cast<int>(c.param_tolerance * 100)) +
         "%: " + std::to_string(window.size()) + " candidates, of which " +
         std::to_string(std::count_if(window.begin(), window.end(),
                                      [](const DeriveCandidate& x) { return x.in_flop_window; })) +
         " also sit inside both ±2% FLOP windows");
    line("selected: min |param delta| among the FLOP-window candidates, ties lexicographic");
  }
  {
    DeriveCandidate low;
    if (eval(c.stem, c.stem, c.stem, false, false, low))
      line("sanity: width " + std::to_string(c.stem) + " throughout -> " +
           std::to_string(low.params5) + " params (misses the target by " +
           std::to_string(c.target_params_5 - low.params5) + ")");
  }
  const auto& ch = res.chosen;
  line("chosen: widths " + kv_from_int4(ch.widths) + ", conv_bias=" +
       std::to_string(ch.conv_bias ? 1 : 0) + ", grn_per_channel=" +
       std::to_string(ch.grn_per_channel ? 1 : 0));
  line("chosen params @5 classes: " + std::to_string(ch.params5) + " (target " +
       std::to_string(c.target_params_5) + ", delta " +
       std::to_string(ch.params5 - c.target_params_5) + ")");
  line("chosen params @4 classes: " + std::to_string(ch.params4) + " (target " +
       std::to_string(c.target_params_4) + ", delta " +
       std::to_string(ch.params4 - c.target_params_4) + ")");
  line("chosen flops @240x240: " + std::to_string(ch.flops_240) + ", @224x224: " +
       std::to_string(ch.flops_224));
  return res;
}

}  // namespace taku
