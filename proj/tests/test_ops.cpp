#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_util.hpp"
#include "takunet/ops.hpp"
#include "takunet/rng.hpp"

using namespace taku;

namespace {

// dense reference convolution, all math in double
Tensor conv_ref(const Tensor& x, const Tensor& w, const Tensor* b, const ConvSpec& s) {
  const std::int64_t N = x.dim(0), IH = x.dim(2), IW = x.dim(3);
  const std::int64_t OH = s.out_extent(IH, s.kh, s.stride_h, s.pad_h, s.dil_h);
  const std::int64_t OW = s.out_extent(IW, s.kw, s.stride_w, s.pad_w, s.dil_w);
  const std::int64_t icg = s.in_channels / s.groups;
  const std::int64_t ocg = s.out_channels / s.groups;
  Tensor y(x.dtype(), {N, s.out_channels, OH, OW});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < s.out_channels; ++oc) {
      const std::int64_t g = oc / ocg;
      for (std::int64_t oy = 0; oy < OH; ++oy)
        for (std::int64_t ox = 0; ox < OW; ++ox) {
          double acc = b ? b->get(oc) : 0.0;
          for (std::int64_t ic = 0; ic < icg; ++ic)
            for (int ky = 0; ky < s.kh; ++ky)
              for (int kx = 0; kx < s.kw; ++kx) {
                const std::int64_t iy = oy * s.stride_h - s.pad_h + static_cast<std::int64_t>(ky) * s.dil_h;
                const std::int64_t ix = ox * s.stride_w - s.pad_w + static_cast<std::int64_t>(kx) * s.dil_w;
                if (iy < 0 || iy >= IH || ix < 0 || ix >= IW) continue;
                acc += x.get(x.index4(n, g * icg + ic, iy, ix)) *
                       w.get(w.index4(oc, ic, ky, kx));
              }
          y.set(y.index4(n, oc, oy, ox), acc);
        }
    }
  return y;
}

Tensor t4(DType dt, std::vector<std::int64_t> shape, const std::vector<double>& vals) {
  Tensor t(dt, std::move(shape));
  REQUIRE(t.numel() == static_cast<std::int64_t>(vals.size()));
  for (std::size_t i = 0; i < vals.size(); ++i) t.set(static_cast<std::int64_t>(i), vals[i]);
  return t;
}

}  // namespace

TEST_CASE("conv2d 3x3 hand oracle") {
  ConvSpec s;
  s.in_channels = 1;
  s.out_channels = 1;
  s.kh = s.kw = 2;
  Tensor x = t4(DType::f32, {1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = t4(DType::f32, {1, 1, 2, 2}, {1, 1, 1, 1});
  Tensor y = conv2d(x, w, nullptr, s);
  CHECK(y.shape() == std::vector<std::int64_t>{1, 1, 2, 2});
  CHECK(y.get(0) == doctest::Approx(12));
  CHECK(y.get(1) == doctest::Approx(16));
  CHECK(y.get(2) == doctest::Approx(24));
  CHECK(y.get(3) == doctest::Approx(28));

  s.bias = true;
  Tensor b = t4(DType::f32, {1}, {0.5});
  Tensor yb = conv2d(x, w, &b, s);
  CHECK(yb.get(0) == doctest::Approx(12.5));
}

TEST_CASE("conv2d stride/pad/dilation output extents") {
  ConvSpec s;
  // k3 s2 p2 d2 halves 240 -> 120 and 224 -> 112
  CHECK(s.out_extent(240, 3, 2, 2, 2) == 120);
  CHECK(s.out_extent(224, 3, 2, 2, 2) == 112);
  CHECK(s.out_extent(15, 3, 1, 1, 1) == 15);
  CHECK(s.out_extent(7, 2, 2, 0, 1) == 3);  // pooling-style floor
}

TEST_CASE("conv2d matches dense reference over random specs") {
  Rng rng(42);
  for (int rep = 0; rep < 30; ++rep) {
    ConvSpec s;
    s.groups = 1 + static_cast<std::int64_t>(rng.randint(3));
    s.in_channels = s.groups * (1 + static_cast<std::int64_t>(rng.randint(3)));
    s.out_channels = s.groups * (1 + static_cast<std::int64_t>(rng.randint(3)));
    s.kh = 1 + static_cast<int>(rng.randint(3));
    s.kw = 1 + static_cast<int>(rng.randint(3));
    s.stride_h = 1 + static_cast<int>(rng.randint(3));
    s.stride_w = 1 + static_cast<int>(rng.randint(3));
    s.pad_h = static_cast<int>(rng.randint(3));
    s.pad_w = static_cast<int>(rng.randint(3));
    s.dil_h = 1 + static_cast<int>(rng.randint(2));
    s.dil_w = 1 + static_cast<int>(rng.randint(2));
    s.bias = rng.bernoulli(0.5);
    std::int64_t ih = 0, iw = 0;
    do {
      ih = 2 + static_cast<std::int64_t>(rng.randint(9));
      iw = 2 + static_cast<std::int64_t>(rng.randint(9));
    } while (s.out_extent(ih, s.kh, s.stride_h, s.pad_h, s.dil_h) < 1 ||
             s.out_extent(iw, s.kw, s.stride_w, s.pad_w, s.dil_w) < 1);
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.randint(2));

    Tensor x = fd::rand_tensor({n, s.in_channels, ih, iw}, rng);
    Tensor w = fd::rand_tensor({s.out_channels, s.in_channels / s.groups, s.kh, s.kw}, rng);
    Tensor b = fd::rand_tensor({s.out_channels}, rng);
    Tensor got = conv2d(x, w, s.bias ? &b : nullptr, s);
    Tensor want = conv_ref(x, w, s.bias ? &b : nullptr, s);
    REQUIRE(got.shape() == want.shape());
    for (std::int64_t i = 0; i < got.numel(); ++i)
      CHECK(got.get(i) == doctest::Approx(want.get(i)).epsilon(1e-10));
  }
}

TEST_CASE("conv2d depthwise matches reference") {
  Rng rng(7);
  ConvSpec s;
  s.in_channels = s.out_channels = s.groups = 5;  // depthwise
  s.kh = s.kw = 3;
  s.pad_h = s.pad_w = 1;
  Tensor x = fd::rand_tensor({2, 5, 6, 6}, rng);
  Tensor w = fd::rand_tensor({5, 1, 3, 3}, rng);
  Tensor got = conv2d(x, w, nullptr, s);
  Tensor want = conv_ref(x, w, nullptr, s);
  CHECK(got.shape() == std::vector<std::int64_t>{2, 5, 6, 6});
  for (std::int64_t i = 0; i < got.numel(); ++i)
    CHECK(got.get(i) == doctest::Approx(want.get(i)).epsilon(1e-10));
}

TEST_CASE("conv2d validation errors") {
  ConvSpec s;
  s.in_channels = 3;
  s.out_channels = 4;
  s.groups = 2;  // 3 % 2 != 0
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.groups = 1;
  s.stride_h = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.stride_h = 1;
  s.pad_h = -1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.pad_h = 0;

  Tensor x = Tensor::zeros(DType::f32, {1, 2, 4, 4});  // wrong channel count
  Tensor w = Tensor::zeros(DType::f32, {4, 3, 1, 1});
  CHECK_THROWS_AS(conv2d(x, w, nullptr, s), std::invalid_argument);

  Tensor x3 = Tensor::zeros(DType::f32, {1, 3, 2, 2});
  ConvSpec big = s;
  big.kh = big.kw = 5;  // output extent < 1
  Tensor w5 = Tensor::zeros(DType::f32, {4, 3, 5, 5});
  CHECK_THROWS_AS(conv2d(x3, w5, nullptr, big), std::invalid_argument);
}

TEST_CASE("conv2d f16 accumulates wider than f16") {
  // 2048 + 1 is not representable in f16; a widened accumulator keeps it
  ConvSpec s;
  s.in_channels = 4;
  s.out_channels = 1;
  Tensor x = t4(DType::f16, {1, 4, 1, 1}, {2048, 1, -2048, 1});
  Tensor w = t4(DType::f16, {1, 4, 1, 1}, {1, 1, 1, 1});
  Tensor y = conv2d(x, w, nullptr, s);
  CHECK(y.dtype() == DType::f16);
  CHECK(y.get(0) == doctest::Approx(2.0));
}

TEST_CASE("grad_dtype widens f16 gradients") {
  CHECK(grad_dtype(DType::f16) == DType::f32);
  CHECK(grad_dtype(DType::f32) == DType::f32);
  CHECK(grad_dtype(DType::f64) == DType::f64);
}

TEST_CASE("relu6 values and vjp mask") {
  Tensor x = t4(DType::f32, {1, 1, 1, 6}, {-1, 0, 3, 5.5, 6, 7});
  Tensor y = relu6(x);
  const double want[] = {0, 0, 3, 5.5, 6, 6};
  for (int i = 0; i < 6; ++i) CHECK(y.get(i) == doctest::Approx(want[i]));

  Tensor g = t4(DType::f32, {1, 1, 1, 6}, {1, 1, 1, 1, 1, 1});
  Tensor gx = relu6_vjp(x, g);
  const double wantg[] = {0, 0, 1, 1, 0, 0};  // open interval (0, 6)
  for (int i = 0; i < 6; ++i) CHECK(gx.get(i) == doctest::Approx(wantg[i]));

  Tensor bad = Tensor::zeros(DType::f32, {1, 1, 1, 5});
  CHECK_THROWS_AS(relu6_vjp(x, bad), std::invalid_argument);
}

TEST_CASE("batch_norm_train oracle with running stats") {
  Tensor x = t4(DType::f64, {1, 1, 1, 4}, {1, 2, 3, 4});
  BatchNormState st;
  st.gamma = t4(DType::f64, {1}, {2});
  st.beta = t4(DType::f64, {1}, {1});
  st.running_mean = Tensor::zeros(DType::f64, {1});
  st.running_var = Tensor::full(DType::f64, {1}, 1.0);
  BnCache cache;
  Tensor y = batch_norm_train(x, st, cache);

  const double mean = 2.5, var = 1.25;
  const double invstd = 1.0 / std::sqrt(var + st.eps);
  CHECK(cache.mean[0] == doctest::Approx(mean).epsilon(1e-12));
  CHECK(cache.invstd[0] == doctest::Approx(invstd).epsilon(1e-12));
  for (int i = 0; i < 4; ++i)
    CHECK(y.get(i) == doctest::Approx(2.0 * ((i + 1) - mean) * invstd + 1.0).epsilon(1e-12));

  // running stats: momentum 0.1, variance stored unbiased (m=4 -> *4/3)
  CHECK(st.running_mean.get(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(st.running_var.get(0) == doctest::Approx(0.9 + 0.1 * var * 4.0 / 3.0).epsilon(1e-12));

  // cached re-application is bit-identical to the train output
  Tensor y2 = bn_apply_cached(x, st, cache);
  for (int i = 0; i < 4; ++i) CHECK(y2.get(i) == y.get(i));

  // eval mode uses the running stats
  Tensor ye = batch_norm_eval(x, st);
  const double rm = st.running_mean.get(0), rv = st.running_var.get(0);
  for (int i = 0; i < 4; ++i)
    CHECK(ye.get(i) ==
          doctest::Approx(2.0 * ((i + 1) - rm) / std::sqrt(rv + st.eps) + 1.0).epsilon(1e-10));
}

TEST_CASE("batch_norm shape validation") {
  Tensor x = Tensor::zeros(DType::f32, {1, 2, 2, 2});
  BatchNormState st;
  st.gamma = Tensor::full(DType::f32, {3}, 1.0);  // wrong length
  st.beta = Tensor::zeros(DType::f32, {3});
  st.running_mean = Tensor::zeros(DType::f32, {3});
  st.running_var = Tensor::full(DType::f32, {3}, 1.0);
  BnCache cache;
  CHECK_THROWS_AS(batch_norm_train(x, st, cache), std::invalid_argument);
  CHECK_THROWS_AS(batch_norm_eval(x, st), std::invalid_argument);
}

TEST_CASE("grn oracle, scalar affine") {
  // two channels, one sample: norms 5 and 10, mean 7.5
  Tensor x = t4(DType::f64, {1, 2, 1, 2}, {3, 4, 6, 8});
  GrnState st;
  st.gamma = t4(DType::f64, {1}, {0.5});
  st.beta = t4(DType::f64, {1}, {0.25});
  GrnCache cache;
  Tensor y = grn(x, st, cache);
  CHECK(cache.norms[0] == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(cache.norms[1] == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(cache.mean_norms[0] == doctest::Approx(7.5).epsilon(1e-12));
  const double s0 = 1.0 + 0.5 * 5.0 / (7.5 + st.eps);
  const double s1 = 1.0 + 0.5 * 10.0 / (7.5 + st.eps);
  CHECK(y.get(0) == doctest::Approx(3 * s0 + 0.25).epsilon(1e-10));
  CHECK(y.get(1) == doctest::Approx(4 * s0 + 0.25).epsilon(1e-10));
  CHECK(y.get(2) == doctest::Approx(6 * s1 + 0.25).epsilon(1e-10));
  CHECK(y.get(3) == doctest::Approx(8 * s1 + 0.25).epsilon(1e-10));
}

TEST_CASE("grn zero-initialised affine is the identity") {
  Rng rng(3);
  Tensor x = fd::rand_tensor({2, 4, 3, 3}, rng);
  GrnState st;
  st.gamma = Tensor::zeros(DType::f64, {1});
  st.beta = Tensor::zeros(DType::f64, {1});
  GrnCache cache;
  Tensor y = grn(x, st, cache);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.get(i) == doctest::Approx(x.get(i)).epsilon(1e-12));
}

TEST_CASE("grn per-channel affine and validation") {
  Tensor x = t4(DType::f64, {1, 2, 1, 1}, {1, 1});  // norms 1,1 mean 1
  GrnState st;
  st.gamma = t4(DType::f64, {2}, {1, 2});
  st.beta = t4(DType::f64, {2}, {0.5, -0.5});
  GrnCache cache;
  Tensor y = grn(x, st, cache);
  const double nc = 1.0 / (1.0 + st.eps);
  CHECK(y.get(0) == doctest::Approx(1 * (1 + 1 * nc) + 0.5).epsilon(1e-10));
  CHECK(y.get(1) == doctest::Approx(1 * (1 + 2 * nc) - 0.5).epsilon(1e-10));

  GrnState bad;
  bad.gamma = Tensor::zeros(DType::f64, {3});  // neither C nor 1
  bad.beta = Tensor::zeros(DType::f64, {3});
  GrnCache cc;
  CHECK_THROWS_AS(grn(x, bad, cc), std::invalid_argument);
}

TEST_CASE("max_pool2d oracle, argmax and tie break") {
  Tensor x = t4(DType::f32, {1, 1, 4, 4},
                {1, 2, 5, 5,
                 3, 4, 5, 5,
                 0, 0, 9, 8,
                 0, 0, 7, 6});
  std::vector<std::int64_t> argmax;
  Tensor y = max_pool2d(x, 2, 2, &argmax);
  CHECK(y.shape() == std::vector<std::int64_t>{1, 1, 2, 2});
  CHECK(y.get(0) == doctest::Approx(4));
  CHECK(y.get(1) == doctest::Approx(5));  // four-way tie
  CHECK(y.get(2) == doctest::Approx(0));  // tie among zeros
  CHECK(y.get(3) == doctest::Approx(9));
  REQUIRE(argmax.size() == 4);
  CHECK(argmax[0] == 5);   // row 1, col 1
  CHECK(argmax[1] == 2);   // first of the tied 5s in row-major order
  CHECK(argmax[2] == 8);   // first zero of the window
  CHECK(argmax[3] == 10);

  Tensor g = t4(DType::f32, {1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor gx = max_pool2d_vjp(argmax, x.shape(), g);
  CHECK(gx.get(5) == doctest::Approx(1));
  CHECK(gx.get(2) == doctest::Approx(2));
  CHECK(gx.get(8) == doctest::Approx(3));
  CHECK(gx.get(10) == doctest::Approx(4));
  double total = 0;
  for (std::int64_t i = 0; i < gx.numel(); ++i) total += gx.get(i);
  CHECK(total == doctest::Approx(10));
}

TEST_CASE("max_pool2d drops ragged edge and rejects oversize windows") {
  Tensor x = Tensor::zeros(DType::f32, {1, 1, 5, 5});
  Tensor y = max_pool2d(x, 2, 2);
  CHECK(y.dim(2) == 2);
  CHECK(y.dim(3) == 2);
  Tensor tiny = Tensor::zeros(DType::f32, {1, 1, 1, 1});
  CHECK_THROWS_AS(max_pool2d(tiny, 2, 2), std::invalid_argument);
}

TEST_CASE("avg_pool2d oracle and vjp spreads evenly") {
  Tensor x = t4(DType::f32, {1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor y = avg_pool2d(x, 2, 2);
  CHECK(y.shape() == std::vector<std::int64_t>{1, 1, 1, 2});
  CHECK(y.get(0) == doctest::Approx(3.5));
  CHECK(y.get(1) == doctest::Approx(5.5));

  Tensor g = t4(DType::f32, {1, 1, 1, 2}, {4, 8});
  Tensor gx = avg_pool2d_vjp(x.shape(), 2, 2, g);
  const double want[] = {1, 1, 2, 2, 1, 1, 2, 2};
  for (int i = 0; i < 8; ++i) CHECK(gx.get(i) == doctest::Approx(want[i]));
}

TEST_CASE("adaptive_avg_pool oracle") {
  Tensor x = t4(DType::f32, {1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor y = adaptive_avg_pool(x);
  CHECK(y.shape() == std::vector<std::int64_t>{1, 2, 1, 1});
  CHECK(y.get(0) == doctest::Approx(2.5));
  CHECK(y.get(1) == doctest::Approx(25));

  Tensor g = t4(DType::f32, {1, 2, 1, 1}, {4, 8});
  Tensor gx = adaptive_avg_pool_vjp(x.shape(), g);
  for (int i = 0; i < 4; ++i) CHECK(gx.get(i) == doctest::Approx(1));
  for (int i = 4; i < 8; ++i) CHECK(gx.get(i) == doctest::Approx(2));
}

TEST_CASE("channel_shuffle oracle and inverse") {
  Tensor x(DType::f32, {1, 6, 1, 1});
  for (int c = 0; c < 6; ++c) x.set(c, c);
  Tensor y = channel_shuffle(x, 2);
  const double want[] = {0, 3, 1, 4, 2, 5};
  for (int c = 0; c < 6; ++c) CHECK(y.get(c) == doctest::Approx(want[c]));

  // shuffling by g then by C/g restores the original order
  Rng rng(11);
  Tensor r = fd::rand_tensor({2, 12, 2, 3}, rng);
  Tensor back = channel_shuffle(channel_shuffle(r, 3), 4);
  for (std::int64_t i = 0; i < r.numel(); ++i) CHECK(back.get(i) == r.get(i));

  CHECK_THROWS_AS(channel_shuffle(x, 4), std::invalid_argument);
}

TEST_CASE("linear oracle") {
  Tensor x = t4(DType::f32, {2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w = t4(DType::f32, {2, 3}, {1, 0, -1, 0.5, 0.5, 0.5});
  Tensor b = t4(DType::f32, {2}, {10, -10});
  Tensor y = linear(x, w, &b);
  CHECK(y.shape() == std::vector<std::int64_t>{2, 2});
  CHECK(y.get(0) == doctest::Approx(1 - 3 + 10));
  CHECK(y.get(1) == doctest::Approx(3 - 10));
  CHECK(y.get(2) == doctest::Approx(4 - 6 + 10));
  CHECK(y.get(3) == doctest::Approx(7.5 - 10));

  Tensor wbad = Tensor::zeros(DType::f32, {2, 4});
  CHECK_THROWS_AS(linear(x, wbad, nullptr), std::invalid_argument);
}

TEST_CASE("linear f16 keeps a wide accumulator") {
  Tensor x = t4(DType::f16, {1, 4}, {2048, 1, -2048, 1});
  Tensor w = t4(DType::f16, {1, 4}, {1, 1, 1, 1});
  Tensor y = linear(x, w, nullptr);
  CHECK(y.get(0) == doctest::Approx(2.0));
}

TEST_CASE("softmax cross entropy oracle") {
  // uniform logits: loss = ln K, grad = (1/K - onehot) / N
  Tensor z = Tensor::zeros(DType::f64, {1, 4});
  const CeResult ce = softmax_cross_entropy(z, {2});
  CHECK(ce.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(ce.grad_logits.dtype() == DType::f64);
  CHECK(ce.grad_logits.get(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(ce.grad_logits.get(2) == doctest::Approx(-0.75).epsilon(1e-12));

  // two rows: per-sample mean halves the gradients; rows sum to zero
  Rng rng(5);
  Tensor z2 = fd::rand_tensor({2, 5}, rng, -2, 2);
  const CeResult c2 = softmax_cross_entropy(z2, {0, 4});
  for (int n = 0; n < 2; ++n) {
    double row = 0;
    for (int k = 0; k < 5; ++k) row += c2.grad_logits.get(n * 5 + k);
    CHECK(row == doctest::Approx(0.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(softmax_cross_entropy(z, {0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_cross_entropy(z, {4}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_cross_entropy(z, {-1}), std::invalid_argument);
}

TEST_CASE("softmax cross entropy is shift invariant and f16 grads are f32") {
  Tensor z = t4(DType::f32, {1, 3}, {1, 2, 3});
  Tensor zs = t4(DType::f32, {1, 3}, {1001, 1002, 1003});
  const CeResult a = softmax_cross_entropy(z, {1});
  const CeResult b = softmax_cross_entropy(zs, {1});
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-6));

  Tensor zh = t4(DType::f16, {1, 3}, {1, 2, 3});
  const CeResult h = softmax_cross_entropy(zh, {1});
  CHECK(h.grad_logits.dtype() == DType::f32);
}

TEST_CASE("finite difference: conv2d") {
  Rng rng(100);
  for (int i = 0; i < 4; ++i) CHECK(fd::check_conv_once(rng) < 1e-4);
}

TEST_CASE("finite difference: relu6") {
  Rng rng(101);
  for (int i = 0; i < 4; ++i) CHECK(fd::check_relu6_once(rng) < 1e-4);
}

TEST_CASE("finite difference: batch norm") {
  Rng rng(102);
  for (int i = 0; i < 4; ++i) CHECK(fd::check_bn_once(rng) < 1e-4);
}

TEST_CASE("finite difference: grn") {
  Rng rng(103);
  for (int i = 0; i < 3; ++i) CHECK(fd::check_grn_once(rng, false) < 1e-4);
  for (int i = 0; i < 3; ++i) CHECK(fd::check_grn_once(rng, true) < 1e-4);
}

TEST_CASE("finite difference: pooling") {
  Rng rng(104);
  for (int i = 0; i < 3; ++i) CHECK(fd::check_max_pool_once(rng) < 1e-4);
  for (int i = 0; i < 3; ++i) CHECK(fd::check_avg_pool_once(rng) < 1e-4);
  for (int i = 0; i < 3; ++i) CHECK(fd::check_adaptive_pool_once(rng) < 1e-4);
}

TEST_CASE("finite difference: linear and cross entropy") {
  Rng rng(105);
  for (int i = 0; i < 4; ++i) CHECK(fd::check_linear_once(rng) < 1e-4);
  for (int i = 0; i < 4; ++i) CHECK(fd::check_softmax_ce_once(rng) < 1e-4);
}
