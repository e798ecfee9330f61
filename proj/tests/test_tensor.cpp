// Tensor op contracts: worked integer examples, brute-force oracles for the
// composite kernels, and autodiff behavior under the tape.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cers/tensor.hpp"

using namespace cers;

namespace {

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace

TEST(Tensor, ConstructionAndViews) {
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.dim(0), 2);
  for (float v : t.data()) EXPECT_EQ(v, 1.5f);

  auto r = t.reshape({3, 2});
  EXPECT_EQ(r.dim(0), 3);
  EXPECT_EQ(r.data().data(), t.data().data());  // same storage

  EXPECT_THROW(t.reshape({4, 2}), std::invalid_argument);
  EXPECT_THROW(Tensor::from_data({2, 2}, {1.f, 2.f, 3.f}), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 3}).item(), std::invalid_argument);
}

TEST(Tensor, AddMulScale) {
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from_data({2, 2}, {10, 20, 30, 40});
  auto s = add(a, b);
  EXPECT_EQ(s.data()[0], 11);
  EXPECT_EQ(s.data()[3], 44);
  auto p = mul(a, b);
  EXPECT_EQ(p.data()[1], 40);
  auto sc = scale(a, -2.0f);
  EXPECT_EQ(sc.data()[2], -6);
  EXPECT_THROW(add(a, Tensor({2, 3})), std::invalid_argument);
}

TEST(Tensor, Activations) {
  auto x = Tensor::from_data({4}, {-1, 0, 1, 2});
  auto r = relu(x);
  EXPECT_EQ(r.data()[0], 0);
  EXPECT_EQ(r.data()[3], 2);

  auto sg = sigmoid(Tensor::from_data({1}, {0}));
  EXPECT_FLOAT_EQ(sg.item(), 0.5f);

  auto g = gelu(x);
  EXPECT_NEAR(g.data()[0], -0.15865525, 1e-6);  // -1 * Phi(-1)
  EXPECT_EQ(g.data()[1], 0.0f);
  EXPECT_NEAR(g.data()[2], 0.84134475, 1e-6);  // 1 * Phi(1)
  // x * Phi(x) + (-x) * Phi(-x) = x for every x
  for (int i = 0; i < 4; ++i) {
    float xv = x.data()[i];
    auto gp = gelu(Tensor::from_data({1}, {xv}));
    auto gn = gelu(Tensor::from_data({1}, {-xv}));
    EXPECT_NEAR(gp.item() - gn.item(), xv, 1e-6);
  }
}

TEST(Tensor, SoftmaxContracts) {
  auto u = softmax(Tensor::from_data({1, 3}, {0, 0, 0}), 1);
  for (float v : u.data()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);

  auto x = Tensor::from_data({2, 3}, {0.3f, -1.2f, 2.0f, 5.0f, 5.0f, 5.0f});
  auto sm = softmax(x, 1);
  for (int r = 0; r < 2; ++r) {
    double row = 0;
    for (int c = 0; c < 3; ++c) row += sm.data()[r * 3 + c];
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
  // shift invariance
  auto xs = Tensor::from_data({2, 3}, {10.3f, 8.8f, 12.0f, 15.0f, 15.0f, 15.0f});
  auto sm2 = softmax(xs, 1);
  EXPECT_LT(max_abs_diff(sm.data(), sm2.data()), 1e-6);

  // middle-axis softmax normalizes along that axis only
  Rng rng(3);
  Tensor t({2, 4, 3});
  fill_uniform(t, rng, -2.0, 2.0);
  auto s3 = softmax(t, 1);
  for (int n = 0; n < 2; ++n)
    for (int in = 0; in < 3; ++in) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += s3.data()[(n * 4 + k) * 3 + in];
      EXPECT_NEAR(acc, 1.0, 1e-6);
    }
}

TEST(Tensor, LinearExample) {
  auto x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto w = Tensor::from_data({3, 2}, {1, 0, 0, 1, 1, 1});
  auto b = Tensor::from_data({3}, {0.5f, -0.5f, 0});
  auto y = linear(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  const float expect[6] = {1.5f, 1.5f, 3.0f, 3.5f, 3.5f, 7.0f};
  for (int i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(y.data()[i], expect[i]);

  auto y2 = linear(x, w);  // no bias
  EXPECT_FLOAT_EQ(y2.data()[0], 1.0f);
  EXPECT_THROW(linear(x, Tensor({3, 5})), std::invalid_argument);
}

TEST(Tensor, Conv2dWorkedExample) {
  auto x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = Tensor::from_data({1, 1, 2, 2}, {1, 1, 1, 1});
  auto y = conv2d(x, w, Tensor(), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  const float expect[4] = {12, 16, 24, 28};
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.data()[i], expect[i]);

  auto ys = conv2d(x, w, Tensor(), 2, 1);
  ASSERT_EQ(ys.shape(), (Shape{1, 1, 2, 2}));
  const float expect_s[4] = {1, 5, 11, 28};
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(ys.data()[i], expect_s[i]);

  auto b = Tensor::from_data({1}, {100});
  auto yb = conv2d(x, w, b, 1, 0);
  EXPECT_FLOAT_EQ(yb.data()[0], 112);
}

TEST(Tensor, Conv2dMatchesDirectLoop) {
  Rng rng(11);
  Tensor x({2, 3, 6, 6}), w({4, 3, 3, 3}), b({4});
  fill_uniform(x, rng, -1.0, 1.0);
  fill_uniform(w, rng, -0.5, 0.5);
  fill_uniform(b, rng, -0.2, 0.2);
  const Dim stride = 2, pad = 1, Ho = 3, Wo = 3;
  auto y = conv2d(x, w, b, stride, pad);
  ASSERT_EQ(y.shape(), (Shape{2, 4, Ho, Wo}));

  auto xv = x.data();
  auto wv = w.data();
  auto bv = b.data();
  for (Dim n = 0; n < 2; ++n)
    for (Dim co = 0; co < 4; ++co)
      for (Dim oh = 0; oh < Ho; ++oh)
        for (Dim ow = 0; ow < Wo; ++ow) {
          double acc = bv[co];
          for (Dim ci = 0; ci < 3; ++ci)
            for (Dim kh = 0; kh < 3; ++kh)
              for (Dim kw = 0; kw < 3; ++kw) {
                Dim ih = oh * stride - pad + kh, iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= 6 || iw < 0 || iw >= 6) continue;
                acc += static_cast<double>(xv[((n * 3 + ci) * 6 + ih) * 6 + iw]) *
                       wv[((co * 3 + ci) * 3 + kh) * 3 + kw];
              }
          EXPECT_NEAR(y.data()[((n * 4 + co) * Ho + oh) * Wo + ow], acc, 1e-5);
        }
}

TEST(Tensor, DepthwiseConvEqualsIndependentChannels) {
  Rng rng(13);
  Tensor x({1, 3, 5, 5}), w({3, 1, 3, 3});
  fill_uniform(x, rng, -1.0, 1.0);
  fill_uniform(w, rng, -1.0, 1.0);
  auto y = conv2d(x, w, Tensor(), 1, 1, /*groups=*/3);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 5, 5}));

  for (Dim c = 0; c < 3; ++c) {
    Tensor xc({1, 1, 5, 5}), wc({1, 1, 3, 3});
    for (Dim i = 0; i < 25; ++i) xc.mut()[i] = x.data()[c * 25 + i];
    for (Dim i = 0; i < 9; ++i) wc.mut()[i] = w.data()[c * 9 + i];
    auto yc = conv2d(xc, wc, Tensor(), 1, 1);
    for (Dim i = 0; i < 25; ++i)
      EXPECT_NEAR(y.data()[c * 25 + i], yc.data()[i], 1e-6);
  }
}

TEST(Tensor, PoolExamples) {
  auto x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_FLOAT_EQ(pool2d(x, PoolMode::kMax, 2, 2).item(), 4.0f);
  EXPECT_FLOAT_EQ(pool2d(x, PoolMode::kAvg, 2, 2).item(), 2.5f);

  // padded average divides by the in-bounds count
  auto ones = Tensor::from_data({1, 1, 2, 2}, {1, 1, 1, 1});
  auto p = pool2d(ones, PoolMode::kAvg, 2, 2, 1);
  ASSERT_EQ(p.shape(), (Shape{1, 1, 2, 2}));
  for (float v : p.data()) EXPECT_FLOAT_EQ(v, 1.0f);

  EXPECT_THROW(pool2d(x, PoolMode::kMax, 3, 1, 0), std::invalid_argument);
}

TEST(Tensor, AvgPoolEqualsUniformDepthwiseConv) {
  Rng rng(17);
  Tensor x({1, 2, 8, 8});
  fill_uniform(x, rng, -1.0, 1.0);
  auto p = pool2d(x, PoolMode::kAvg, 2, 2);
  Tensor w({2, 1, 2, 2}, 0.25f);
  auto c = conv2d(x, w, Tensor(), 2, 0, /*groups=*/2);
  EXPECT_LT(max_abs_diff(p.data(), c.data()), 1e-6);
}

TEST(Tensor, MaxPoolBackwardRoutesToArgmax) {
  auto x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  x.set_requires_grad();
  {
    TapeScope<float> scope;
    auto y = pool2d(x, PoolMode::kMax, 2, 2);
    auto loss = sum(y);
    backward(loss);
  }
  const float expect[4] = {0, 0, 0, 1};
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(x.grad()[i], expect[i]);
  x.set_requires_grad(false);
}

TEST(Tensor, BatchNormTrainingStats) {
  auto x = Tensor::from_data({2, 1, 1, 1}, {0, 4});
  Tensor gamma({1}, 1.0f), beta({1});
  Tensor rm({1}), rv({1}, 1.0f);
  auto y = batch_norm(x, gamma, beta, rm, rv, /*training=*/true);
  // mean 2, population var 4 -> xhat = +-2/sqrt(4+1e-5)
  const double xhat = 2.0 / std::sqrt(4.0 + 1e-5);
  EXPECT_NEAR(y.data()[0], -xhat, 1e-6);
  EXPECT_NEAR(y.data()[1], xhat, 1e-6);
  EXPECT_NEAR(rm.data()[0], 0.2, 1e-6);       // 0.9*0 + 0.1*2
  EXPECT_NEAR(rv.data()[0], 1.3, 1e-6);       // 0.9*1 + 0.1*4

  // eval mode applies the running stats without updating them
  auto ye = batch_norm(x, gamma, beta, rm, rv, /*training=*/false);
  EXPECT_NEAR(ye.data()[0], (0.0 - 0.2) / std::sqrt(1.3 + 1e-5), 1e-6);
  EXPECT_NEAR(rm.data()[0], 0.2, 1e-6);

  EXPECT_THROW(
      batch_norm(Tensor({1, 1, 1, 1}), gamma, beta, rm, rv, true),
      std::invalid_argument);
}

TEST(Tensor, LayerNormRowStatistics) {
  Rng rng(5);
  Tensor x({4, 8});
  fill_uniform(x, rng, -3.0, 3.0);
  Tensor gamma({8}, 1.0f), beta({8});
  auto y = layer_norm(x, gamma, beta);
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 8; ++c) m += y.data()[r * 8 + c];
    m /= 8;
    for (int c = 0; c < 8; ++c) {
      double d = y.data()[r * 8 + c] - m;
      v += d * d;
    }
    v /= 8;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
  // affine: gamma=2, beta=1 transforms elementwise
  Tensor g2({8}, 2.0f), b1({8}, 1.0f);
  auto y2 = layer_norm(x, g2, b1);
  for (int i = 0; i < 32; ++i)
    EXPECT_NEAR(y2.data()[i], 2.0f * y.data()[i] + 1.0f, 1e-5);
}

TEST(Tensor, ConcatSliceRoundTrip) {
  Rng rng(7);
  Tensor a({2, 2, 3, 3}), b({2, 3, 3, 3}), c({2, 1, 3, 3});
  fill_uniform(a, rng, -1.0, 1.0);
  fill_uniform(b, rng, -1.0, 1.0);
  fill_uniform(c, rng, -1.0, 1.0);
  auto z = concat_channels<float>({a, b, c});
  ASSERT_EQ(z.shape(), (Shape{2, 6, 3, 3}));
  auto ra = slice_channels(z, 0, 2);
  auto rb = slice_channels(z, 2, 5);
  auto rc = slice_channels(z, 5, 6);
  EXPECT_EQ(max_abs_diff(ra.data(), a.data()), 0.0);
  EXPECT_EQ(max_abs_diff(rb.data(), b.data()), 0.0);
  EXPECT_EQ(max_abs_diff(rc.data(), c.data()), 0.0);
  EXPECT_THROW(concat_channels<float>({a, Tensor({2, 3, 4, 3})}),
               std::invalid_argument);
}

TEST(Tensor, GatherForwardAndBackward) {
  auto x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  x.set_requires_grad();
  auto map = std::make_shared<std::vector<Dim>>(std::vector<Dim>{0, 3, 3});
  {
    TapeScope<float> scope;
    auto y = gather(x, map, {3});
    EXPECT_FLOAT_EQ(y.data()[0], 1);
    EXPECT_FLOAT_EQ(y.data()[1], 4);
    EXPECT_FLOAT_EQ(y.data()[2], 4);
    auto loss = sum(y);
    backward(loss);
  }
  const float expect[4] = {1, 0, 0, 2};  // duplicated index accumulates
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(x.grad()[i], expect[i]);
  x.set_requires_grad(false);
}

TEST(Tensor, BmmBothTransposeModes) {
  Rng rng(23);
  Tensor a({2, 3, 4}), bt({2, 5, 4}), bn({2, 4, 5});
  fill_uniform(a, rng, -1.0, 1.0);
  fill_uniform(bt, rng, -1.0, 1.0);
  fill_uniform(bn, rng, -1.0, 1.0);

  auto yt = bmm(a, bt, /*trans_b=*/true, 0.5f);
  ASSERT_EQ(yt.shape(), (Shape{2, 3, 5}));
  for (Dim n = 0; n < 2; ++n)
    for (Dim i = 0; i < 3; ++i)
      for (Dim j = 0; j < 5; ++j) {
        double acc = 0;
        for (Dim k = 0; k < 4; ++k)
          acc += static_cast<double>(a.data()[(n * 3 + i) * 4 + k]) *
                 bt.data()[(n * 5 + j) * 4 + k];
        EXPECT_NEAR(yt.data()[(n * 3 + i) * 5 + j], 0.5 * acc, 1e-5);
      }

  auto yn = bmm(a, bn);
  ASSERT_EQ(yn.shape(), (Shape{2, 3, 5}));
  for (Dim n = 0; n < 2; ++n)
    for (Dim i = 0; i < 3; ++i)
      for (Dim j = 0; j < 5; ++j) {
        double acc = 0;
        for (Dim k = 0; k < 4; ++k)
          acc += static_cast<double>(a.data()[(n * 3 + i) * 4 + k]) *
                 bn.data()[(n * 4 + k) * 5 + j];
        EXPECT_NEAR(yn.data()[(n * 3 + i) * 5 + j], acc, 1e-5);
      }
}

TEST(Tensor, AddBiasRowsGroupCycling) {
  auto x = Tensor({4, 2, 2});  // zeros; four batch slabs
  auto bias = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  auto y = add_bias_rows(x, bias);
  // slab g uses bias slab g % 2
  EXPECT_FLOAT_EQ(y.data()[0 * 4 + 0], 1);
  EXPECT_FLOAT_EQ(y.data()[1 * 4 + 0], 10);
  EXPECT_FLOAT_EQ(y.data()[2 * 4 + 3], 4);
  EXPECT_FLOAT_EQ(y.data()[3 * 4 + 3], 40);
}

TEST(Tensor, MulGateBroadcastAndBackward) {
  auto x = Tensor::from_data({1, 2, 1, 2}, {1, 2, 3, 4});
  auto g = Tensor::from_data({1, 1, 1, 2}, {0.5f, 2.0f});
  x.set_requires_grad();
  g.set_requires_grad();
  {
    TapeScope<float> scope;
    auto y = mul_gate(x, g);
    EXPECT_FLOAT_EQ(y.data()[0], 0.5f);
    EXPECT_FLOAT_EQ(y.data()[1], 4.0f);
    EXPECT_FLOAT_EQ(y.data()[2], 1.5f);
    EXPECT_FLOAT_EQ(y.data()[3], 8.0f);
    auto loss = sum(y);
    backward(loss);
  }
  // d/dgate sums over channels: [1+3, 2+4]
  EXPECT_FLOAT_EQ(g.grad()[0], 4.0f);
  EXPECT_FLOAT_EQ(g.grad()[1], 6.0f);
  EXPECT_FLOAT_EQ(x.grad()[0], 0.5f);
  EXPECT_FLOAT_EQ(x.grad()[3], 2.0f);
  x.set_requires_grad(false);
  g.set_requires_grad(false);
}

TEST(Tensor, GlobalAvgPool) {
  auto x = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  auto y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_FLOAT_EQ(y.data()[0], 2.5f);
  EXPECT_FLOAT_EQ(y.data()[1], 25.0f);
}

TEST(Tensor, DropoutContracts) {
  Rng rng(31);
  Tensor x({1, 1000}, 1.0f);
  auto y0 = dropout(x, 0.0, rng);
  EXPECT_EQ(max_abs_diff(y0.data(), x.data()), 0.0);

  Rng r1(9), r2(9);
  auto y1 = dropout(x, 0.5, r1);
  auto y2 = dropout(x, 0.5, r2);
  EXPECT_EQ(max_abs_diff(y1.data(), y2.data()), 0.0);  // same seed, same mask
  int kept = 0;
  for (float v : y1.data()) {
    EXPECT_TRUE(v == 0.0f || v == 2.0f);  // inverted scaling by 1/(1-rate)
    kept += v != 0.0f;
  }
  EXPECT_GT(kept, 400);
  EXPECT_LT(kept, 600);
  EXPECT_THROW(dropout(x, 1.0, rng), std::invalid_argument);
}

TEST(Tensor, CrossEntropyKnownValues) {
  auto logits = Tensor::from_data({1, 2}, {0, 0});
  auto l = cross_entropy_logits(logits, {0});
  EXPECT_NEAR(l.item(), std::log(2.0), 1e-6);

  // weighted: weight w on the true class scales the sample loss
  auto lw = cross_entropy_logits(logits, {0}, {2.0, 1.0});
  EXPECT_NEAR(lw.item(), 2.0 * std::log(2.0), 1e-6);

  // batch mean
  auto two = Tensor::from_data({2, 2}, {0, 0, 0, std::log(3.0f)});
  auto lb = cross_entropy_logits(two, {0, 1});
  const double row2 = -std::log(3.0 / 4.0);
  EXPECT_NEAR(lb.item(), 0.5 * (std::log(2.0) + row2), 1e-6);

  EXPECT_THROW(cross_entropy_logits(logits, {2}), std::invalid_argument);
  EXPECT_THROW(cross_entropy_logits(logits, {0, 1}), std::invalid_argument);
}

TEST(Tensor, BackwardQuadratic) {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  {
    TapeScope<float> scope;
    auto loss = sum(mul(x, x));
    backward(loss);
  }
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
  x.set_requires_grad(false);
}

TEST(Tensor, BackwardThroughSmallChain) {
  // loss = sum(relu(x W^T + b)) with one negative pre-activation
  auto x = Tensor::from_data({1, 2}, {1, -1});
  auto w = Tensor::from_data({2, 2}, {1, 0, 1, 1});
  auto b = Tensor::from_data({2}, {0.5f, -0.5f});
  w.set_requires_grad();
  b.set_requires_grad();
  {
    TapeScope<float> scope;
    auto y = relu(linear(x, w, b));  // pre = [1.5, -0.5] -> y = [1.5, 0]
    auto loss = sum(y);
    backward(loss);
  }
  // only row 0 of W receives gradient = x
  EXPECT_FLOAT_EQ(w.grad()[0], 1.0f);
  EXPECT_FLOAT_EQ(w.grad()[1], -1.0f);
  EXPECT_FLOAT_EQ(w.grad()[2], 0.0f);
  EXPECT_FLOAT_EQ(w.grad()[3], 0.0f);
  EXPECT_FLOAT_EQ(b.grad()[0], 1.0f);
  EXPECT_FLOAT_EQ(b.grad()[1], 0.0f);
  w.set_requires_grad(false);
  b.set_requires_grad(false);
}

TEST(Tensor, DetachBlocksGradientFlow) {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  {
    TapeScope<float> scope;
    auto d = x.detach();
    auto loss = sum(mul(d, d));
    backward(loss);
  }
  EXPECT_FALSE(x.has_grad());
  x.set_requires_grad(false);
}

TEST(Tensor, NoTapeMeansNoRecording) {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  auto y = mul(x, x);  // outside any TapeScope
  EXPECT_FALSE(y.has_grad());
  {
    TapeScope<float> scope;
    auto loss = sum(mul(x, x));
    EXPECT_EQ(loss.item(), 5.0f);
  }
  EXPECT_FALSE(x.has_grad());  // backward never ran
  x.set_requires_grad(false);
}

TEST(Tensor, RngDeterminism) {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.uniform(), b.uniform());
    EXPECT_EQ(a.normal(), b.normal());
    EXPECT_EQ(a.next_index(17), b.next_index(17));
  }
  Rng c(124);
  bool differs = false;
  Rng a2(123);
  for (int i = 0; i < 10; ++i) differs = differs || a2.uniform() != c.uniform();
  EXPECT_TRUE(differs);

  Rng s1(7), s2(7);
  Tensor t1({3, 3}), t2({3, 3});
  fill_uniform(t1, s1, -1.0, 1.0);
  fill_uniform(t2, s2, -1.0, 1.0);
  EXPECT_EQ(max_abs_diff(t1.data(), t2.data()), 0.0);
}
