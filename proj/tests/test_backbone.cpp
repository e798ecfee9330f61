// Backbone contracts: token/map reshapes, stage geometry, windowed-attention
// row normalization and relative-position bias wiring, and the zero-weight
// identity properties of the CIT block and its feed-forward.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cers/backbone.hpp"

using namespace cers;

namespace {

void zero_tensor(Tensor& t) {
  auto s = t.mut();
  std::fill(s.begin(), s.end(), 0.0f);
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST(Backbone, TokenMapRoundTrip) {
  auto m = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto tok = map_to_tokens(m);
  ASSERT_EQ(tok.shape(), (Shape{1, 4, 2}));
  // token t holds (channel0[t], channel1[t]) in row-major grid order
  const float expect[8] = {1, 5, 2, 6, 3, 7, 4, 8};
  for (int i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(tok.data()[i], expect[i]);

  auto back = tokens_to_map(tok, 2, 2);
  ASSERT_EQ(back.shape(), m.shape());
  EXPECT_EQ(max_abs_diff(back.data(), m.data()), 0.0);

  EXPECT_THROW(tokens_to_map(tok, 2, 3), std::invalid_argument);
  EXPECT_THROW(map_to_tokens(Tensor({2, 3})), std::invalid_argument);
}

TEST(Backbone, TokenRoundTripCarriesGradient) {
  Rng rng(3);
  Tensor m({2, 3, 4, 4});
  fill_uniform(m, rng, -1.0, 1.0);
  m.set_requires_grad();
  {
    TapeScope<float> scope;
    auto loss = sum(mul(map_to_tokens(m), map_to_tokens(m)));
    backward(loss);
  }
  ASSERT_TRUE(m.has_grad());
  for (Dim i = 0; i < m.numel(); ++i)
    EXPECT_NEAR(m.grad()[i], 2.0f * m.data()[i], 1e-5);
  m.set_requires_grad(false);
}

TEST(Backbone, StemAndStageGeometry) {
  ParameterStore<float> store;
  Rng rng(1);
  auto bb = Backbone<float>::make(store, rng, 1, {8, 8, 8, 8}, {1, 1, 1, 1},
                                  {1, 1, 2, 2}, 4, 2, 2);
  Tensor x({2, 1, 64, 64});
  fill_uniform(x, rng, 0.0, 1.0);
  auto out = bb.forward(x, /*training=*/false);
  ASSERT_EQ(out.stem_out.shape(), (Shape{2, 8, 32, 32}));
  ASSERT_EQ(out.stage_maps.size(), 4u);
  EXPECT_EQ(out.stage_maps[0].shape(), (Shape{2, 8, 16, 16}));
  EXPECT_EQ(out.stage_maps[1].shape(), (Shape{2, 8, 8, 8}));
  EXPECT_EQ(out.stage_maps[2].shape(), (Shape{2, 8, 4, 4}));
  EXPECT_EQ(out.stage_maps[3].shape(), (Shape{2, 8, 2, 2}));
}

TEST(Backbone, AttentionRowsSumToOne) {
  ParameterStore<float> store;
  Rng rng(5);
  auto attn = Lcmhsa<float>::make(store, rng, "a", 8, 2, 4, 2);
  Tensor tok({2, 8 * 8, 8});
  fill_uniform(tok, rng, -1.0, 1.0);
  Tensor probs;
  auto y = attn.forward(tok, 8, 8, &probs);
  ASSERT_EQ(y.shape(), tok.shape());
  ASSERT_EQ(probs.rank(), 3);
  const Dim rows = probs.dim(0) * probs.dim(1), m2 = probs.dim(2);
  for (Dim r = 0; r < rows; ++r) {
    double acc = 0;
    for (Dim c = 0; c < m2; ++c) acc += probs.data()[r * m2 + c];
    EXPECT_NEAR(acc, 1.0, 1e-6);
  }
}

TEST(Backbone, AttentionWindowShrinksToGrid) {
  ParameterStore<float> store;
  Rng rng(6);
  auto attn = Lcmhsa<float>::make(store, rng, "a", 4, 1, 4, 2);
  Tensor tok({1, 2 * 2, 4});  // grid 2x2 smaller than window 4
  fill_uniform(tok, rng, -1.0, 1.0);
  Tensor probs;
  auto y = attn.forward(tok, 2, 2, &probs);
  EXPECT_EQ(y.shape(), tok.shape());
  // effective window 2, kv_stride 2 folds to one key -> single column
  EXPECT_EQ(probs.dim(2), 1);
  for (Dim i = 0; i < probs.numel(); ++i) EXPECT_NEAR(probs.data()[i], 1.0, 1e-6);

  Tensor bad({1, 6 * 6, 4});
  EXPECT_THROW(attn.forward(bad, 6, 6), std::invalid_argument);  // 6 % 4 != 0
}

TEST(Backbone, AttentionUniformWhenQueriesAndBiasZero) {
  ParameterStore<float> store;
  Rng rng(7);
  auto attn = Lcmhsa<float>::make(store, rng, "a", 4, 1, 2, 1);
  zero_tensor(attn.wq.w);
  zero_tensor(attn.wk.w);
  Tensor tok({1, 4, 4});
  fill_uniform(tok, rng, -1.0, 1.0);
  Tensor probs;
  attn.forward(tok, 2, 2, &probs);
  // logits are all zero -> every row uniform over the folded keys
  const Dim m2 = probs.dim(2);
  ASSERT_EQ(m2, 4);
  for (Dim i = 0; i < probs.numel(); ++i)
    EXPECT_NEAR(probs.data()[i], 1.0 / m2, 1e-6);
}

TEST(Backbone, RelativePositionBiasSelectsByOffset) {
  ParameterStore<float> store;
  Rng rng(8);
  auto attn = Lcmhsa<float>::make(store, rng, "a", 4, 1, 2, 1);
  zero_tensor(attn.wq.w);
  zero_tensor(attn.wk.w);
  // window 2, stride 1: span 3, table row has 9 offsets. Boost offset
  // (dy,dx) = (1,1), i.e. key at the same grid cell as the query.
  attn.bias_table.mut()[1 * 3 + 1] = 20.0f;
  Tensor tok({1, 4, 4});
  fill_uniform(tok, rng, -1.0, 1.0);
  Tensor probs;
  attn.forward(tok, 2, 2, &probs);
  ASSERT_EQ(probs.shape(), (Shape{1, 4, 4}));
  // each query should lock onto the co-located key
  for (Dim q = 0; q < 4; ++q)
    for (Dim k = 0; k < 4; ++k) {
      const float p = probs.data()[q * 4 + k];
      if (q == k)
        EXPECT_GT(p, 0.999f);
      else
        EXPECT_LT(p, 1e-3f);
    }
}

TEST(Backbone, AttentionInvalidConfigsRejected) {
  ParameterStore<float> store;
  Rng rng(9);
  EXPECT_THROW(Lcmhsa<float>::make(store, rng, "x", 6, 4, 4, 2),
               std::invalid_argument);  // 6 % 4 != 0
  EXPECT_THROW(Lcmhsa<float>::make(store, rng, "y", 4, 1, 0, 1),
               std::invalid_argument);
}

TEST(Backbone, ZeroedCitBlockIsIdentity) {
  ParameterStore<float> store;
  Rng rng(11);
  auto blk = CitBlock<float>::make(store, rng, "cit", 6, 2, 4, 2, 2);
  // Zero every branch that feeds a residual add: the block must pass its
  // input through untouched.
  zero_tensor(blk.lpu.dw.w);
  zero_tensor(blk.attn.wo.w);
  zero_tensor(blk.ffn.project.w);

  Tensor m({2, 6, 8, 8});
  fill_uniform(m, rng, -1.0, 1.0);
  auto y = blk.forward(m);
  ASSERT_EQ(y.shape(), m.shape());
  EXPECT_LE(max_abs_diff(y.data(), m.data()), 1e-6);
}

TEST(Backbone, FfnInnerSkipIsIdentityWhenKernelZero) {
  ParameterStore<float> store;
  Rng rng(13);
  auto ffn = RrFfn<float>::make(store, rng, "ffn", 4, 2);
  zero_tensor(ffn.dw.w);

  Tensor tok({1, 16, 4});
  fill_uniform(tok, rng, -1.0, 1.0);
  auto y = ffn.forward(tok, 4, 4);

  // with the depthwise kernel zeroed the inner stage reduces to its skip,
  // so the block equals project(gelu(expand(tok)))
  auto expect = ffn.project.forward(gelu(ffn.expand.forward(tok)));
  ASSERT_EQ(y.shape(), expect.shape());
  EXPECT_LE(max_abs_diff(y.data(), expect.data()), 1e-6);
}

TEST(Backbone, LpuIsResidualDepthwise) {
  ParameterStore<float> store;
  Rng rng(17);
  auto lpu = Lpu<float>::make(store, rng, "lpu", 3);
  Tensor m({1, 3, 5, 5});
  fill_uniform(m, rng, -1.0, 1.0);
  auto y = lpu.forward(m);
  auto expect = add(lpu.dw.forward(m), m);
  EXPECT_EQ(max_abs_diff(y.data(), expect.data()), 0.0);

  zero_tensor(lpu.dw.w);
  auto id = lpu.forward(m);
  EXPECT_EQ(max_abs_diff(id.data(), m.data()), 0.0);
}

TEST(Backbone, AttentionProbeCollectsPerBlock) {
  ParameterStore<float> store;
  Rng rng(19);
  auto bb = Backbone<float>::make(store, rng, 1, {4, 4, 8, 8}, {1, 2, 1, 1},
                                  {1, 1, 2, 2}, 4, 2, 2);
  Tensor x({1, 1, 32, 32});
  fill_uniform(x, rng, 0.0, 1.0);
  std::vector<Tensor> probe;
  bb.forward(x, false, &probe);
  EXPECT_EQ(probe.size(), 5u);  // depths 1+2+1+1
  for (const auto& p : probe) {
    ASSERT_EQ(p.rank(), 3);
    const Dim rows = p.dim(0) * p.dim(1), m2 = p.dim(2);
    for (Dim r = 0; r < rows; ++r) {
      double acc = 0;
      for (Dim c = 0; c < m2; ++c) acc += p.data()[r * m2 + c];
      EXPECT_NEAR(acc, 1.0, 1e-6);
    }
  }
}

TEST(Backbone, ForwardIsDeterministic) {
  auto run = [](std::vector<float>& out) {
    ParameterStore<float> store;
    Rng rng(23);
    auto bb = Backbone<float>::make(store, rng, 1, {4, 4, 4, 4}, {1, 1, 1, 1},
                                    {1, 1, 1, 1}, 4, 2, 2);
    Rng drng(29);
    Tensor x({1, 1, 32, 32});
    fill_uniform(x, drng, 0.0, 1.0);
    auto o = bb.forward(x, false);
    out.assign(o.stage_maps[3].data().begin(), o.stage_maps[3].data().end());
  };
  std::vector<float> a, b;
  run(a);
  run(b);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << "index " << i;
}
