#pragma once

// Central-difference gradient verification. Closures are evaluated in double
// precision; analytic tape gradients are compared against
// (f(x+h) - f(x-h)) / 2h elementwise with a relative-error criterion.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cers/backbone.hpp"
#include "cers/fusion.hpp"
#include "cers/streams.hpp"
#include "cers/tensor.hpp"

namespace cers {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_leaf;
  Dim worst_index = -1;
  size_t elements = 0;

  bool pass(double tol = 1e-4) const { return max_rel_err <= tol; }
};

using NamedLeaf = std::pair<std::string, Tensor64>;

// `fn` must return a scalar Tensor64 and be deterministic in the leaf values.
template <typename F>
GradCheckResult finite_diff_check(std::vector<NamedLeaf> leaves, F&& fn,
                                  double h = 1e-3) {
  for (auto& [name, t] : leaves) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    TapeScope<double> scope;
    Tensor64 loss = fn();
    if (loss.numel() != 1) fail("finite_diff_check: closure must return a scalar");
    backward(loss);
  }
  for (auto& [name, t] : leaves) {
    if (t.has_grad()) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    }
    t.zero_grad();
  }

  GradCheckResult res;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& t = leaves[li].second;
    auto vals = t.mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double f1 = fn().item();
      vals[i] = orig - h;
      const double f2 = fn().item();
      vals[i] = orig;
      const double num = (f1 - f2) / (2.0 * h);
      const double a = analytic[li][i];
      const double denom = std::max({std::abs(a), std::abs(num), 1e-6});
      const double rel = std::abs(a - num) / denom;
      ++res.elements;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_leaf = leaves[li].first;
        res.worst_index = static_cast<Dim>(i);
      }
    }
  }
  return res;
}

struct SuiteEntry {
  std::string name;
  GradCheckResult result;
};

namespace detail {

inline Tensor64 rand_t(Rng& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
  Tensor64 t(s);
  fill_uniform(t, rng, lo, hi);
  return t;
}

// Nudges values away from zero so relu/abs kinks sit outside the h-ball.
inline void margin(Tensor64& t, double eps = 0.05) {
  auto v = t.mut();
  for (auto& x : v)
    if (std::abs(x) < eps) x += (x >= 0 ? eps : -eps);
}

// Distinct, well-separated values so max-pool argmax is stable under +-h.
inline Tensor64 distinct_t(Rng& rng, const Shape& s) {
  Tensor64 t(s);
  std::vector<Dim> perm(static_cast<size_t>(t.numel()));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Dim>(i);
  rng.shuffle(perm);
  auto v = t.mut();
  for (size_t i = 0; i < v.size(); ++i) v[i] = 0.02 * static_cast<double>(perm[i]) - 0.3;
  return t;
}

inline std::vector<NamedLeaf> store_leaves(ParameterStore<double>& store) {
  std::vector<NamedLeaf> out;
  for (auto& e : store.entries())
    if (e.trainable) out.push_back({e.name, e.tensor});
  return out;
}

}  // namespace detail

// Shared by the gradcheck CLI command and the test suite: one entry per op or
// block, each checked against central differences on freshly seeded inputs.
inline std::vector<SuiteEntry> run_standard_gradient_suite(std::uint32_t seed = 42) {
  using detail::distinct_t;
  using detail::margin;
  using detail::rand_t;
  using detail::store_leaves;

  Rng rng(seed);
  std::vector<SuiteEntry> out;
  auto run = [&](const std::string& name, std::vector<NamedLeaf> leaves,
                 std::function<Tensor64()> fn) {
    out.push_back({name, finite_diff_check(std::move(leaves), fn)});
  };
  auto dot_loss = [](const Tensor64& y, const Tensor64& c) { return sum(mul(y, c)); };

  {
    auto x = rand_t(rng, {2, 3, 6, 6});
    auto w = rand_t(rng, {4, 3, 3, 3}, -0.5, 0.5);
    auto b = rand_t(rng, {4});
    auto c = rand_t(rng, {2, 4, 3, 3});
    run("conv2d", {{"x", x}, {"w", w}, {"b", b}},
        [=] { return dot_loss(conv2d(x, w, b, 2, 1), c); });
  }
  {
    auto x = rand_t(rng, {1, 4, 5, 5});
    auto w = rand_t(rng, {6, 2, 3, 3}, -0.5, 0.5);
    auto c = rand_t(rng, {1, 6, 5, 5});
    run("conv2d_grouped", {{"x", x}, {"w", w}},
        [=] { return dot_loss(conv2d(x, w, {}, 1, 1, 2), c); });
  }
  {
    auto x = rand_t(rng, {2, 3, 5, 5});
    auto w = rand_t(rng, {3, 1, 3, 3}, -0.5, 0.5);
    auto b = rand_t(rng, {3});
    auto c = rand_t(rng, {2, 3, 5, 5});
    run("conv2d_depthwise", {{"x", x}, {"w", w}, {"b", b}},
        [=] { return dot_loss(conv2d(x, w, b, 1, 1, 3), c); });
  }
  {
    auto x = rand_t(rng, {2, 3, 7});
    auto w = rand_t(rng, {5, 7}, -0.5, 0.5);
    auto b = rand_t(rng, {5});
    auto c = rand_t(rng, {2, 3, 5});
    run("linear", {{"x", x}, {"w", w}, {"b", b}},
        [=] { return dot_loss(linear(x, w, b), c); });
  }
  {
    auto x = rand_t(rng, {2, 2, 5, 5});
    auto c = rand_t(rng, {2, 2, 3, 3});
    run("pool_avg", {{"x", x}},
        [=] { return dot_loss(pool2d(x, PoolMode::kAvg, 3, 2, 1), c); });
  }
  {
    auto x = distinct_t(rng, {1, 2, 6, 6});
    auto c = rand_t(rng, {1, 2, 3, 3});
    run("pool_max", {{"x", x}},
        [=] { return dot_loss(pool2d(x, PoolMode::kMax, 2, 2, 0), c); });
  }
  {
    auto x = distinct_t(rng, {1, 2, 5, 5});
    auto c = rand_t(rng, {1, 2, 3, 3});
    run("pool_max_padded", {{"x", x}},
        [=] { return dot_loss(pool2d(x, PoolMode::kMax, 3, 2, 1), c); });
  }
  {
    auto x = rand_t(rng, {3, 8});
    margin(x);
    auto c = rand_t(rng, {3, 8});
    run("relu", {{"x", x}}, [=] { return dot_loss(relu(x), c); });
  }
  {
    auto x = rand_t(rng, {3, 8}, -2.0, 2.0);
    auto c = rand_t(rng, {3, 8});
    run("gelu", {{"x", x}}, [=] { return dot_loss(gelu(x), c); });
  }
  {
    auto x = rand_t(rng, {3, 8}, -2.0, 2.0);
    auto c = rand_t(rng, {3, 8});
    run("sigmoid", {{"x", x}}, [=] { return dot_loss(sigmoid(x), c); });
  }
  {
    auto x = rand_t(rng, {3, 5}, -2.0, 2.0);
    auto c = rand_t(rng, {3, 5});
    run("softmax", {{"x", x}}, [=] { return dot_loss(softmax(x, 1), c); });
  }
  {
    auto a = rand_t(rng, {2, 3, 4});
    auto b = rand_t(rng, {2, 4, 5});
    auto c = rand_t(rng, {2, 3, 5});
    run("bmm", {{"a", a}, {"b", b}}, [=] { return dot_loss(bmm(a, b), c); });
  }
  {
    auto a = rand_t(rng, {2, 3, 4});
    auto b = rand_t(rng, {2, 5, 4});
    auto c = rand_t(rng, {2, 3, 5});
    run("bmm_trans", {{"a", a}, {"b", b}},
        [=] { return dot_loss(bmm(a, b, true, 0.5), c); });
  }
  {
    auto x = rand_t(rng, {2, 3, 6});
    auto g = rand_t(rng, {6}, 0.5, 1.5);
    auto b = rand_t(rng, {6});
    auto c = rand_t(rng, {2, 3, 6});
    run("layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}},
        [=] { return dot_loss(layer_norm(x, g, b), c); });
  }
  {
    auto x = rand_t(rng, {4, 3, 2, 2});
    auto g = rand_t(rng, {3}, 0.5, 1.5);
    auto b = rand_t(rng, {3});
    auto c = rand_t(rng, {4, 3, 2, 2});
    Tensor64 rm({3}), rv({3});
    run("batch_norm_train", {{"x", x}, {"gamma", g}, {"beta", b}}, [=]() mutable {
      return dot_loss(batch_norm(x, g, b, rm, rv, true), c);
    });
  }
  {
    auto x = rand_t(rng, {4, 3, 2, 2});
    auto g = rand_t(rng, {3}, 0.5, 1.5);
    auto b = rand_t(rng, {3});
    auto c = rand_t(rng, {4, 3, 2, 2});
    auto rm = rand_t(rng, {3}, -0.5, 0.5);
    auto rv = rand_t(rng, {3}, 0.5, 1.5);
    run("batch_norm_eval", {{"x", x}, {"gamma", g}, {"beta", b}}, [=]() mutable {
      return dot_loss(batch_norm(x, g, b, rm, rv, false), c);
    });
  }
  {
    auto x = rand_t(rng, {5, 4}, -2.0, 2.0);
    std::vector<int> labels{0, 2, 1, 3, 2};
    std::vector<double> w{1.0, 2.0, 0.5, 1.0};
    run("cross_entropy", {{"logits", x}},
        [=] { return cross_entropy_logits(x, labels, w); });
  }
  {
    ParameterStore<double> store;
    Rng wr(seed + 1);
    auto lpu = Lpu<double>::make(store, wr, "lpu", 3);
    auto x = rand_t(rng, {2, 3, 4, 4});
    auto c = rand_t(rng, {2, 3, 4, 4});
    auto leaves = store_leaves(store);
    leaves.push_back({"x", x});
    run("lpu", leaves, [=] { return dot_loss(lpu.forward(x), c); });
  }
  {
    ParameterStore<double> store;
    Rng wr(seed + 2);
    auto attn = Lcmhsa<double>::make(store, wr, "attn", 4, 2, 2, 2);
    fill_uniform(attn.bias_table, rng, -0.3, 0.3);
    auto x = rand_t(rng, {1, 16, 4});
    auto c = rand_t(rng, {1, 16, 4});
    auto leaves = store_leaves(store);
    leaves.push_back({"x", x});
    run("lcmhsa", leaves, [=] { return dot_loss(attn.forward(x, 4, 4), c); });
  }
  {
    ParameterStore<double> store;
    Rng wr(seed + 3);
    auto ffn = RrFfn<double>::make(store, wr, "ffn", 3, 2);
    auto x = rand_t(rng, {1, 9, 3});
    auto c = rand_t(rng, {1, 9, 3});
    auto leaves = store_leaves(store);
    leaves.push_back({"x", x});
    run("rrffn", leaves, [=] { return dot_loss(ffn.forward(x, 3, 3), c); });
  }
  {
    ParameterStore<double> store;
    Rng wr(seed + 4);
    auto blk = CitBlock<double>::make(store, wr, "cit", 4, 2, 2, 2, 2);
    fill_uniform(blk.attn.bias_table, rng, -0.3, 0.3);
    auto x = rand_t(rng, {1, 4, 4, 4});
    auto c = rand_t(rng, {1, 4, 4, 4});
    auto leaves = store_leaves(store);
    leaves.push_back({"x", x});
    run("cit_block", leaves, [=] { return dot_loss(blk.forward(x), c); });
  }
  {
    // Blocks with internal relu need pre-activations clear of the kink, or
    // the +-h central difference straddles it; retry the fixture seed until
    // the margin is comfortable.
    for (std::uint32_t attempt = 0;; ++attempt) {
      ParameterStore<double> store;
      Rng wr(seed + 5 + attempt * 1000);
      auto blk = ResidualBlock<double>::make(store, wr, "res", 'K', 3, 4, 2);
      auto x = rand_t(rng, {2, 3, 6, 6});
      auto c = rand_t(rng, {2, 4, 3, 3});
      auto r1 = blk.c1.forward(x);
      auto pre = add(blk.c2.forward(relu(r1)), blk.proj.forward(x));
      double m = 1e9;
      for (double v : r1.data()) m = std::min(m, std::abs(v));
      for (double v : pre.data()) m = std::min(m, std::abs(v));
      if (m < 0.02 && attempt < 50) continue;
      auto leaves = store_leaves(store);
      leaves.push_back({"x", x});
      run("residual_block", leaves, [=] { return dot_loss(blk.forward(x), c); });
      break;
    }
  }
  {
    for (std::uint32_t attempt = 0;; ++attempt) {
      ParameterStore<double> store;
      Rng wr(seed + 6 + attempt * 1000);
      auto sa = SpatialAttention<double>::make(store, wr, "sa", 3);
      auto x = rand_t(rng, {2, 3, 4, 4});
      auto c = rand_t(rng, {2, 3, 4, 4});
      auto pre = add(sa.direct.forward(x), sa.context.forward(sa.context_dw.forward(x)));
      double m = 1e9;
      for (double v : pre.data()) m = std::min(m, std::abs(v));
      if (m < 0.02 && attempt < 50) continue;
      // Keep the sigmoid gate away from saturation: a saturated gate has a
      // tiny first derivative, which inflates the relative truncation error
      // of the central difference.
      auto g = sa.gate.forward(relu(pre));
      double gm = 0;
      for (double v : g.data()) gm = std::max(gm, std::abs(v));
      if (gm > 1.5) {
        const double s = 1.5 / gm;
        for (auto& v : sa.gate.w.mut()) v *= s;
        for (auto& v : sa.gate.b.mut()) v *= s;
      }
      auto leaves = store_leaves(store);
      leaves.push_back({"x", x});
      run("spatial_attention", leaves, [=] { return dot_loss(sa.forward(x), c); });
      break;
    }
  }
  {
    ParameterStore<double> store;
    Rng wr(seed + 7);
    auto head = ClassifierHead<double>::make(store, wr, "head", 5, 3, 0.0);
    auto x = rand_t(rng, {2, 5, 3, 3});
    std::vector<int> labels{1, 2};
    auto leaves = store_leaves(store);
    leaves.push_back({"x", x});
    run("classifier_head", leaves, [=] {
      auto o = head.forward(x, false, nullptr);
      return cross_entropy_logits(o.logits, labels);
    });
  }
  return out;
}

}  // namespace cers
