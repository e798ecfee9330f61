#pragma once

// SBCIT backbone: convolutional stem, four stages of patch embedding +
// CIT blocks (local perception unit, windowed low-complexity multi-head
// self-attention, recursive-residual feed-forward), each stage closed by a
// stride-blocking pool/conv pair. Tokens are row-major flattened maps.

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "cers/layers.hpp"
#include "cers/tensor.hpp"

namespace cers {

// ---- token/map reshapes (as gathers so gradients flow) --------------------

template <typename T>
TensorT<T> map_to_tokens(const TensorT<T>& m) {
  if (m.rank() != 4) fail("map_to_tokens: expected NCHW, got " + shape_str(m.shape()));
  const Dim n = m.dim(0), d = m.dim(1), h = m.dim(2), w = m.dim(3), t = h * w;
  auto idx = std::make_shared<std::vector<Dim>>(static_cast<size_t>(n * t * d));
  for (Dim ni = 0; ni < n; ++ni)
    for (Dim ti = 0; ti < t; ++ti)
      for (Dim di = 0; di < d; ++di)
        (*idx)[static_cast<size_t>((ni * t + ti) * d + di)] = (ni * d + di) * t + ti;
  return gather(m, idx, {n, t, d});
}

template <typename T>
TensorT<T> tokens_to_map(const TensorT<T>& tok, Dim h, Dim w) {
  if (tok.rank() != 3) fail("tokens_to_map: expected [N,T,D], got " + shape_str(tok.shape()));
  const Dim n = tok.dim(0), t = tok.dim(1), d = tok.dim(2);
  if (t != h * w)
    fail("tokens_to_map: token count " + std::to_string(t) + " does not match grid " +
         std::to_string(h) + "x" + std::to_string(w));
  auto idx = std::make_shared<std::vector<Dim>>(static_cast<size_t>(n * t * d));
  for (Dim ni = 0; ni < n; ++ni)
    for (Dim di = 0; di < d; ++di)
      for (Dim ti = 0; ti < t; ++ti)
        (*idx)[static_cast<size_t>((ni * d + di) * t + ti)] = (ni * t + ti) * d + di;
  return gather(tok, idx, {n, d, h, w});
}

// ---- stem ------------------------------------------------------------------

template <typename T>
struct Stem {
  Conv2dLayer<T> c1, c2, c3;
  BatchNormLayer<T> b1, b2, b3;

  static Stem make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                   Dim cin, Dim cout) {
    Stem s;
    s.c1 = Conv2dLayer<T>::make(store, rng, name + ".conv1", cin, cout, 3, 2, 1);
    s.b1 = BatchNormLayer<T>::make(store, name + ".bn1", cout);
    s.c2 = Conv2dLayer<T>::make(store, rng, name + ".conv2", cout, cout, 3, 1, 1);
    s.b2 = BatchNormLayer<T>::make(store, name + ".bn2", cout);
    s.c3 = Conv2dLayer<T>::make(store, rng, name + ".conv3", cout, cout, 3, 1, 1);
    s.b3 = BatchNormLayer<T>::make(store, name + ".bn3", cout);
    return s;
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) const {
    auto h = relu(b1.forward(c1.forward(x), training));
    h = relu(b2.forward(c2.forward(h), training));
    return relu(b3.forward(c3.forward(h), training));
  }
};

// ---- local perception unit -------------------------------------------------

template <typename T>
struct Lpu {
  Conv2dLayer<T> dw;

  static Lpu make(ParameterStore<T>& store, Rng& rng, const std::string& name, Dim d) {
    Lpu l;
    l.dw = Conv2dLayer<T>::make(store, rng, name + ".dw", d, d, 3, 1, 1, d);
    return l;
  }

  TensorT<T> forward(const TensorT<T>& map) const { return add(dw.forward(map), map); }

  TensorT<T> forward_tokens(const TensorT<T>& tok, Dim gh, Dim gw) const {
    return map_to_tokens(forward(tokens_to_map(tok, gh, gw)));
  }
};

// ---- windowed multi-head self-attention -------------------------------------

template <typename T>
struct Lcmhsa {
  LinearLayer<T> wq, wk, wv, wo;
  Conv2dLayer<T> dwk, dwv;
  TensorT<T> bias_table;  // [heads, (2*window-1)^2], zero-initialized
  Dim dim = 0, heads = 1, window = 1, kv_stride = 1;

  static Lcmhsa make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                     Dim d, Dim heads, Dim window, Dim kv_stride) {
    if (heads < 1 || d % heads != 0)
      fail("lcmhsa " + name + ": dim " + std::to_string(d) +
           " not divisible by heads " + std::to_string(heads));
    if (window < 1 || kv_stride < 1) fail("lcmhsa " + name + ": window and kv_stride must be >= 1");
    Lcmhsa a;
    a.dim = d;
    a.heads = heads;
    a.window = window;
    a.kv_stride = kv_stride;
    a.wq = LinearLayer<T>::make(store, rng, name + ".wq", d, d);
    a.wk = LinearLayer<T>::make(store, rng, name + ".wk", d, d);
    a.wv = LinearLayer<T>::make(store, rng, name + ".wv", d, d);
    a.wo = LinearLayer<T>::make(store, rng, name + ".wo", d, d);
    a.dwk = Conv2dLayer<T>::make(store, rng, name + ".dwk", d, d, 3, kv_stride, 1, d);
    a.dwv = Conv2dLayer<T>::make(store, rng, name + ".dwv", d, d, 3, kv_stride, 1, d);
    const Dim span = 2 * window - 1;
    a.bias_table = store.add(name + ".bias_table", TensorT<T>({heads, span * span}));
    return a;
  }

  TensorT<T> forward(const TensorT<T>& tok, Dim gh, Dim gw,
                     TensorT<T>* attn_out = nullptr) const {
    if (tok.rank() != 3) fail("lcmhsa: expected [N,T,D], got " + shape_str(tok.shape()));
    const Dim n = tok.dim(0), t = tok.dim(1), d = tok.dim(2);
    if (t != gh * gw)
      fail("lcmhsa: token count " + std::to_string(t) + " does not match grid " +
           std::to_string(gh) + "x" + std::to_string(gw));
    if (d != dim) fail("lcmhsa: channel dim mismatch");

    // Effective window shrinks to the grid when the grid is smaller.
    const Dim weh = std::min(window, gh), wew = std::min(window, gw);
    if (gh % weh != 0 || gw % wew != 0)
      fail("lcmhsa: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
           " not divisible by window " + std::to_string(weh) + "x" + std::to_string(wew));
    const Dim nwh = gh / weh, nww = gw / wew;
    const Dim gh2 = (gh + 2 - 3) / kv_stride + 1, gw2 = (gw + 2 - 3) / kv_stride + 1;
    const Dim mh = std::max<Dim>(1, weh / kv_stride), mw = std::max<Dim>(1, wew / kv_stride);
    if (nwh * mh != gh2 || nww * mw != gw2)
      fail("lcmhsa: folded k/v grid " + std::to_string(gh2) + "x" + std::to_string(gw2) +
           " does not tile into " + std::to_string(nwh) + "x" + std::to_string(nww) +
           " windows of " + std::to_string(mh) + "x" + std::to_string(mw));

    const Dim dh = d / heads;
    const Dim we2 = weh * wew, m2 = mh * mw, nw = nwh * nww, bp = n * nw * heads;

    auto q = wq.forward(tok);
    auto k = wk.forward(tok);
    auto v = wv.forward(tok);
    auto k2 = dwk.forward(tokens_to_map(k, gh, gw));  // [N, D, gh2, gw2]
    auto v2 = dwv.forward(tokens_to_map(v, gh, gw));

    // Window + head partition of queries: [N,T,D] -> [bp, we2, dh].
    auto qidx = std::make_shared<std::vector<Dim>>(static_cast<size_t>(bp * we2 * dh));
    // Matching partition of the folded k/v maps: [N,D,gh2,gw2] -> [bp, m2, dh].
    auto kvidx = std::make_shared<std::vector<Dim>>(static_cast<size_t>(bp * m2 * dh));
    // Inverse of the query partition: [bp, we2, dh] -> [N,T,D].
    auto backidx = std::make_shared<std::vector<Dim>>(static_cast<size_t>(n * t * d));
    for (Dim ni = 0; ni < n; ++ni)
      for (Dim wy = 0; wy < nwh; ++wy)
        for (Dim wx = 0; wx < nww; ++wx)
          for (Dim h = 0; h < heads; ++h) {
            const Dim b = ((ni * nwh + wy) * nww + wx) * heads + h;
            for (Dim ty = 0; ty < weh; ++ty)
              for (Dim tx = 0; tx < wew; ++tx) {
                const Dim gt = (wy * weh + ty) * gw + (wx * wew + tx);
                const Dim tl = ty * wew + tx;
                for (Dim c = 0; c < dh; ++c) {
                  const Dim src = (ni * t + gt) * d + (h * dh + c);
                  const Dim dst = (b * we2 + tl) * dh + c;
                  (*qidx)[static_cast<size_t>(dst)] = src;
                  (*backidx)[static_cast<size_t>(src)] = dst;
                }
              }
            for (Dim my = 0; my < mh; ++my)
              for (Dim mx = 0; mx < mw; ++mx) {
                const Dim gy = wy * mh + my, gx = wx * mw + mx;
                const Dim ml = my * mw + mx;
                for (Dim c = 0; c < dh; ++c)
                  (*kvidx)[static_cast<size_t>((b * m2 + ml) * dh + c)] =
                      ((ni * d + h * dh + c) * gh2 + gy) * gw2 + gx;
              }
          }

    auto qw = gather(q, qidx, {bp, we2, dh});
    auto kw = gather(k2, kvidx, {bp, m2, dh});
    auto vw = gather(v2, kvidx, {bp, m2, dh});

    auto logits = bmm(qw, kw, /*trans_b=*/true, T(1) / std::sqrt(static_cast<T>(dh)));

    // Relative-position bias rows: one [we2, m2] slab per head, shared across
    // batch and windows. Offsets are measured in query-grid units.
    const Dim span = 2 * window - 1;
    auto bidx = std::make_shared<std::vector<Dim>>(static_cast<size_t>(heads * we2 * m2));
    for (Dim h = 0; h < heads; ++h)
      for (Dim ty = 0; ty < weh; ++ty)
        for (Dim tx = 0; tx < wew; ++tx)
          for (Dim my = 0; my < mh; ++my)
            for (Dim mx = 0; mx < mw; ++mx) {
              const Dim dy = ty - my * kv_stride + window - 1;
              const Dim dx = tx - mx * kv_stride + window - 1;
              (*bidx)[static_cast<size_t>(
                  (h * we2 + ty * wew + tx) * m2 + my * mw + mx)] =
                  h * span * span + dy * span + dx;
            }
    auto bias = gather(bias_table, bidx, {heads, we2, m2});
    logits = add_bias_rows(logits, bias);

    auto probs = softmax(logits, 2);
    if (attn_out) *attn_out = probs.detach();

    auto ctx = bmm(probs, vw);                    // [bp, we2, dh]
    auto merged = gather(ctx, backidx, {n, t, d});
    return wo.forward(merged);
  }
};

// ---- recursive-residual feed-forward ----------------------------------------

template <typename T>
struct RrFfn {
  LinearLayer<T> expand, project;
  Conv2dLayer<T> dw;
  Dim hidden = 0;

  static RrFfn make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                    Dim d, Dim expansion) {
    if (expansion < 1) fail("rrffn " + name + ": expansion must be >= 1");
    RrFfn f;
    f.hidden = d * expansion;
    f.expand = LinearLayer<T>::make(store, rng, name + ".expand", d, f.hidden);
    f.dw = Conv2dLayer<T>::make(store, rng, name + ".dw", f.hidden, f.hidden, 3, 1, 1, f.hidden);
    f.project = LinearLayer<T>::make(store, rng, name + ".project", f.hidden, d);
    return f;
  }

  TensorT<T> forward(const TensorT<T>& tok, Dim gh, Dim gw) const {
    auto h = gelu(expand.forward(tok));
    auto m = tokens_to_map(h, gh, gw);
    auto f = add(dw.forward(m), m);  // depthwise refinement with inner skip
    return project.forward(map_to_tokens(f));
  }
};

// ---- CIT block ---------------------------------------------------------------

template <typename T>
struct CitBlock {
  Lpu<T> lpu;
  LayerNormLayer<T> ln1, ln2;
  Lcmhsa<T> attn;
  RrFfn<T> ffn;

  static CitBlock make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                       Dim d, Dim heads, Dim window, Dim kv_stride, Dim expansion) {
    CitBlock b;
    b.lpu = Lpu<T>::make(store, rng, name + ".lpu", d);
    b.ln1 = LayerNormLayer<T>::make(store, name + ".ln1", d);
    b.attn = Lcmhsa<T>::make(store, rng, name + ".attn", d, heads, window, kv_stride);
    b.ln2 = LayerNormLayer<T>::make(store, name + ".ln2", d);
    b.ffn = RrFfn<T>::make(store, rng, name + ".ffn", d, expansion);
    return b;
  }

  TensorT<T> forward(const TensorT<T>& map, std::vector<TensorT<T>>* attn_probe = nullptr) const {
    const Dim gh = map.dim(2), gw = map.dim(3);
    auto x = lpu.forward(map);
    auto tok = map_to_tokens(x);
    TensorT<T> probs;
    auto y = add(tok, attn.forward(ln1.forward(tok), gh, gw, attn_probe ? &probs : nullptr));
    if (attn_probe) attn_probe->push_back(probs);
    auto z = add(y, ffn.forward(ln2.forward(y), gh, gw));
    return tokens_to_map(z, gh, gw);
  }
};

// ---- stage -------------------------------------------------------------------

template <typename T>
struct StageBlock {
  Conv2dLayer<T> embed_conv;
  LayerNormLayer<T> embed_norm;
  std::vector<CitBlock<T>> blocks;
  Conv2dLayer<T> sb_conv;

  static StageBlock make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                         Dim cin, Dim cout, Dim depth, Dim heads, Dim window,
                         Dim kv_stride, Dim expansion) {
    StageBlock s;
    s.embed_conv = Conv2dLayer<T>::make(store, rng, name + ".embed.conv", cin, cout, 3, 2, 1);
    s.embed_norm = LayerNormLayer<T>::make(store, name + ".embed.norm", cout);
    for (Dim i = 0; i < depth; ++i)
      s.blocks.push_back(CitBlock<T>::make(store, rng,
                                           name + ".block" + std::to_string(i), cout,
                                           heads, window, kv_stride, expansion));
    s.sb_conv = Conv2dLayer<T>::make(store, rng, name + ".sb", cout, cout, 1, 1, 0);
    return s;
  }

  TensorT<T> forward(const TensorT<T>& map, std::vector<TensorT<T>>* attn_probe = nullptr) const {
    auto e = embed_conv.forward(map);
    const Dim gh = e.dim(2), gw = e.dim(3);
    auto tok = embed_norm.forward(map_to_tokens(e));
    auto m = tokens_to_map(tok, gh, gw);
    for (const auto& b : blocks) m = b.forward(m, attn_probe);
    auto pooled = add(pool2d(m, PoolMode::kAvg, 3, 1, 1), pool2d(m, PoolMode::kMax, 3, 1, 1));
    return relu(sb_conv.forward(pooled));
  }
};

// ---- full backbone -----------------------------------------------------------

template <typename T>
struct Backbone {
  Stem<T> stem;
  std::vector<StageBlock<T>> stages;

  struct Out {
    TensorT<T> stem_out;                 // tap for the residual stream
    std::vector<TensorT<T>> stage_maps;  // post-SB map per stage
  };

  static Backbone make(ParameterStore<T>& store, Rng& rng, Dim in_channels,
                       const std::vector<Dim>& dims, const std::vector<Dim>& depths,
                       const std::vector<Dim>& heads, Dim window, Dim kv_stride,
                       Dim expansion) {
    if (dims.size() != 4 || depths.size() != 4 || heads.size() != 4)
      fail("backbone: expected 4 stage dims/depths/heads");
    Backbone b;
    b.stem = Stem<T>::make(store, rng, "stem", in_channels, dims[0]);
    for (int i = 0; i < 4; ++i)
      b.stages.push_back(StageBlock<T>::make(
          store, rng, "backbone.stage" + std::to_string(i + 1),
          i == 0 ? dims[0] : dims[i - 1], dims[i], depths[i], heads[i], window,
          kv_stride, expansion));
    return b;
  }

  Out forward(const TensorT<T>& images, bool training,
              std::vector<TensorT<T>>* attn_probe = nullptr) const {
    Out out;
    out.stem_out = stem.forward(images, training);
    auto m = out.stem_out;
    for (const auto& s : stages) {
      m = s.forward(m, attn_probe);
      out.stage_maps.push_back(m);
    }
    return out;
  }
};

}  // namespace cers
