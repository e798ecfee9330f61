#pragma once

// Channel enhancement: concatenate the residual, spatial, and backbone maps,
// re-weight pixels with a spatial attention gate, then classify via global
// average pooling and a fully connected head.

#include <string>
#include <vector>

#include "cers/layers.hpp"
#include "cers/tensor.hpp"

namespace cers {

// Concatenates [X_R, X_S, X_SBCIT] along channels after checking alignment.
template <typename T>
TensorT<T> channel_enhance(const TensorT<T>& xr, const TensorT<T>& xs,
                           const TensorT<T>& xb) {
  const TensorT<T>* m[3] = {&xr, &xs, &xb};
  const char* names[3] = {"residual", "spatial", "backbone"};
  for (int i = 0; i < 3; ++i)
    if (m[i]->rank() != 4)
      fail(std::string("channel_enhance: ") + names[i] + " stream is not NCHW: " +
           shape_str(m[i]->shape()));
  for (int i = 1; i < 3; ++i) {
    if (m[i]->dim(0) != m[0]->dim(0) || m[i]->dim(2) != m[0]->dim(2) ||
        m[i]->dim(3) != m[0]->dim(3))
      fail(std::string("channel_enhance: stream extents disagree: residual ") +
           shape_str(xr.shape()) + ", spatial " + shape_str(xs.shape()) +
           ", backbone " + shape_str(xb.shape()));
  }
  return concat_channels<T>({xr, xs, xb});
}

template <typename T>
struct SpatialAttention {
  Conv2dLayer<T> direct;      // 1x1 on the fused map
  Conv2dLayer<T> context_dw;  // 3x3 depthwise context
  Conv2dLayer<T> context;     // 1x1 on the context branch; its bias is the additive term
  Conv2dLayer<T> gate;        // 1x1 down to a single channel; bias then sigmoid

  static SpatialAttention make(ParameterStore<T>& store, Rng& rng,
                               const std::string& name, Dim c) {
    SpatialAttention s;
    s.direct = Conv2dLayer<T>::make(store, rng, name + ".direct", c, c, 1, 1, 0, 1, false);
    s.context_dw = Conv2dLayer<T>::make(store, rng, name + ".context_dw", c, c, 3, 1, 1, c, false);
    s.context = Conv2dLayer<T>::make(store, rng, name + ".context", c, c, 1, 1, 0, 1, true);
    s.gate = Conv2dLayer<T>::make(store, rng, name + ".gate", c, 1, 1, 1, 0, 1, true);
    // The gate sits behind a sigmoid that multiplies every fused feature, so it
    // must not saturate while the rest of the network is still settling: once
    // the sigmoid closes, both of its gradient factors vanish and training
    // stalls at chance level.  Two measures keep it out of saturation early:
    // the attention convolutions start at reduced scale so the gate logits
    // respond gently to upstream drift, and the gate bias starts positive
    // (sigmoid(2) ~ 0.88) so the fused map initially passes through.
    for (auto* l : {&s.direct, &s.context_dw, &s.context, &s.gate})
      for (auto& v : l->w.mut()) v *= T(0.2);
    for (auto& v : s.gate.b.mut()) v = T(2);
    return s;
  }

  // Returns the re-weighted map; optionally exposes the [N,1,H,W] gate.
  TensorT<T> forward(const TensorT<T>& z, TensorT<T>* gate_out = nullptr) const {
    auto pre = relu(add(direct.forward(z), context.forward(context_dw.forward(z))));
    auto g = sigmoid(gate.forward(pre));
    if (gate_out) *gate_out = g.detach();
    return mul_gate(z, g);
  }
};

template <typename T>
struct ClassifierHead {
  LinearLayer<T> fc;
  T dropout_rate = T(0);

  static ClassifierHead make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                             Dim cin, Dim classes, T dropout_rate) {
    ClassifierHead h;
    h.dropout_rate = dropout_rate;
    h.fc = LinearLayer<T>::make(store, rng, name + ".fc", cin, classes);
    // The pooled features are post-ReLU and therefore have a positive mean, so
    // fan-in scaled weights would give hot, over-confident initial logits and a
    // violent first shrink phase.  A small classifier init keeps the initial
    // prediction near uniform instead.
    fill_normal(h.fc.w, rng, 0.01);
    return h;
  }

  struct Out {
    TensorT<T> logits;         // [N, classes]
    TensorT<T> probabilities;  // softmax over classes
    TensorT<T> penultimate;    // pooled features before the FC layer
  };

  Out forward(const TensorT<T>& map, bool training, Rng* rng) const {
    Out o;
    o.penultimate = global_avg_pool(map);
    auto feat = o.penultimate;
    if (training && dropout_rate > T(0)) {
      if (!rng) fail("classifier head: training forward needs an rng for dropout");
      feat = dropout(feat, dropout_rate, *rng);
    }
    o.logits = fc.forward(feat);
    o.probabilities = softmax(o.logits, 1);
    return o;
  }
};

}  // namespace cers
