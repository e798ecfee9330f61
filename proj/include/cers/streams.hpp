#pragma once

// Auxiliary feature streams. The residual stream taps the stem output and
// applies four stride-2 residual blocks (two conv shapes, alternating); the
// spatial stream taps the raw image and applies five squeeze/conv/pool blocks
// with alternating max and average pooling, then a 1x1 alignment conv.

#include <string>
#include <vector>

#include "cers/layers.hpp"
#include "cers/tensor.hpp"

namespace cers {

template <typename T>
struct ResidualBlock {
  Conv2dLayer<T> c1, c2, proj;
  bool has_proj = false;

  // kind 'K': 3x3 then 3x3. kind 'L': 1x1 then 3x3. First conv carries the stride.
  static ResidualBlock make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                            char kind, Dim cin, Dim cout, Dim stride) {
    if (kind != 'K' && kind != 'L') fail("residual block " + name + ": unknown kind");
    ResidualBlock b;
    const Dim k1 = kind == 'K' ? 3 : 1;
    b.c1 = Conv2dLayer<T>::make(store, rng, name + ".conv1", cin, cout, k1, stride,
                                k1 == 3 ? 1 : 0);
    b.c2 = Conv2dLayer<T>::make(store, rng, name + ".conv2", cout, cout, 3, 1, 1);
    if (stride != 1 || cin != cout) {
      b.proj = Conv2dLayer<T>::make(store, rng, name + ".proj", cin, cout, 1, stride, 0);
      b.has_proj = true;
    }
    return b;
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    auto h = c2.forward(relu(c1.forward(x)));
    auto skip = has_proj ? proj.forward(x) : x;
    return relu(add(h, skip));
  }
};

template <typename T>
struct ResidualStream {
  std::vector<ResidualBlock<T>> blocks;
  T dropout_rate = T(0);

  static ResidualStream make(ParameterStore<T>& store, Rng& rng, Dim cin,
                             const std::vector<Dim>& dims, T dropout_rate) {
    if (dims.size() != 4) fail("residual stream: expected 4 channel widths");
    ResidualStream s;
    s.dropout_rate = dropout_rate;
    const char kinds[4] = {'K', 'L', 'K', 'L'};
    Dim prev = cin;
    for (int i = 0; i < 4; ++i) {
      s.blocks.push_back(ResidualBlock<T>::make(
          store, rng, "residual.block" + std::to_string(i + 1), kinds[i], prev,
          dims[i], 2));
      prev = dims[i];
    }
    return s;
  }

  TensorT<T> forward(const TensorT<T>& stem_map, bool training, Rng* rng) const {
    auto x = stem_map;
    for (const auto& b : blocks) x = b.forward(x);
    if (training && dropout_rate > T(0)) {
      if (!rng) fail("residual stream: training forward needs an rng for dropout");
      x = dropout(x, dropout_rate, *rng);
    }
    return x;
  }
};

template <typename T>
struct SpatialBlock {
  Conv2dLayer<T> squeeze, conv;
  BatchNormLayer<T> bn;
  PoolMode pool = PoolMode::kMax;

  static SpatialBlock make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                           Dim cin, Dim cout, PoolMode pool) {
    SpatialBlock b;
    const Dim mid = std::max<Dim>(1, cin / 2);
    b.squeeze = Conv2dLayer<T>::make(store, rng, name + ".squeeze", cin, mid, 3, 1, 1);
    b.bn = BatchNormLayer<T>::make(store, name + ".bn", mid);
    b.conv = Conv2dLayer<T>::make(store, rng, name + ".conv", mid, cout, 3, 1, 1);
    b.pool = pool;
    return b;
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) const {
    auto h = relu(bn.forward(squeeze.forward(x), training));
    return pool2d(conv.forward(h), pool, 2, 2, 0);
  }
};

template <typename T>
struct SpatialStream {
  std::vector<SpatialBlock<T>> blocks;
  Conv2dLayer<T> align;  // 1x1 to the fusion channel width

  static SpatialStream make(ParameterStore<T>& store, Rng& rng, Dim cin,
                            const std::vector<Dim>& dims, Dim fusion_width) {
    if (dims.size() != 5) fail("spatial stream: expected 5 channel widths");
    SpatialStream s;
    const PoolMode modes[5] = {PoolMode::kMax, PoolMode::kAvg, PoolMode::kMax,
                               PoolMode::kAvg, PoolMode::kMax};
    Dim prev = cin;
    for (int i = 0; i < 5; ++i) {
      s.blocks.push_back(SpatialBlock<T>::make(
          store, rng, "spatial.block" + std::to_string(i + 1), prev, dims[i], modes[i]));
      prev = dims[i];
    }
    s.align = Conv2dLayer<T>::make(store, rng, "spatial.align", prev, fusion_width, 1, 1, 0);
    return s;
  }

  TensorT<T> forward(const TensorT<T>& image, bool training) const {
    auto x = image;
    for (const auto& b : blocks) x = b.forward(x, training);
    return align.forward(x);
  }
};

}  // namespace cers
