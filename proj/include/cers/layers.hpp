#pragma once

// Thin layer structs: each owns its parameter tensors (registered in a
// ParameterStore under a dotted prefix) and exposes a forward(). Weight init
// is Kaiming normal with fan-in scaling; all biases start at zero, norm
// scales at one.

#include <string>

#include "cers/params.hpp"
#include "cers/tensor.hpp"

namespace cers {

template <typename T>
struct Conv2dLayer {
  TensorT<T> w, b;
  Dim stride = 1, pad = 0, groups = 1;

  static Conv2dLayer make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                          Dim cin, Dim cout, Dim k, Dim stride, Dim pad,
                          Dim groups = 1, bool bias = true) {
    if (cin % groups != 0 || cout % groups != 0)
      fail("conv layer " + name + ": channels not divisible by groups");
    Conv2dLayer l;
    l.stride = stride;
    l.pad = pad;
    l.groups = groups;
    TensorT<T> w({cout, cin / groups, k, k});
    kaiming_init(w, rng, (cin / groups) * k * k);
    l.w = store.add(name + ".w", w);
    if (bias) l.b = store.add(name + ".b", TensorT<T>({cout}));
    return l;
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    return conv2d(x, w, b, stride, pad, groups);
  }

  Dim param_count() const { return w.numel() + (b.defined() ? b.numel() : 0); }
};

template <typename T>
struct LinearLayer {
  TensorT<T> w, b;

  static LinearLayer make(ParameterStore<T>& store, Rng& rng, const std::string& name,
                          Dim din, Dim dout, bool bias = true) {
    LinearLayer l;
    TensorT<T> w({dout, din});
    kaiming_init(w, rng, din);
    l.w = store.add(name + ".w", w);
    if (bias) l.b = store.add(name + ".b", TensorT<T>({dout}));
    return l;
  }

  TensorT<T> forward(const TensorT<T>& x) const { return linear(x, w, b); }

  Dim param_count() const { return w.numel() + (b.defined() ? b.numel() : 0); }
};

template <typename T>
struct BatchNormLayer {
  TensorT<T> gamma, beta;
  mutable TensorT<T> running_mean, running_var;

  static BatchNormLayer make(ParameterStore<T>& store, const std::string& name, Dim c) {
    BatchNormLayer l;
    TensorT<T> g({c});
    auto gs = g.mut();
    std::fill(gs.begin(), gs.end(), T(1));
    l.gamma = store.add(name + ".gamma", g);
    l.beta = store.add(name + ".beta", TensorT<T>({c}));
    l.running_mean = store.add(name + ".running_mean", TensorT<T>({c}), false);
    TensorT<T> rv({c});
    auto rs = rv.mut();
    std::fill(rs.begin(), rs.end(), T(1));
    l.running_var = store.add(name + ".running_var", rv, false);
    return l;
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) const {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  Dim param_count() const { return gamma.numel() + beta.numel(); }
};

template <typename T>
struct LayerNormLayer {
  TensorT<T> gamma, beta;

  static LayerNormLayer make(ParameterStore<T>& store, const std::string& name, Dim c) {
    LayerNormLayer l;
    TensorT<T> g({c});
    auto gs = g.mut();
    std::fill(gs.begin(), gs.end(), T(1));
    l.gamma = store.add(name + ".gamma", g);
    l.beta = store.add(name + ".beta", TensorT<T>({c}));
    return l;
  }

  TensorT<T> forward(const TensorT<T>& x) const { return layer_norm(x, gamma, beta); }

  Dim param_count() const { return gamma.numel() + beta.numel(); }
};

}  // namespace cers
