#pragma once

// Dense tensor type with reverse-mode autodiff over a dynamically recorded
// tape. Storage is f32 in the shipped model (`Tensor`); the whole core is
// templated on the scalar so gradient checks can run the identical code in
// f64 (`Tensor64`). Explicit reductions (sum, mean, pooling averages,
// normalization statistics, softmax normalizers) accumulate in double
// regardless of the storage type.
//
// Layout is contiguous row-major. Feature maps are NCHW, token batches are
// [N, T, D]. A tensor's payload is immutable once created except through the
// explicit mutable accessors used by initialization, optimizers and
// checkpoint loading.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cers {

using Dim = std::int64_t;
using Shape = std::vector<Dim>;

inline Dim numel_of(const Shape& s) {
  Dim n = 1;
  for (Dim d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

// Filesystem / file-format failures (CLI exit code 3), as opposed to
// validation failures signalled through fail().
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG. Distributions are written out explicitly so streams are
// reproducible independent of the standard library implementation.
struct Rng {
  std::mt19937 gen;

  explicit Rng(std::uint32_t seed = 0) : gen(seed) {}

  // uniform in [0, 1) with 24 bits of resolution
  double uniform() { return (gen() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes exactly two draws per call
  double normal() {
    double u1 = (gen() + 1.0) * (1.0 / 4294967296.0);  // (0, 1]
    double u2 = gen() * (1.0 / 4294967296.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint32_t next_index(std::uint32_t n) { return gen() % n; }

  bool coin() { return (gen() & 1u) != 0; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[next_index(static_cast<std::uint32_t>(i))]);
  }
};

template <typename T>
struct Storage {
  std::vector<T> v;
  std::vector<T> g;  // allocated lazily on first gradient accumulation
  bool needs_grad = false;  // leaf flag; shared by every view of this buffer
};

template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  size_t size() const { return nodes_.size(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

// RAII recording scope; ops record onto the innermost active tape.
template <typename T>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<T>::current()) { Tape<T>::current() = &tape_; }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* prev_;
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), st_(std::make_shared<Storage<T>>()) {
    Dim n = numel_of(shape_);
    if (n < 0) fail("tensor: negative extent in shape " + shape_str(shape_));
    st_->v.assign(static_cast<size_t>(n), fill);
  }

  static TensorT from_data(Shape shape, std::vector<T> data) {
    TensorT t;
    t.shape_ = std::move(shape);
    if (numel_of(t.shape_) != static_cast<Dim>(data.size()))
      fail("tensor: data size " + std::to_string(data.size()) +
           " does not match shape " + shape_str(t.shape_));
    t.st_ = std::make_shared<Storage<T>>();
    t.st_->v = std::move(data);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Dim dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  Dim numel() const { return numel_of(shape_); }
  bool defined() const { return st_ != nullptr; }

  std::span<const T> data() const { return {st_->v.data(), st_->v.size()}; }
  // Mutable payload access; callers take responsibility for not mutating
  // values that a recorded tape still references.
  std::span<T> mut() { return {st_->v.data(), st_->v.size()}; }

  T item() const {
    if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
    return st_->v[0];
  }

  bool has_grad() const { return st_ && !st_->g.empty(); }
  std::span<const T> grad() const {
    if (!has_grad()) fail("grad: no gradient accumulated");
    return {st_->g.data(), st_->g.size()};
  }
  void zero_grad() {
    if (st_) st_->g.assign(st_->v.size(), T(0));
  }
  void drop_grad() {
    if (st_) st_->g.clear();
  }

  TensorT& set_requires_grad(bool b = true) {
    if (!st_) fail("set_requires_grad: undefined tensor");
    st_->needs_grad = b;
    return *this;
  }
  bool leaf_requires_grad() const { return st_ && st_->needs_grad && !detached_; }

  // True when gradients should flow into this tensor under the active tape.
  bool tracked() const {
    if (detached_) return false;
    return (st_ && st_->needs_grad) || (tape_ != nullptr && tape_ == Tape<T>::current());
  }

  TensorT detach() const {
    TensorT t = *this;
    t.tape_ = nullptr;
    t.detached_ = true;
    return t;
  }

  // View with a new shape over the same storage (numel must match).
  TensorT reshape(Shape s) const {
    if (numel_of(s) != numel())
      fail("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(s));
    TensorT t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  std::shared_ptr<Storage<T>> storage() const { return st_; }

  void mark_recorded() { tape_ = Tape<T>::current(); }

 private:
  Shape shape_;
  std::shared_ptr<Storage<T>> st_;
  Tape<T>* tape_ = nullptr;  // tape that produced this tensor, if any
  bool detached_ = false;    // severs this view from gradient flow
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <typename T>
void ensure_grad(const std::shared_ptr<Storage<T>>& st) {
  if (st->g.empty()) st->g.assign(st->v.size(), T(0));
}

// Records a backward closure if recording is active and any input is tracked.
// The closure must check that the output gradient exists before doing work.
template <typename T, typename F>
void record_if_tracked(TensorT<T>& out, bool any_tracked, F&& backward) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape || !any_tracked) return;
  out.mark_recorded();
  tape->record(std::forward<F>(backward));
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    fail("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<T> out(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  bool ta = a.tracked(), tb = b.tracked();
  detail::record_if_tracked(out, ta || tb, [sa = a.storage(), sb = b.storage(),
                                            so = out.storage(), ta, tb]() {
    if (so->g.empty()) return;
    if (ta) {
      detail::ensure_grad(sa);
      for (size_t i = 0; i < so->g.size(); ++i) sa->g[i] += so->g[i];
    }
    if (tb) {
      detail::ensure_grad(sb);
      for (size_t i = 0; i < so->g.size(); ++i) sb->g[i] += so->g[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    fail("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<T> out(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  bool ta = a.tracked(), tb = b.tracked();
  detail::record_if_tracked(out, ta || tb, [sa = a.storage(), sb = b.storage(),
                                            so = out.storage(), ta, tb]() {
    if (so->g.empty()) return;
    if (ta) {
      detail::ensure_grad(sa);
      for (size_t i = 0; i < so->g.size(); ++i) sa->g[i] += so->g[i] * sb->v[i];
    }
    if (tb) {
      detail::ensure_grad(sb);
      for (size_t i = 0; i < so->g.size(); ++i) sb->g[i] += so->g[i] * sa->v[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  TensorT<T> out(a.shape());
  auto av = a.data();
  auto ov = out.mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  detail::record_if_tracked(out, a.tracked(),
                            [sa = a.storage(), so = out.storage(), s]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sa);
                              for (size_t i = 0; i < so->g.size(); ++i)
                                sa->g[i] += so->g[i] * s;
                            });
  return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  TensorT<T> out(a.shape());
  auto av = a.data();
  auto ov = out.mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  detail::record_if_tracked(out, a.tracked(),
                            [sa = a.storage(), so = out.storage()]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sa);
                              for (size_t i = 0; i < so->g.size(); ++i)
                                if (sa->v[i] > T(0)) sa->g[i] += so->g[i];
                            });
  return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  TensorT<T> out(a.shape());
  auto av = a.data();
  auto ov = out.mut();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = T(1) / (T(1) + std::exp(-av[i]));
  detail::record_if_tracked(out, a.tracked(),
                            [sa = a.storage(), so = out.storage()]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sa);
                              for (size_t i = 0; i < so->g.size(); ++i) {
                                T y = so->v[i];
                                sa->g[i] += so->g[i] * y * (T(1) - y);
                              }
                            });
  return out;
}

// Exact Gaussian-CDF form: x * Phi(x).
template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
  TensorT<T> out(a.shape());
  auto av = a.data();
  auto ov = out.mut();
  constexpr double inv_sqrt2 = 0.7071067811865476;
  for (size_t i = 0; i < ov.size(); ++i) {
    double x = static_cast<double>(av[i]);
    ov[i] = static_cast<T>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
  }
  detail::record_if_tracked(out, a.tracked(), [sa = a.storage(),
                                               so = out.storage()]() {
    if (so->g.empty()) return;
    detail::ensure_grad(sa);
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    for (size_t i = 0; i < so->g.size(); ++i) {
      double x = static_cast<double>(sa->v[i]);
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      sa->g[i] += so->g[i] * static_cast<T>(cdf + x * pdf);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax over an arbitrary axis (max-subtracted, f64 normalizer)

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis) {
  if (a.rank() == 0) fail("softmax: rank-0 tensor");
  if (axis < 0) axis += static_cast<int>(a.rank());
  if (axis < 0 || axis >= static_cast<int>(a.rank()))
    fail("softmax: axis " + std::to_string(axis) + " out of range for " +
         shape_str(a.shape()));
  Dim k = a.shape()[axis];
  Dim inner = 1, outer = 1;
  for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= a.shape()[i];

  TensorT<T> out(a.shape());
  auto av = a.data();
  auto ov = out.mut();
  for (Dim o = 0; o < outer; ++o)
    for (Dim in = 0; in < inner; ++in) {
      Dim base = o * k * inner + in;
      T m = av[base];
      for (Dim j = 1; j < k; ++j) m = std::max(m, av[base + j * inner]);
      double denom = 0.0;
      for (Dim j = 0; j < k; ++j) {
        T e = std::exp(av[base + j * inner] - m);
        ov[base + j * inner] = e;
        denom += static_cast<double>(e);
      }
      T inv = static_cast<T>(1.0 / denom);
      for (Dim j = 0; j < k; ++j) ov[base + j * inner] *= inv;
    }

  detail::record_if_tracked(
      out, a.tracked(), [sa = a.storage(), so = out.storage(), k, inner, outer]() {
        if (so->g.empty()) return;
        detail::ensure_grad(sa);
        for (Dim o = 0; o < outer; ++o)
          for (Dim in = 0; in < inner; ++in) {
            Dim base = o * k * inner + in;
            double dot = 0.0;
            for (Dim j = 0; j < k; ++j) {
              Dim idx = base + j * inner;
              dot += static_cast<double>(so->g[idx]) * so->v[idx];
            }
            for (Dim j = 0; j < k; ++j) {
              Dim idx = base + j * inner;
              sa->g[idx] += so->v[idx] * (so->g[idx] - static_cast<T>(dot));
            }
          }
      });
  return out;
}

// ---------------------------------------------------------------------------
// linear: x [..., Din] * W [Dout, Din]^T + b

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  if (w.rank() != 2) fail("linear: weight must be rank 2, got " + shape_str(w.shape()));
  if (x.rank() < 1) fail("linear: input must have a feature axis");
  Dim din = x.shape().back();
  Dim dout = w.dim(0);
  if (w.dim(1) != din)
    fail("linear: input feature axis " + std::to_string(din) +
         " does not match weight " + shape_str(w.shape()));
  bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != dout))
    fail("linear: bias must be [" + std::to_string(dout) + "], got " +
         shape_str(b.shape()));
  Dim rows = x.numel() / din;

  Shape oshape = x.shape();
  oshape.back() = dout;
  TensorT<T> out(oshape);

  detail::ECMap<T> X(x.data().data(), rows, din);
  detail::ECMap<T> W(w.data().data(), dout, din);
  detail::EMap<T> Y(out.mut().data(), rows, dout);
  Y.noalias() = X * W.transpose();
  if (has_bias) {
    auto bv = b.data();
    auto ov = out.mut();
    for (Dim r = 0; r < rows; ++r)
      for (Dim c = 0; c < dout; ++c) ov[r * dout + c] += bv[c];
  }

  bool tx = x.tracked(), tw = w.tracked(), tb = has_bias && b.tracked();
  detail::record_if_tracked(
      out, tx || tw || tb,
      [sx = x.storage(), sw = w.storage(),
       sb = has_bias ? b.storage() : nullptr, so = out.storage(), rows, din,
       dout, tx, tw, tb]() {
        if (so->g.empty()) return;
        detail::ECMap<T> dY(so->g.data(), rows, dout);
        if (tx) {
          detail::ensure_grad(sx);
          detail::EMap<T> dX(sx->g.data(), rows, din);
          detail::ECMap<T> W(sw->v.data(), dout, din);
          dX.noalias() += dY * W;
        }
        if (tw) {
          detail::ensure_grad(sw);
          detail::EMap<T> dW(sw->g.data(), dout, din);
          detail::ECMap<T> X(sx->v.data(), rows, din);
          dW.noalias() += dY.transpose() * X;
        }
        if (tb) {
          detail::ensure_grad(sb);
          for (Dim r = 0; r < rows; ++r)
            for (Dim c = 0; c < dout; ++c) sb->g[c] += so->g[r * dout + c];
        }
      });
  return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w) {
  return linear(x, w, TensorT<T>());
}

// ---------------------------------------------------------------------------
// batched matmul: a [B, M, K] x b [B, K, N] (or [B, N, K] with trans_b)

template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool trans_b = false,
               T alpha = T(1)) {
  if (a.rank() != 3 || b.rank() != 3)
    fail("bmm: expects rank-3 operands, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  Dim B = a.dim(0), M = a.dim(1), K = a.dim(2);
  if (b.dim(0) != B) fail("bmm: batch axis mismatch");
  Dim N = trans_b ? b.dim(1) : b.dim(2);
  Dim Kb = trans_b ? b.dim(2) : b.dim(1);
  if (Kb != K)
    fail("bmm: contraction axis mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));

  TensorT<T> out({B, M, N});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.mut().data();
  for (Dim i = 0; i < B; ++i) {
    detail::ECMap<T> A(ap + i * M * K, M, K);
    detail::EMap<T> Y(op + i * M * N, M, N);
    if (trans_b) {
      detail::ECMap<T> Bm(bp + i * N * K, N, K);
      Y.noalias() = alpha * (A * Bm.transpose());
    } else {
      detail::ECMap<T> Bm(bp + i * K * N, K, N);
      Y.noalias() = alpha * (A * Bm);
    }
  }

  bool ta = a.tracked(), tb = b.tracked();
  detail::record_if_tracked(
      out, ta || tb,
      [sa = a.storage(), sb = b.storage(), so = out.storage(), B, M, K, N,
       trans_b, alpha, ta, tb]() {
        if (so->g.empty()) return;
        if (ta) detail::ensure_grad(sa);
        if (tb) detail::ensure_grad(sb);
        for (Dim i = 0; i < B; ++i) {
          detail::ECMap<T> dY(so->g.data() + i * M * N, M, N);
          if (ta) {
            detail::EMap<T> dA(sa->g.data() + i * M * K, M, K);
            if (trans_b) {
              detail::ECMap<T> Bm(sb->v.data() + i * N * K, N, K);
              dA.noalias() += alpha * (dY * Bm);
            } else {
              detail::ECMap<T> Bm(sb->v.data() + i * K * N, K, N);
              dA.noalias() += alpha * (dY * Bm.transpose());
            }
          }
          if (tb) {
            detail::ECMap<T> A(sa->v.data() + i * M * K, M, K);
            if (trans_b) {
              detail::EMap<T> dB(sb->g.data() + i * N * K, N, K);
              dB.noalias() += alpha * (dY.transpose() * A);
            } else {
              detail::EMap<T> dB(sb->g.data() + i * K * N, K, N);
              dB.noalias() += alpha * (A.transpose() * dY);
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, NCHW, kernel [Cout, Cin/groups, kh, kw]

namespace detail {

template <typename T>
void im2col(const T* img, Dim C, Dim H, Dim W, Dim kh, Dim kw, Dim stride,
            Dim pad, Dim Ho, Dim Wo, T* cols) {
  // cols is [C*kh*kw, Ho*Wo]
  Dim row = 0;
  for (Dim c = 0; c < C; ++c)
    for (Dim ki = 0; ki < kh; ++ki)
      for (Dim kj = 0; kj < kw; ++kj, ++row) {
        T* dst = cols + row * Ho * Wo;
        const T* src = img + c * H * W;
        for (Dim oh = 0; oh < Ho; ++oh) {
          Dim ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, T(0));
            dst += Wo;
            continue;
          }
          Dim iw = -pad + kj;
          for (Dim ow = 0; ow < Wo; ++ow, iw += stride)
            *dst++ = (iw >= 0 && iw < W) ? src[ih * W + iw] : T(0);
        }
      }
}

template <typename T>
void col2im_add(const T* cols, Dim C, Dim H, Dim W, Dim kh, Dim kw, Dim stride,
                Dim pad, Dim Ho, Dim Wo, T* img) {
  Dim row = 0;
  for (Dim c = 0; c < C; ++c)
    for (Dim ki = 0; ki < kh; ++ki)
      for (Dim kj = 0; kj < kw; ++kj, ++row) {
        const T* src = cols + row * Ho * Wo;
        T* dst = img + c * H * W;
        for (Dim oh = 0; oh < Ho; ++oh) {
          Dim ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            src += Wo;
            continue;
          }
          Dim iw = -pad + kj;
          for (Dim ow = 0; ow < Wo; ++ow, iw += stride) {
            if (iw >= 0 && iw < W) dst[ih * W + iw] += src[ow];
          }
          src += Wo;
        }
      }
}

// 3x3 depthwise forward, the hot path in this architecture
template <typename T>
void dw3x3_forward(const T* x, const T* k, Dim C, Dim H, Dim W, Dim stride,
                   Dim Ho, Dim Wo, T* y) {
  for (Dim c = 0; c < C; ++c) {
    const T* xc = x + c * H * W;
    const T* kc = k + c * 9;
    T* yc = y + c * Ho * Wo;
    for (Dim oh = 0; oh < Ho; ++oh) {
      Dim ih0 = oh * stride - 1;
      for (Dim ow = 0; ow < Wo; ++ow) {
        Dim iw0 = ow * stride - 1;
        T acc = 0;
        for (Dim ki = 0; ki < 3; ++ki) {
          Dim ih = ih0 + ki;
          if (ih < 0 || ih >= H) continue;
          for (Dim kj = 0; kj < 3; ++kj) {
            Dim iw = iw0 + kj;
            if (iw < 0 || iw >= W) continue;
            acc += kc[ki * 3 + kj] * xc[ih * W + iw];
          }
        }
        yc[oh * Wo + ow] = acc;
      }
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                  Dim stride, Dim pad, Dim groups = 1) {
  if (x.rank() != 4) fail("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  if (w.rank() != 4) fail("conv2d: kernel must be [Cout,Cin/g,kh,kw], got " + shape_str(w.shape()));
  if (stride < 1) fail("conv2d: stride must be >= 1");
  if (pad < 0) fail("conv2d: negative padding");
  Dim N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Dim Co = w.dim(0), Cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (groups < 1 || C % groups || Co % groups)
    fail("conv2d: groups=" + std::to_string(groups) +
         " must divide input channels (axis 1 = " + std::to_string(C) +
         ") and output channels (" + std::to_string(Co) + ")");
  if (Cg != C / groups)
    fail("conv2d: kernel channel axis 1 (= " + std::to_string(Cg) +
         ") does not match input channels per group (" +
         std::to_string(C / groups) + ")");
  Dim Ho = (H + 2 * pad - kh) / stride + 1;
  Dim Wo = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    fail("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
         " exceeds padded input " + std::to_string(H + 2 * pad) + "x" +
         std::to_string(W + 2 * pad));
  bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != Co))
    fail("conv2d: bias must be [" + std::to_string(Co) + "], got " + shape_str(b.shape()));

  TensorT<T> out({N, Co, Ho, Wo});
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  T* op = out.mut().data();

  bool depthwise = (groups == C && Co == C && Cg == 1 && kh == 3 && kw == 3 && pad == 1);
  if (depthwise) {
    for (Dim n = 0; n < N; ++n)
      detail::dw3x3_forward(xp + n * C * H * W, wp, C, H, W, stride, Ho, Wo,
                            op + n * Co * Ho * Wo);
  } else {
    Dim K = Cg * kh * kw;
    std::vector<T> cols(static_cast<size_t>(K * Ho * Wo));
    Dim cog = Co / groups;
    for (Dim n = 0; n < N; ++n)
      for (Dim g = 0; g < groups; ++g) {
        detail::im2col(xp + (n * C + g * Cg) * H * W, Cg, H, W, kh, kw, stride,
                       pad, Ho, Wo, cols.data());
        detail::ECMap<T> Wm(wp + g * cog * K, cog, K);
        detail::ECMap<T> Cm(cols.data(), K, Ho * Wo);
        detail::EMap<T> Ym(op + (n * Co + g * cog) * Ho * Wo, cog, Ho * Wo);
        Ym.noalias() = Wm * Cm;
      }
  }
  if (has_bias) {
    auto bv = b.data();
    for (Dim n = 0; n < N; ++n)
      for (Dim c = 0; c < Co; ++c) {
        T* base = op + (n * Co + c) * Ho * Wo;
        for (Dim i = 0; i < Ho * Wo; ++i) base[i] += bv[c];
      }
  }

  bool tx = x.tracked(), tw = w.tracked(), tb = has_bias && b.tracked();
  detail::record_if_tracked(
      out, tx || tw || tb,
      [sx = x.storage(), sw = w.storage(),
       sb = has_bias ? b.storage() : nullptr, so = out.storage(), N, C, H, W,
       Co, Cg, kh, kw, stride, pad, groups, Ho, Wo, depthwise, tx, tw, tb]() {
        if (so->g.empty()) return;
        if (tx) detail::ensure_grad(sx);
        if (tw) detail::ensure_grad(sw);
        if (tb) detail::ensure_grad(sb);
        if (tb) {
          for (Dim n = 0; n < N; ++n)
            for (Dim c = 0; c < Co; ++c) {
              const T* gy = so->g.data() + (n * Co + c) * Ho * Wo;
              double acc = 0;
              for (Dim i = 0; i < Ho * Wo; ++i) acc += static_cast<double>(gy[i]);
              sb->g[c] += static_cast<T>(acc);
            }
        }
        if (depthwise) {
          for (Dim n = 0; n < N; ++n)
            for (Dim c = 0; c < C; ++c) {
              const T* gy = so->g.data() + (n * C + c) * Ho * Wo;
              const T* xc = sx->v.data() + (n * C + c) * H * W;
              const T* kc = sw->v.data() + c * 9;
              T* gx = tx ? sx->g.data() + (n * C + c) * H * W : nullptr;
              T* gk = tw ? sw->g.data() + c * 9 : nullptr;
              for (Dim oh = 0; oh < Ho; ++oh)
                for (Dim ow = 0; ow < Wo; ++ow) {
                  T gyv = gy[oh * Wo + ow];
                  if (gyv == T(0)) continue;
                  Dim ih0 = oh * stride - 1, iw0 = ow * stride - 1;
                  for (Dim ki = 0; ki < 3; ++ki) {
                    Dim ih = ih0 + ki;
                    if (ih < 0 || ih >= H) continue;
                    for (Dim kj = 0; kj < 3; ++kj) {
                      Dim iw = iw0 + kj;
                      if (iw < 0 || iw >= W) continue;
                      if (gx) gx[ih * W + iw] += gyv * kc[ki * 3 + kj];
                      if (gk) gk[ki * 3 + kj] += gyv * xc[ih * W + iw];
                    }
                  }
                }
            }
          return;
        }
        Dim K = Cg * kh * kw;
        Dim cog = Co / groups;
        std::vector<T> cols(static_cast<size_t>(K * Ho * Wo));
        std::vector<T> dcols(static_cast<size_t>(K * Ho * Wo));
        for (Dim n = 0; n < N; ++n)
          for (Dim g = 0; g < groups; ++g) {
            detail::ECMap<T> dY(so->g.data() + (n * Co + g * cog) * Ho * Wo,
                                cog, Ho * Wo);
            if (tw) {
              detail::im2col(sx->v.data() + (n * C + g * Cg) * H * W, Cg, H, W,
                             kh, kw, stride, pad, Ho, Wo, cols.data());
              detail::ECMap<T> Cm(cols.data(), K, Ho * Wo);
              detail::EMap<T> dW(sw->g.data() + g * cog * K, cog, K);
              dW.noalias() += dY * Cm.transpose();
            }
            if (tx) {
              detail::ECMap<T> Wm(sw->v.data() + g * cog * K, cog, K);
              detail::EMap<T> dC(dcols.data(), K, Ho * Wo);
              dC.noalias() = Wm.transpose() * dY;
              detail::col2im_add(dcols.data(), Cg, H, W, kh, kw, stride, pad,
                                 Ho, Wo, sx->g.data() + (n * C + g * Cg) * H * W);
            }
          }
      });
  return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, Dim stride, Dim pad,
                  Dim groups = 1) {
  return conv2d(x, w, TensorT<T>(), stride, pad, groups);
}

// ---------------------------------------------------------------------------
// pool2d. Max ignores padding; avg divides by the count of in-bounds window
// elements (equal to w*w whenever pad = 0).

enum class PoolMode { kMax, kAvg };

template <typename T>
TensorT<T> pool2d(const TensorT<T>& x, PoolMode mode, Dim win, Dim stride,
                  Dim pad = 0) {
  if (x.rank() != 4) fail("pool2d: input must be NCHW, got " + shape_str(x.shape()));
  if (win < 1 || stride < 1) fail("pool2d: window and stride must be >= 1");
  if (pad < 0 || pad >= win) fail("pool2d: padding must be in [0, window)");
  Dim N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H + 2 * pad < win || W + 2 * pad < win)
    fail("pool2d: window " + std::to_string(win) + " exceeds padded input " +
         std::to_string(H + 2 * pad) + "x" + std::to_string(W + 2 * pad));
  Dim Ho = (H + 2 * pad - win) / stride + 1;
  Dim Wo = (W + 2 * pad - win) / stride + 1;

  TensorT<T> out({N, C, Ho, Wo});
  const T* xp = x.data().data();
  T* op = out.mut().data();
  auto argmax = std::make_shared<std::vector<std::int32_t>>();
  if (mode == PoolMode::kMax) argmax->resize(static_cast<size_t>(out.numel()));

  Dim plane = H * W, oplane = Ho * Wo;
  for (Dim nc = 0; nc < N * C; ++nc) {
    const T* src = xp + nc * plane;
    T* dst = op + nc * oplane;
    for (Dim oh = 0; oh < Ho; ++oh)
      for (Dim ow = 0; ow < Wo; ++ow) {
        Dim h0 = oh * stride - pad, w0 = ow * stride - pad;
        if (mode == PoolMode::kMax) {
          T best = -std::numeric_limits<T>::infinity();
          Dim best_idx = -1;
          for (Dim i = std::max<Dim>(0, h0); i < std::min(H, h0 + win); ++i)
            for (Dim j = std::max<Dim>(0, w0); j < std::min(W, w0 + win); ++j)
              if (src[i * W + j] > best) {
                best = src[i * W + j];
                best_idx = i * W + j;
              }
          dst[oh * Wo + ow] = best;
          (*argmax)[nc * oplane + oh * Wo + ow] = static_cast<std::int32_t>(best_idx);
        } else {
          double acc = 0;
          Dim cnt = 0;
          for (Dim i = std::max<Dim>(0, h0); i < std::min(H, h0 + win); ++i)
            for (Dim j = std::max<Dim>(0, w0); j < std::min(W, w0 + win); ++j) {
              acc += static_cast<double>(src[i * W + j]);
              ++cnt;
            }
          dst[oh * Wo + ow] = static_cast<T>(acc / cnt);
        }
      }
  }

  detail::record_if_tracked(
      out, x.tracked(),
      [sx = x.storage(), so = out.storage(), argmax, mode, N, C, H, W, Ho, Wo,
       win, stride, pad]() {
        if (so->g.empty()) return;
        detail::ensure_grad(sx);
        Dim plane = H * W, oplane = Ho * Wo;
        for (Dim nc = 0; nc < N * C; ++nc) {
          const T* gy = so->g.data() + nc * oplane;
          T* gx = sx->g.data() + nc * plane;
          for (Dim oh = 0; oh < Ho; ++oh)
            for (Dim ow = 0; ow < Wo; ++ow) {
              T gyv = gy[oh * Wo + ow];
              if (gyv == T(0)) continue;
              if (mode == PoolMode::kMax) {
                gx[(*argmax)[nc * oplane + oh * Wo + ow]] += gyv;
              } else {
                Dim h0 = oh * stride - pad, w0 = ow * stride - pad;
                Dim i0 = std::max<Dim>(0, h0), i1 = std::min(H, h0 + win);
                Dim j0 = std::max<Dim>(0, w0), j1 = std::min(W, w0 + win);
                T share = gyv / static_cast<T>((i1 - i0) * (j1 - j0));
                for (Dim i = i0; i < i1; ++i)
                  for (Dim j = j0; j < j1; ++j) gx[i * W + j] += share;
              }
            }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// normalization

// Layer norm over the trailing feature axis.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1) fail("layer_norm: scalar input");
  Dim d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    fail("layer_norm: affine parameters must match feature axis " + std::to_string(d));
  Dim rows = x.numel() / d;
  TensorT<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* xp = x.data().data();
  const T* gp = gamma.data().data();
  const T* bp = beta.data().data();
  T* op = out.mut().data();
  for (Dim r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    double mean = 0;
    for (Dim j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
    mean /= d;
    double var = 0;
    for (Dim j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*invstd)[r] = is;
    for (Dim j = 0; j < d; ++j) {
      T xh = (row[j] - static_cast<T>(mean)) * is;
      (*xhat)[r * d + j] = xh;
      op[r * d + j] = xh * gp[j] + bp[j];
    }
  }

  bool txx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
  detail::record_if_tracked(
      out, txx || tg || tb,
      [sx = x.storage(), sg = gamma.storage(), sb = beta.storage(),
       so = out.storage(), xhat, invstd, rows, d, txx, tg, tb]() {
        if (so->g.empty()) return;
        if (txx) detail::ensure_grad(sx);
        if (tg) detail::ensure_grad(sg);
        if (tb) detail::ensure_grad(sb);
        for (Dim r = 0; r < rows; ++r) {
          const T* gy = so->g.data() + r * d;
          const T* xh = xhat->data() + r * d;
          if (tg || tb)
            for (Dim j = 0; j < d; ++j) {
              if (tg) sg->g[j] += gy[j] * xh[j];
              if (tb) sb->g[j] += gy[j];
            }
          if (txx) {
            double m1 = 0, m2 = 0;
            for (Dim j = 0; j < d; ++j) {
              double gj = static_cast<double>(gy[j]) * sg->v[j];
              m1 += gj;
              m2 += gj * xh[j];
            }
            m1 /= d;
            m2 /= d;
            T is = (*invstd)[r];
            T* gx = sx->g.data() + r * d;
            for (Dim j = 0; j < d; ++j) {
              double gj = static_cast<double>(gy[j]) * sg->v[j];
              gx[j] += static_cast<T>((gj - m1 - xh[j] * m2) * is);
            }
          }
        }
      });
  return out;
}

// Batch norm over (N, H, W) per channel. Training mode uses population batch
// statistics (divisor N*H*W) and updates the running buffers in place;
// evaluation mode applies the running statistics. N >= 2 required in training.
template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, TensorT<T>& running_mean,
                      TensorT<T>& running_var, bool training,
                      T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) fail("batch_norm: input must be NCHW, got " + shape_str(x.shape()));
  Dim N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    fail("batch_norm: parameter extents must match channel axis 1 (= " +
         std::to_string(C) + ")");
  if (training && N < 2)
    fail("batch_norm: training mode requires batch axis 0 >= 2, got " +
         std::to_string(N));

  Dim plane = H * W;
  Dim cnt = N * plane;
  TensorT<T> out(x.shape());
  const T* xp = x.data().data();
  const T* gp = gamma.data().data();
  const T* bp = beta.data().data();
  T* op = out.mut().data();

  std::vector<T> mean(C), var(C);
  if (training) {
    for (Dim c = 0; c < C; ++c) {
      double m = 0;
      for (Dim n = 0; n < N; ++n) {
        const T* src = xp + (n * C + c) * plane;
        for (Dim i = 0; i < plane; ++i) m += static_cast<double>(src[i]);
      }
      m /= cnt;
      double v = 0;
      for (Dim n = 0; n < N; ++n) {
        const T* src = xp + (n * C + c) * plane;
        for (Dim i = 0; i < plane; ++i) {
          double d = src[i] - m;
          v += d * d;
        }
      }
      v /= cnt;
      mean[c] = static_cast<T>(m);
      var[c] = static_cast<T>(v);
    }
    auto rm = running_mean.mut();
    auto rv = running_var.mut();
    for (Dim c = 0; c < C; ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mean[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * var[c];
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (Dim c = 0; c < C; ++c) {
      mean[c] = rm[c];
      var[c] = rv[c];
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  std::vector<T> invstd(C);
  for (Dim c = 0; c < C; ++c)
    invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) +
                                               static_cast<double>(eps)));
  for (Dim n = 0; n < N; ++n)
    for (Dim c = 0; c < C; ++c) {
      const T* src = xp + (n * C + c) * plane;
      T* xh = xhat->data() + (n * C + c) * plane;
      T* dst = op + (n * C + c) * plane;
      for (Dim i = 0; i < plane; ++i) {
        xh[i] = (src[i] - mean[c]) * invstd[c];
        dst[i] = xh[i] * gp[c] + bp[c];
      }
    }

  bool txx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
  detail::record_if_tracked(
      out, txx || tg || tb,
      [sx = x.storage(), sg = gamma.storage(), sb = beta.storage(),
       so = out.storage(), xhat, invstd, N, C, plane, training, txx, tg, tb]() {
        if (so->g.empty()) return;
        if (txx) detail::ensure_grad(sx);
        if (tg) detail::ensure_grad(sg);
        if (tb) detail::ensure_grad(sb);
        Dim cnt = N * plane;
        for (Dim c = 0; c < C; ++c) {
          double dg = 0, db = 0;
          for (Dim n = 0; n < N; ++n) {
            const T* gy = so->g.data() + (n * C + c) * plane;
            const T* xh = xhat->data() + (n * C + c) * plane;
            for (Dim i = 0; i < plane; ++i) {
              dg += static_cast<double>(gy[i]) * xh[i];
              db += static_cast<double>(gy[i]);
            }
          }
          if (tg) sg->g[c] += static_cast<T>(dg);
          if (tb) sb->g[c] += static_cast<T>(db);
          if (!txx) continue;
          T gam = sg->v[c], is = invstd[c];
          if (training) {
            double m_dy = db / cnt, m_dyxh = dg / cnt;
            for (Dim n = 0; n < N; ++n) {
              const T* gy = so->g.data() + (n * C + c) * plane;
              const T* xh = xhat->data() + (n * C + c) * plane;
              T* gx = sx->g.data() + (n * C + c) * plane;
              for (Dim i = 0; i < plane; ++i)
                gx[i] += static_cast<T>(
                    gam * is *
                    (gy[i] - m_dy - xh[i] * m_dyxh));
            }
          } else {
            for (Dim n = 0; n < N; ++n) {
              const T* gy = so->g.data() + (n * C + c) * plane;
              T* gx = sx->g.data() + (n * C + c) * plane;
              for (Dim i = 0; i < plane; ++i) gx[i] += gam * is * gy[i];
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// channel concat / slice

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) fail("concat_channels: no inputs");
  Dim N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  Dim C = 0;
  for (const auto& p : parts) {
    if (p.rank() != 4) fail("concat_channels: inputs must be NCHW");
    if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W)
      fail("concat_channels: spatial/batch mismatch: " + shape_str(parts[0].shape()) +
           " vs " + shape_str(p.shape()));
    C += p.dim(1);
  }
  TensorT<T> out({N, C, H, W});
  T* op = out.mut().data();
  Dim plane = H * W;
  Dim coff = 0;
  bool any = false;
  for (const auto& p : parts) {
    Dim pc = p.dim(1);
    const T* src = p.data().data();
    for (Dim n = 0; n < N; ++n)
      std::copy(src + n * pc * plane, src + (n + 1) * pc * plane,
                op + (n * C + coff) * plane);
    coff += pc;
    any = any || p.tracked();
  }

  std::vector<std::shared_ptr<Storage<T>>> stores;
  std::vector<Dim> chans;
  std::vector<bool> tracked;
  for (const auto& p : parts) {
    stores.push_back(p.storage());
    chans.push_back(p.dim(1));
    tracked.push_back(p.tracked());
  }
  detail::record_if_tracked(out, any, [stores, chans, tracked, so = out.storage(),
                                       N, C, plane]() {
    if (so->g.empty()) return;
    Dim coff = 0;
    for (size_t k = 0; k < stores.size(); ++k) {
      Dim pc = chans[k];
      if (tracked[k]) {
        detail::ensure_grad(stores[k]);
        for (Dim n = 0; n < N; ++n) {
          const T* gy = so->g.data() + (n * C + coff) * plane;
          T* gx = stores[k]->g.data() + n * pc * plane;
          for (Dim i = 0; i < pc * plane; ++i) gx[i] += gy[i];
        }
      }
      coff += pc;
    }
  });
  return out;
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& x, Dim c0, Dim c1) {
  if (x.rank() != 4) fail("slice_channels: input must be NCHW");
  Dim N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1)
    fail("slice_channels: invalid channel range [" + std::to_string(c0) + "," +
         std::to_string(c1) + ") for axis 1 extent " + std::to_string(C));
  Dim pc = c1 - c0, plane = H * W;
  TensorT<T> out({N, pc, H, W});
  const T* xp = x.data().data();
  T* op = out.mut().data();
  for (Dim n = 0; n < N; ++n)
    std::copy(xp + (n * C + c0) * plane, xp + (n * C + c1) * plane,
              op + n * pc * plane);
  detail::record_if_tracked(out, x.tracked(),
                            [sx = x.storage(), so = out.storage(), N, C, c0, pc,
                             plane]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sx);
                              for (Dim n = 0; n < N; ++n) {
                                const T* gy = so->g.data() + n * pc * plane;
                                T* gx = sx->g.data() + (n * C + c0) * plane;
                                for (Dim i = 0; i < pc * plane; ++i)
                                  gx[i] += gy[i];
                              }
                            });
  return out;
}

// ---------------------------------------------------------------------------
// gather: out[i] = x[map[i]] for a precomputed index map (used for layout
// permutations such as token folding and window partitioning; backward is a
// scatter-add, exact for bijective maps)

template <typename T>
TensorT<T> gather(const TensorT<T>& x, std::shared_ptr<const std::vector<Dim>> map,
                  Shape out_shape) {
  if (static_cast<Dim>(map->size()) != numel_of(out_shape))
    fail("gather: index map size does not match output shape " + shape_str(out_shape));
  TensorT<T> out(std::move(out_shape));
  auto xv = x.data();
  auto ov = out.mut();
  const Dim* mp = map->data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[mp[i]];
  detail::record_if_tracked(out, x.tracked(),
                            [sx = x.storage(), so = out.storage(), map]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sx);
                              const Dim* mp = map->data();
                              for (size_t i = 0; i < so->g.size(); ++i)
                                sx->g[mp[i]] += so->g[i];
                            });
  return out;
}

// ---------------------------------------------------------------------------
// broadcast ops used by the attention head and fusion gate

// x [G, R, C] + bias [Hh, R, C], where group g uses bias row g % Hh.
template <typename T>
TensorT<T> add_bias_rows(const TensorT<T>& x, const TensorT<T>& bias) {
  if (x.rank() != 3 || bias.rank() != 3)
    fail("add_bias_rows: expects rank-3 operands");
  Dim G = x.dim(0), R = x.dim(1), C = x.dim(2), Hh = bias.dim(0);
  if (bias.dim(1) != R || bias.dim(2) != C || G % Hh)
    fail("add_bias_rows: bias " + shape_str(bias.shape()) +
         " incompatible with " + shape_str(x.shape()));
  TensorT<T> out(x.shape());
  auto xv = x.data();
  auto bv = bias.data();
  auto ov = out.mut();
  Dim plane = R * C;
  for (Dim g = 0; g < G; ++g) {
    const T* b = bv.data() + (g % Hh) * plane;
    const T* s = xv.data() + g * plane;
    T* d = ov.data() + g * plane;
    for (Dim i = 0; i < plane; ++i) d[i] = s[i] + b[i];
  }
  bool txx = x.tracked(), tb = bias.tracked();
  detail::record_if_tracked(
      out, txx || tb,
      [sx = x.storage(), sb = bias.storage(), so = out.storage(), G, Hh, plane,
       txx, tb]() {
        if (so->g.empty()) return;
        if (txx) {
          detail::ensure_grad(sx);
          for (size_t i = 0; i < so->g.size(); ++i) sx->g[i] += so->g[i];
        }
        if (tb) {
          detail::ensure_grad(sb);
          for (Dim g = 0; g < G; ++g) {
            const T* gy = so->g.data() + g * plane;
            T* gb = sb->g.data() + (g % Hh) * plane;
            for (Dim i = 0; i < plane; ++i) gb[i] += gy[i];
          }
        }
      });
  return out;
}

// x [N, C, H, W] * gate [N, 1, H, W], broadcast over channels
template <typename T>
TensorT<T> mul_gate(const TensorT<T>& x, const TensorT<T>& gate) {
  if (x.rank() != 4 || gate.rank() != 4)
    fail("mul_gate: expects NCHW operands");
  Dim N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gate.dim(0) != N || gate.dim(1) != 1 || gate.dim(2) != H || gate.dim(3) != W)
    fail("mul_gate: gate must be [N,1,H,W] matching " + shape_str(x.shape()) +
         ", got " + shape_str(gate.shape()));
  TensorT<T> out(x.shape());
  const T* xp = x.data().data();
  const T* gp = gate.data().data();
  T* op = out.mut().data();
  Dim plane = H * W;
  for (Dim n = 0; n < N; ++n)
    for (Dim c = 0; c < C; ++c) {
      const T* g = gp + n * plane;
      const T* s = xp + (n * C + c) * plane;
      T* d = op + (n * C + c) * plane;
      for (Dim i = 0; i < plane; ++i) d[i] = s[i] * g[i];
    }
  bool txx = x.tracked(), tg = gate.tracked();
  detail::record_if_tracked(
      out, txx || tg,
      [sx = x.storage(), sg = gate.storage(), so = out.storage(), N, C, plane,
       txx, tg]() {
        if (so->g.empty()) return;
        if (txx) detail::ensure_grad(sx);
        if (tg) detail::ensure_grad(sg);
        for (Dim n = 0; n < N; ++n) {
          for (Dim i = 0; i < plane; ++i) {
            double acc = 0;
            for (Dim c = 0; c < C; ++c) {
              Dim idx = (n * C + c) * plane + i;
              if (txx) sx->g[idx] += so->g[idx] * sg->v[n * plane + i];
              acc += static_cast<double>(so->g[idx]) * sx->v[idx];
            }
            if (tg) sg->g[n * plane + i] += static_cast<T>(acc);
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  TensorT<T> out(Shape{1});
  double acc = 0;
  for (T v : x.data()) acc += static_cast<double>(v);
  out.mut()[0] = static_cast<T>(acc);
  detail::record_if_tracked(out, x.tracked(),
                            [sx = x.storage(), so = out.storage()]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sx);
                              T g = so->g[0];
                              for (auto& gi : sx->g) gi += g;
                            });
  return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
  Dim n = x.numel();
  if (n == 0) fail("mean: empty tensor");
  TensorT<T> out(Shape{1});
  double acc = 0;
  for (T v : x.data()) acc += static_cast<double>(v);
  out.mut()[0] = static_cast<T>(acc / n);
  detail::record_if_tracked(out, x.tracked(),
                            [sx = x.storage(), so = out.storage(), n]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sx);
                              T g = so->g[0] / static_cast<T>(n);
                              for (auto& gi : sx->g) gi += g;
                            });
  return out;
}

// global average pool: [N, C, H, W] -> [N, C]
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  if (x.rank() != 4) fail("global_avg_pool: input must be NCHW");
  Dim N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  TensorT<T> out({N, C});
  const T* xp = x.data().data();
  T* op = out.mut().data();
  for (Dim nc = 0; nc < N * C; ++nc) {
    double acc = 0;
    const T* src = xp + nc * plane;
    for (Dim i = 0; i < plane; ++i) acc += static_cast<double>(src[i]);
    op[nc] = static_cast<T>(acc / plane);
  }
  detail::record_if_tracked(out, x.tracked(),
                            [sx = x.storage(), so = out.storage(), N, C, plane]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sx);
                              for (Dim nc = 0; nc < N * C; ++nc) {
                                T g = so->g[nc] / static_cast<T>(plane);
                                T* gx = sx->g.data() + nc * plane;
                                for (Dim i = 0; i < plane; ++i) gx[i] += g;
                              }
                            });
  return out;
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling: kept activations are scaled by 1/(1-rate) during
// training so evaluation is the identity)

template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = rng.uniform() >= rate ? keep_scale : T(0);
  TensorT<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * (*mask)[i];
  detail::record_if_tracked(out, x.tracked(),
                            [sx = x.storage(), so = out.storage(), mask]() {
                              if (so->g.empty()) return;
                              detail::ensure_grad(sx);
                              for (size_t i = 0; i < so->g.size(); ++i)
                                sx->g[i] += so->g[i] * (*mask)[i];
                            });
  return out;
}

// ---------------------------------------------------------------------------
// cross-entropy from logits via log-sum-exp; mean over the batch of
// -w_c * log p(true class)

template <typename T>
TensorT<T> cross_entropy_logits(const TensorT<T>& logits,
                                const std::vector<int>& labels,
                                const std::vector<double>& class_weights = {}) {
  if (logits.rank() != 2) fail("cross_entropy: logits must be [N, K]");
  Dim N = logits.dim(0), K = logits.dim(1);
  if (static_cast<Dim>(labels.size()) != N)
    fail("cross_entropy: " + std::to_string(labels.size()) + " labels for batch axis " +
         std::to_string(N));
  if (!class_weights.empty() && static_cast<Dim>(class_weights.size()) != K)
    fail("cross_entropy: class weight extent must equal " + std::to_string(K));
  for (int y : labels)
    if (y < 0 || y >= K)
      fail("cross_entropy: label " + std::to_string(y) + " outside [0, " +
           std::to_string(K) + ")");

  auto w = std::make_shared<std::vector<double>>(
      class_weights.empty() ? std::vector<double>(K, 1.0) : class_weights);
  auto lbl = std::make_shared<std::vector<int>>(labels);

  const T* lp = logits.data().data();
  double total = 0;
  for (Dim n = 0; n < N; ++n) {
    const T* row = lp + n * K;
    double m = row[0];
    for (Dim j = 1; j < K; ++j) m = std::max<double>(m, row[j]);
    double denom = 0;
    for (Dim j = 0; j < K; ++j) denom += std::exp(static_cast<double>(row[j]) - m);
    double lse = m + std::log(denom);
    total += (*w)[labels[n]] * (lse - static_cast<double>(row[labels[n]]));
  }
  TensorT<T> out(Shape{1});
  out.mut()[0] = static_cast<T>(total / N);

  detail::record_if_tracked(
      out, logits.tracked(),
      [sl = logits.storage(), so = out.storage(), w, lbl, N, K]() {
        if (so->g.empty()) return;
        detail::ensure_grad(sl);
        T gy = so->g[0];
        for (Dim n = 0; n < N; ++n) {
          const T* row = sl->v.data() + n * K;
          double m = row[0];
          for (Dim j = 1; j < K; ++j) m = std::max<double>(m, row[j]);
          double denom = 0;
          for (Dim j = 0; j < K; ++j)
            denom += std::exp(static_cast<double>(row[j]) - m);
          double wn = (*w)[(*lbl)[n]] / N;
          for (Dim j = 0; j < K; ++j) {
            double p = std::exp(static_cast<double>(row[j]) - m) / denom;
            double delta = (j == (*lbl)[n]) ? 1.0 : 0.0;
            sl->g[n * K + j] += gy * static_cast<T>(wn * (p - delta));
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// backward driver

template <typename T>
void backward(TensorT<T>& loss) {
  if (loss.numel() != 1)
    fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
  Tape<T>* tape = Tape<T>::current();
  if (!tape) fail("backward: no active tape");
  detail::ensure_grad(loss.storage());
  loss.storage()->g[0] += T(1);
  tape->run_backward();
}

// ---------------------------------------------------------------------------
// initialization helpers

template <typename T>
void fill_normal(TensorT<T>& t, Rng& rng, double stddev) {
  for (auto& v : t.mut()) v = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
void fill_uniform(TensorT<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.mut()) v = static_cast<T>(rng.uniform(lo, hi));
}

// Kaiming fan-in scaling for ReLU-family layers: N(0, sqrt(2 / fan_in)).
template <typename T>
void kaiming_init(TensorT<T>& t, Rng& rng, Dim fan_in) {
  if (fan_in < 1) fail("kaiming_init: fan_in must be positive");
  fill_normal(t, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace cers
