#pragma once

// Full classifier: SBCIT backbone plus residual and spatial auxiliary
// streams, fused by channel concatenation and a spatial attention gate, then
// a global-average-pool classifier head.

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cers/backbone.hpp"
#include "cers/config.hpp"
#include "cers/fusion.hpp"
#include "cers/streams.hpp"

namespace cers {

struct DescribeRow {
  std::string module;
  Dim params = 0;
  Dim macs = 0;  // multiply-accumulates for one input image
};

struct DescribeReport {
  std::vector<DescribeRow> rows;
  Dim total_params = 0;
  Dim total_macs = 0;

  std::string to_string() const {
    size_t w = 6;
    for (const auto& r : rows) w = std::max(w, r.module.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(w)) << "module" << std::right
       << std::setw(14) << "params" << std::setw(16) << "macs" << "\n";
    for (const auto& r : rows)
      os << std::left << std::setw(static_cast<int>(w)) << r.module << std::right
         << std::setw(14) << r.params << std::setw(16) << r.macs << "\n";
    os << std::left << std::setw(static_cast<int>(w)) << "total" << std::right
       << std::setw(14) << total_params << std::setw(16) << total_macs << "\n";
    return os.str();
  }
};

template <typename T>
class ModelT {
 public:
  explicit ModelT(const RunConfig& cfg) : ModelT(cfg, cfg.train.seed + 101) {}

  ModelT(const RunConfig& cfg, std::uint32_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    const ModelConfig& m = cfg_.model;
    backbone_ = Backbone<T>::make(store_, rng, m.in_channels, m.stage_dims,
                                  m.stage_depths, m.stage_heads, m.window,
                                  m.kv_stride, m.expansion);
    rstream_ = ResidualStream<T>::make(store_, rng, m.stage_dims[0], m.residual_dims,
                                       static_cast<T>(m.dropout));
    sstream_ = SpatialStream<T>::make(store_, rng, m.in_channels, m.spatial_dims,
                                      m.stage_dims[3]);
    fused_width_ = m.residual_dims[3] + m.stage_dims[3] + m.stage_dims[3];
    sa_ = SpatialAttention<T>::make(store_, rng, "fusion.sa", fused_width_);
    head_ = ClassifierHead<T>::make(store_, rng, "head", fused_width_, m.num_classes,
                                    static_cast<T>(m.dropout));
  }

  struct Output {
    TensorT<T> logits, probabilities, penultimate;
  };

  struct ForwardHooks {
    std::vector<TensorT<T>>* attention = nullptr;  // per CIT block softmax maps
    TensorT<T>* gate = nullptr;                    // fusion gate [N,1,H,W]
    TensorT<T>* fused = nullptr;                   // concatenated pre-gate map
  };

  Output forward(const TensorT<T>& images, bool training, Rng* rng = nullptr,
                 ForwardHooks hooks = {}) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.model.in_channels ||
        images.dim(2) != cfg_.model.input_size || images.dim(3) != cfg_.model.input_size)
      fail("model: expected input [N," + std::to_string(cfg_.model.in_channels) + "," +
           std::to_string(cfg_.model.input_size) + "," +
           std::to_string(cfg_.model.input_size) + "], got " + shape_str(images.shape()));
    auto bb = backbone_.forward(images, training, hooks.attention);
    auto xr = rstream_.forward(bb.stem_out, training, rng);
    auto xs = sstream_.forward(images, training);
    auto z = channel_enhance(xr, xs, bb.stage_maps[3]);
    if (hooks.fused) *hooks.fused = z.detach();
    auto zg = sa_.forward(z, hooks.gate);
    auto out = head_.forward(zg, training, rng);
    return {out.logits, out.probabilities, out.penultimate};
  }

  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  const RunConfig& config() const { return cfg_; }
  Dim fused_width() const { return fused_width_; }

  const Backbone<T>& backbone() const { return backbone_; }
  const ResidualStream<T>& residual_stream() const { return rstream_; }
  const SpatialStream<T>& spatial_stream() const { return sstream_; }
  const SpatialAttention<T>& spatial_attention() const { return sa_; }
  const ClassifierHead<T>& head() const { return head_; }

  DescribeReport describe() const {
    const ModelConfig& m = cfg_.model;
    DescribeReport rep;
    auto params_with_prefix = [&](const std::string& p) {
      Dim n = 0;
      for (const auto& e : store_.entries())
        if (e.trainable && e.name.rfind(p, 0) == 0) n += e.tensor.numel();
      return n;
    };
    auto conv_macs = [](Dim cout, Dim cin_g, Dim k, Dim ho, Dim wo) {
      return cout * cin_g * k * k * ho * wo;
    };

    const Dim s0 = m.input_size / 2;  // stem output extent
    {
      Dim macs = conv_macs(m.stage_dims[0], m.in_channels, 3, s0, s0) +
                 2 * conv_macs(m.stage_dims[0], m.stage_dims[0], 3, s0, s0);
      rep.rows.push_back({"stem", params_with_prefix("stem."), macs});
    }
    for (int i = 0; i < 4; ++i) {
      const Dim din = i == 0 ? m.stage_dims[0] : m.stage_dims[i - 1];
      const Dim d = m.stage_dims[i], heads = m.stage_heads[i], dh = d / heads;
      const Dim g = m.input_size / (4 << i), t = g * g;
      const Dim we = std::min(m.window, g), nw = g / we;
      const Dim g2 = (g + 2 - 3) / m.kv_stride + 1;
      const Dim mh = std::max<Dim>(1, we / m.kv_stride);
      const Dim e = d * m.expansion;
      Dim macs = conv_macs(d, din, 3, g, g);  // patch embed
      Dim per_block = conv_macs(d, 1, 3, g, g)                      // LPU depthwise
                      + 4 * t * d * d                               // q,k,v,o projections
                      + 2 * conv_macs(d, 1, 3, g2, g2)              // k/v folding convs
                      + 2 * (nw * nw) * heads * (we * we) * (mh * mh) * dh  // qk, pv
                      + t * d * e + conv_macs(e, 1, 3, g, g) + t * e * d;   // feed-forward
      macs += m.stage_depths[i] * per_block;
      macs += conv_macs(d, d, 1, g, g);  // SB conv
      rep.rows.push_back({"backbone.stage" + std::to_string(i + 1),
                          params_with_prefix("backbone.stage" + std::to_string(i + 1) + "."),
                          macs});
    }
    {
      Dim macs = 0, cin = m.stage_dims[0];
      for (int i = 0; i < 4; ++i) {
        const Dim cout = m.residual_dims[i];
        const Dim r = s0 / (2 << i);  // extent after this block's stride
        const Dim k1 = (i % 2 == 0) ? 3 : 1;
        macs += conv_macs(cout, cin, k1, r, r) + conv_macs(cout, cout, 3, r, r) +
                conv_macs(cout, cin, 1, r, r);  // projection (always present, stride 2)
        cin = cout;
      }
      rep.rows.push_back({"residual", params_with_prefix("residual."), macs});
    }
    {
      Dim macs = 0, cin = m.in_channels;
      for (int i = 0; i < 5; ++i) {
        const Dim cout = m.spatial_dims[i];
        const Dim p = m.input_size / (1 << i);  // extent before this block's pool
        const Dim mid = std::max<Dim>(1, cin / 2);
        macs += conv_macs(mid, cin, 3, p, p) + conv_macs(cout, mid, 3, p, p);
        cin = cout;
      }
      const Dim f = m.input_size / 32;
      macs += conv_macs(m.stage_dims[3], cin, 1, f, f);
      rep.rows.push_back({"spatial", params_with_prefix("spatial."), macs});
    }
    {
      const Dim f = m.input_size / 32, c = fused_width_;
      Dim macs = conv_macs(c, c, 1, f, f) + conv_macs(c, 1, 3, f, f) +
                 conv_macs(c, c, 1, f, f) + conv_macs(1, c, 1, f, f);
      rep.rows.push_back({"fusion", params_with_prefix("fusion."), macs});
    }
    rep.rows.push_back({"head", params_with_prefix("head."), fused_width_ * m.num_classes});

    for (const auto& r : rep.rows) {
      rep.total_params += r.params;
      rep.total_macs += r.macs;
    }
    return rep;
  }

 private:
  RunConfig cfg_;
  ParameterStore<T> store_;
  Backbone<T> backbone_;
  ResidualStream<T> rstream_;
  SpatialStream<T> sstream_;
  SpatialAttention<T> sa_;
  ClassifierHead<T> head_;
  Dim fused_width_ = 0;
};

using Model = ModelT<float>;

}  // namespace cers
