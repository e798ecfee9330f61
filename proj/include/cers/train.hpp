#pragma once

// Training engine: weighted cross-entropy on logits, bias-corrected Adam,
// stepped learning-rate schedule, and the epoch loop with online
// augmentation, per-epoch validation, and best-checkpoint retention.

#include <cmath>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cers/augment.hpp"
#include "cers/data.hpp"
#include "cers/model.hpp"
#include "cers/tensor.hpp"

namespace cers {

inline double lr_at_epoch(Dim epoch, const TrainConfig& cfg) {
  if (epoch < 0) fail("lr_at_epoch: epoch must be >= 0");
  const Dim k = epoch / cfg.lr_decay_every;
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(k));
}

template <typename T>
class Adam {
 public:
  explicit Adam(ParameterStore<T>& store, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : store_(store), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (size_t i = 0; i < store.entries().size(); ++i) {
      if (!store.entries()[i].trainable) continue;
      trainable_.push_back(i);
      const size_t n = static_cast<size_t>(store.entries()[i].tensor.numel());
      m_.emplace_back(n, T(0));
      v_.emplace_back(n, T(0));
    }
  }

  Dim steps() const { return t_; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < trainable_.size(); ++k) {
      auto& e = store_.entries()[trainable_[k]];
      if (!e.tensor.has_grad())
        fail("adam: missing gradient for parameter " + e.name);
      auto g = e.tensor.grad();
      auto p = e.tensor.mut();
      auto& m = m_[k];
      auto& v = v_[k];
      for (size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<T>(beta1_ * m[i] + (1.0 - beta1_) * gi);
        v[i] = static_cast<T>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  ParameterStore<T>& store_;
  std::vector<size_t> trainable_;
  std::vector<std::vector<T>> m_, v_;
  Dim t_ = 0;
  double beta1_, beta2_, eps_;
};

// Stacks dataset images (optionally augmented) into one [B,1,S,S] batch.
template <typename T>
TensorT<T> stack_images(const std::vector<Tensor>& imgs) {
  if (imgs.empty()) fail("stack: empty batch");
  Shape s = imgs[0].shape();
  Shape out_shape = {static_cast<Dim>(imgs.size()), s[0], s[1], s[2]};
  TensorT<T> out(out_shape);
  auto d = out.mut();
  size_t off = 0;
  for (const auto& img : imgs) {
    if (img.shape() != s) fail("stack: ragged image shapes in batch");
    auto v = img.data();
    for (size_t i = 0; i < v.size(); ++i) d[off + i] = static_cast<T>(v[i]);
    off += v.size();
  }
  return out;
}

inline std::vector<double> class_weights_for(const Dataset& train, Dim k,
                                             const std::string& mode) {
  if (mode == "none") return {};
  std::vector<Dim> counts(static_cast<size_t>(k), 0);
  for (const auto& s : train.samples) ++counts[static_cast<size_t>(s.label)];
  std::vector<double> w(static_cast<size_t>(k), 0.0);
  const double n = static_cast<double>(train.samples.size());
  for (Dim c = 0; c < k; ++c) {
    if (counts[static_cast<size_t>(c)] == 0)
      fail("train: class '" + train.class_names[static_cast<size_t>(c)] +
           "' missing from the training split");
    w[static_cast<size_t>(c)] =
        n / (static_cast<double>(k) * counts[static_cast<size_t>(c)]);
  }
  return w;
}

template <typename T>
struct EvalOutput {
  std::vector<int> truth, pred;
  std::vector<std::vector<double>> scores;       // [N][K] probabilities
  std::vector<std::vector<double>> penultimate;  // [N][C] pooled features
  double mean_loss = 0;
  double accuracy = 0;
};

template <typename T>
EvalOutput<T> evaluate_model(const ModelT<T>& model, const Dataset& ds, Dim batch,
                             const std::vector<double>& weights = {}) {
  if (ds.samples.empty()) fail("evaluate: empty dataset");
  if (batch < 1) fail("evaluate: batch size must be >= 1");
  EvalOutput<T> out;
  const Dim k = model.config().model.num_classes;
  double loss_sum = 0;
  Dim correct = 0;
  for (size_t start = 0; start < ds.samples.size(); start += static_cast<size_t>(batch)) {
    const size_t end = std::min(ds.samples.size(), start + static_cast<size_t>(batch));
    std::vector<Tensor> imgs;
    std::vector<int> labels;
    for (size_t i = start; i < end; ++i) {
      imgs.push_back(ds.samples[i].image);
      labels.push_back(ds.samples[i].label);
    }
    auto x = stack_images<T>(imgs);
    auto o = model.forward(x, false);
    auto loss = cross_entropy_logits(o.logits, labels, weights);
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(labels.size());
    auto probs = o.probabilities.data();
    auto feats = o.penultimate.data();
    const Dim fw = o.penultimate.dim(1);
    for (size_t i = 0; i < labels.size(); ++i) {
      std::vector<double> row(static_cast<size_t>(k));
      int arg = 0;
      for (Dim c = 0; c < k; ++c) {
        row[static_cast<size_t>(c)] = static_cast<double>(probs[i * k + c]);
        if (probs[i * k + c] > probs[i * k + arg]) arg = static_cast<int>(c);
      }
      out.scores.push_back(std::move(row));
      out.pred.push_back(arg);
      out.truth.push_back(labels[i]);
      if (arg == labels[i]) ++correct;
      std::vector<double> f(static_cast<size_t>(fw));
      for (Dim c = 0; c < fw; ++c) f[static_cast<size_t>(c)] = feats[i * fw + c];
      out.penultimate.push_back(std::move(f));
    }
  }
  out.mean_loss = loss_sum / static_cast<double>(ds.samples.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(ds.samples.size());
  return out;
}

struct TrainLogRow {
  Dim epoch = 0;
  double lr = 0, train_loss = 0, val_loss = 0, val_acc = 0;
};

struct FitResult {
  std::vector<TrainLogRow> log;
  double best_val_acc = -1;
  Dim best_epoch = -1;
};

inline void write_train_log_csv(const std::vector<TrainLogRow>& log,
                                const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("train log: cannot write " + path);
  f << "epoch,lr,train_loss,val_loss,val_acc\n";
  f.precision(10);
  for (const auto& r : log)
    f << r.epoch << "," << r.lr << "," << r.train_loss << "," << r.val_loss << ","
      << r.val_acc << "\n";
}

template <typename T>
FitResult fit(ModelT<T>& model, const Dataset& train, const Dataset& val,
              const RunConfig& cfg, std::ostream* progress = nullptr) {
  const Dim k = model.config().model.num_classes;
  const auto weights = class_weights_for(train, k, cfg.train.class_weighting);
  Adam<T> opt(model.params());
  Rng order_rng(cfg.train.seed + 1);
  Rng aug_rng(cfg.train.seed + 2);
  Rng drop_rng(cfg.train.seed + 3);

  // Optional per-class oversampling to the majority count; duplicates get
  // independent augmentations, so copies are not literal repeats.
  std::vector<size_t> base_indices(train.samples.size());
  for (size_t i = 0; i < base_indices.size(); ++i) base_indices[i] = i;
  if (cfg.augment.oversample) {
    std::vector<std::vector<size_t>> by_class(static_cast<size_t>(k));
    for (size_t i = 0; i < train.samples.size(); ++i)
      by_class[static_cast<size_t>(train.samples[i].label)].push_back(i);
    size_t target = 0;
    for (const auto& v : by_class) target = std::max(target, v.size());
    for (const auto& v : by_class)
      for (size_t j = 0; !v.empty() && j < target - v.size(); ++j)
        base_indices.push_back(v[j % v.size()]);
  }

  FitResult res;
  std::vector<std::vector<T>> best_snapshot;
  for (Dim epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg.train);
    auto indices = base_indices;
    order_rng.shuffle(indices);

    double loss_sum = 0;
    size_t seen = 0, batch_index = 0;
    for (size_t start = 0; start < indices.size();
         start += static_cast<size_t>(cfg.train.batch_size), ++batch_index) {
      const size_t end =
          std::min(indices.size(), start + static_cast<size_t>(cfg.train.batch_size));
      if (end - start < 2) continue;  // batch norm needs at least two samples
      std::vector<Tensor> imgs;
      std::vector<int> labels;
      for (size_t i = start; i < end; ++i) {
        const auto& smp = train.samples[indices[i]];
        Tensor img = smp.image;
        if (cfg.augment.enabled)
          img = apply_augmentation(img, sample_augmentation(aug_rng, cfg.augment));
        imgs.push_back(std::move(img));
        labels.push_back(smp.label);
      }
      auto x = stack_images<T>(imgs);

      for (auto& e : model.params().entries())
        if (e.trainable) e.tensor.drop_grad();
      TapeScope<T> scope;
      auto out = model.forward(x, true, &drop_rng);
      auto loss = cross_entropy_logits(out.logits, labels, weights);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        fail("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
             std::to_string(batch_index));
      backward(loss);
      opt.step(lr);
      loss_sum += lv * static_cast<double>(labels.size());
      seen += labels.size();
    }

    auto ev = evaluate_model(model, val, cfg.train.batch_size, weights);
    TrainLogRow row{epoch, lr, seen ? loss_sum / static_cast<double>(seen) : 0.0,
                    ev.mean_loss, ev.accuracy};
    res.log.push_back(row);
    if (progress)
      *progress << "epoch " << epoch << " lr " << lr << " train_loss " << row.train_loss
                << " val_loss " << row.val_loss << " val_acc " << row.val_acc << "\n";
    if (ev.accuracy > res.best_val_acc) {
      res.best_val_acc = ev.accuracy;
      res.best_epoch = epoch;
      best_snapshot = model.params().snapshot();
    }
  }
  if (res.best_epoch >= 0) model.params().restore(best_snapshot);
  return res;
}

}  // namespace cers
