#pragma once

// Evaluation stack: confusion matrix, one-vs-rest scalar metrics with a 95%
// confidence interval, threshold-swept ROC/PR curves with trapezoidal AUC,
// and a 2-D PCA projection of penultimate features.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cers/params.hpp"
#include "cers/tensor.hpp"

namespace cers {

struct ConfusionMatrix {
  Dim k = 0;
  std::vector<Dim> counts;  // row-major, rows = true class, cols = predicted
  std::vector<std::string> class_names;

  static ConfusionMatrix make(const std::vector<int>& truth,
                              const std::vector<int>& pred, Dim k,
                              std::vector<std::string> names = {}) {
    if (truth.size() != pred.size())
      fail("confusion_matrix: " + std::to_string(truth.size()) + " labels vs " +
           std::to_string(pred.size()) + " predictions");
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts.assign(static_cast<size_t>(k * k), 0);
    cm.class_names = std::move(names);
    for (size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] < 0 || truth[i] >= k || pred[i] < 0 || pred[i] >= k)
        fail("confusion_matrix: label outside [0, " + std::to_string(k) + ") at row " +
             std::to_string(i));
      ++cm.counts[static_cast<size_t>(truth[i] * k + pred[i])];
    }
    return cm;
  }

  Dim at(Dim t, Dim p) const { return counts[static_cast<size_t>(t * k + p)]; }
  Dim total() const {
    Dim n = 0;
    for (Dim c : counts) n += c;
    return n;
  }
};

struct ClassMetrics {
  Dim tp = 0, tn = 0, fp = 0, fn = 0;
  double accuracy = 0, sensitivity = 0, precision = 0, specificity = 0, f1 = 0;
  bool degenerate = false;  // some denominator was zero and reported as 0
};

struct MetricsReport {
  ConfusionMatrix cm;
  std::vector<ClassMetrics> per_class;
  ClassMetrics macro;
  double overall_accuracy = 0;
  double ci95_half_width = 0;  // on the overall error rate
  std::vector<std::optional<double>> roc_auc, pr_auc;   // per class, absent if undefined
  std::optional<double> roc_auc_macro, pr_auc_macro;
};

inline double confidence_interval(double error_rate, Dim n) {
  if (n <= 0) fail("confidence_interval: n must be positive");
  if (error_rate < 0 || error_rate > 1)
    fail("confidence_interval: error rate must be in [0,1]");
  return 1.96 * std::sqrt(error_rate * (1.0 - error_rate) / static_cast<double>(n));
}

// One-vs-rest scalar metrics from a confusion matrix. Zero denominators give
// 0 with the degenerate flag set instead of NaN.
inline MetricsReport basic_metrics(const ConfusionMatrix& cm) {
  MetricsReport rep;
  rep.cm = cm;
  const Dim n = cm.total();
  if (n == 0) fail("basic_metrics: empty confusion matrix");
  auto rate = [](Dim num, Dim den, bool& degen) -> double {
    if (den == 0) {
      degen = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  Dim diag = 0;
  for (Dim c = 0; c < cm.k; ++c) diag += cm.at(c, c);
  rep.overall_accuracy = static_cast<double>(diag) / static_cast<double>(n);
  rep.ci95_half_width = confidence_interval(1.0 - rep.overall_accuracy, n);

  for (Dim c = 0; c < cm.k; ++c) {
    ClassMetrics m;
    m.tp = cm.at(c, c);
    for (Dim t = 0; t < cm.k; ++t)
      for (Dim p = 0; p < cm.k; ++p) {
        if (t == c && p != c) m.fn += cm.at(t, p);
        if (t != c && p == c) m.fp += cm.at(t, p);
        if (t != c && p != c) m.tn += cm.at(t, p);
      }
    m.accuracy = rate(m.tp + m.tn, n, m.degenerate);
    m.sensitivity = rate(m.tp, m.tp + m.fn, m.degenerate);
    m.precision = rate(m.tp, m.tp + m.fp, m.degenerate);
    m.specificity = rate(m.tn, m.tn + m.fp, m.degenerate);
    bool fdeg = false;
    const double pr2 = 2.0 * m.precision * m.sensitivity;
    m.f1 = (m.precision + m.sensitivity) > 0 ? pr2 / (m.precision + m.sensitivity) : 0.0;
    if ((m.precision + m.sensitivity) <= 0) fdeg = true;
    m.degenerate = m.degenerate || fdeg;
    rep.per_class.push_back(m);
  }
  // Unweighted macro averages.
  for (const auto& m : rep.per_class) {
    rep.macro.accuracy += m.accuracy;
    rep.macro.sensitivity += m.sensitivity;
    rep.macro.precision += m.precision;
    rep.macro.specificity += m.specificity;
    rep.macro.f1 += m.f1;
    rep.macro.degenerate = rep.macro.degenerate || m.degenerate;
  }
  const double kf = static_cast<double>(cm.k);
  rep.macro.accuracy /= kf;
  rep.macro.sensitivity /= kf;
  rep.macro.precision /= kf;
  rep.macro.specificity /= kf;
  rep.macro.f1 /= kf;
  return rep;
}

struct CurvePoint {
  double threshold = 0, x = 0, y = 0;
};

struct ClassCurves {
  std::vector<CurvePoint> roc;  // x = FPR, y = TPR
  std::vector<CurvePoint> pr;   // x = recall, y = precision
  std::optional<double> roc_auc, pr_auc;
};

// One-vs-rest threshold sweep for a single class. Equal scores collapse into
// one threshold step, which makes the trapezoidal ROC area equal the
// pair-ordering (Mann-Whitney) statistic with ties counted half.
inline ClassCurves binary_curves(const std::vector<int>& truth,
                                 const std::vector<double>& score, int positive) {
  if (truth.size() != score.size()) fail("curves: labels/scores length mismatch");
  Dim pos = 0, neg = 0;
  for (int t : truth) (t == positive ? pos : neg)++;
  ClassCurves out;
  if (pos == 0 || neg == 0) return out;  // AUC undefined for a single class

  std::vector<size_t> order(truth.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return score[a] > score[b]; });

  out.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  Dim tp = 0, fp = 0;
  double roc_area = 0, pr_area = 0;
  double prev_fpr = 0, prev_tpr = 0;
  double prev_recall = 0, prev_precision = 1.0;
  bool have_pr_prev = false;
  size_t i = 0;
  while (i < order.size()) {
    const double th = score[order[i]];
    while (i < order.size() && score[order[i]] == th) {
      (truth[order[i]] == positive ? tp : fp)++;
      ++i;
    }
    const double tpr = static_cast<double>(tp) / pos;
    const double fpr = static_cast<double>(fp) / neg;
    const double recall = tpr;
    const double precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    out.roc.push_back({th, fpr, tpr});
    out.pr.push_back({th, recall, precision});
    roc_area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    if (!have_pr_prev) {
      // Anchor the PR curve at recall 0 with the first observed precision.
      prev_recall = 0;
      prev_precision = precision;
      have_pr_prev = true;
    }
    pr_area += (recall - prev_recall) * (precision + prev_precision) / 2.0;
    prev_fpr = fpr;
    prev_tpr = tpr;
    prev_recall = recall;
    prev_precision = precision;
  }
  out.roc_auc = roc_area;
  out.pr_auc = pr_area;
  return out;
}

// Per-class one-vs-rest curves from [N,K] probability scores.
inline std::vector<ClassCurves> curves_auc(const std::vector<int>& truth,
                                           const std::vector<std::vector<double>>& scores,
                                           Dim k) {
  std::vector<ClassCurves> out;
  for (Dim c = 0; c < k; ++c) {
    std::vector<double> s;
    s.reserve(truth.size());
    for (const auto& row : scores) {
      if (static_cast<Dim>(row.size()) != k)
        fail("curves_auc: score row width != " + std::to_string(k));
      s.push_back(row[static_cast<size_t>(c)]);
    }
    out.push_back(binary_curves(truth, s, static_cast<int>(c)));
  }
  return out;
}

// Fills the AUC fields of a report from per-class curves.
inline void attach_auc(MetricsReport& rep, const std::vector<ClassCurves>& curves) {
  rep.roc_auc.clear();
  rep.pr_auc.clear();
  double rsum = 0, psum = 0;
  int defined = 0;
  for (const auto& c : curves) {
    rep.roc_auc.push_back(c.roc_auc);
    rep.pr_auc.push_back(c.pr_auc);
    if (c.roc_auc && c.pr_auc) {
      rsum += *c.roc_auc;
      psum += *c.pr_auc;
      ++defined;
    }
  }
  if (defined > 0) {
    rep.roc_auc_macro = rsum / defined;
    rep.pr_auc_macro = psum / defined;
  }
}

struct Projection {
  std::vector<std::array<double, 2>> coords;
  std::vector<int> labels;
  std::array<double, 2> explained_variance{0, 0};
};

// Top-2 principal components of [N,D] features. Sign convention: the
// largest-magnitude loading of each component is made positive.
inline Projection feature_projection(const std::vector<std::vector<double>>& feats,
                                     const std::vector<int>& labels) {
  const size_t n = feats.size();
  if (n < 3) fail("feature_projection: need at least 3 samples");
  const size_t d = feats[0].size();
  if (d < 2) fail("feature_projection: feature dimension must be >= 2");
  if (labels.size() != n) fail("feature_projection: labels/features length mismatch");

  Eigen::MatrixXd x(n, d);
  for (size_t i = 0; i < n; ++i) {
    if (feats[i].size() != d) fail("feature_projection: ragged feature rows");
    for (size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i),
                                     static_cast<Eigen::Index>(j)) = feats[i][j];
  }
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) fail("feature_projection: eigensolver failed");

  Projection p;
  p.labels = labels;
  const Eigen::Index last = cov.rows() - 1;
  Eigen::MatrixXd v(d, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd pc = es.eigenvectors().col(last - c);
    Eigen::Index imax = 0;
    pc.cwiseAbs().maxCoeff(&imax);
    if (pc(imax) < 0) pc = -pc;
    v.col(c) = pc;
    p.explained_variance[static_cast<size_t>(c)] =
        std::max(0.0, es.eigenvalues()(last - c));
  }
  Eigen::MatrixXd proj = x * v;
  p.coords.resize(n);
  for (size_t i = 0; i < n; ++i)
    p.coords[i] = {proj(static_cast<Eigen::Index>(i), 0),
                   proj(static_cast<Eigen::Index>(i), 1)};
  return p;
}

// ---- serialization ---------------------------------------------------------

inline nlohmann::json metrics_to_json(const MetricsReport& rep) {
  nlohmann::json j;
  j["samples"] = rep.cm.total();
  j["classes"] = rep.cm.k;
  if (!rep.cm.class_names.empty()) j["class_names"] = rep.cm.class_names;
  j["overall_accuracy"] = rep.overall_accuracy;
  j["ci95_half_width"] = rep.ci95_half_width;
  nlohmann::json conf = nlohmann::json::array();
  for (Dim t = 0; t < rep.cm.k; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (Dim p = 0; p < rep.cm.k; ++p) row.push_back(rep.cm.at(t, p));
    conf.push_back(row);
  }
  j["confusion_matrix"] = conf;
  auto cls = [](const ClassMetrics& m) {
    nlohmann::json c;
    c["accuracy"] = m.accuracy;
    c["sensitivity"] = m.sensitivity;
    c["precision"] = m.precision;
    c["specificity"] = m.specificity;
    c["f1"] = m.f1;
    c["degenerate"] = m.degenerate;
    return c;
  };
  j["per_class"] = nlohmann::json::array();
  for (const auto& m : rep.per_class) j["per_class"].push_back(cls(m));
  j["macro"] = cls(rep.macro);
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  j["roc_auc"] = nlohmann::json::array();
  for (const auto& v : rep.roc_auc) j["roc_auc"].push_back(opt(v));
  j["pr_auc"] = nlohmann::json::array();
  for (const auto& v : rep.pr_auc) j["pr_auc"].push_back(opt(v));
  j["roc_auc_macro"] = opt(rep.roc_auc_macro);
  j["pr_auc_macro"] = opt(rep.pr_auc_macro);
  return j;
}

inline void write_curves_csv(const std::vector<ClassCurves>& curves,
                             const std::string& path_prefix) {
  for (size_t c = 0; c < curves.size(); ++c) {
    for (const char* kind : {"roc", "pr"}) {
      const auto& pts = std::string(kind) == "roc" ? curves[c].roc : curves[c].pr;
      std::ofstream f(path_prefix + "." + kind + ".class" + std::to_string(c) + ".csv");
      if (!f) throw IoError("curves: cannot write under prefix " + path_prefix);
      f << "threshold," << (std::string(kind) == "roc" ? "fpr,tpr" : "recall,precision")
        << "\n";
      for (const auto& p : pts) f << p.threshold << "," << p.x << "," << p.y << "\n";
    }
  }
}

inline void write_projection_csv(const Projection& p, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("projection: cannot write " + path);
  f << "pc1,pc2,label\n";
  for (size_t i = 0; i < p.coords.size(); ++i)
    f << p.coords[i][0] << "," << p.coords[i][1] << "," << p.labels[i] << "\n";
}

}  // namespace cers
