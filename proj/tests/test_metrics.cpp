// Metrics: confusion-matrix bookkeeping against a hand-worked example and a
// brute-force counting oracle, ROC/PR areas against the pair-ordering
// statistic, the closed-form confidence interval, and the PCA projection on
// planted data.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "cers/metrics.hpp"

using namespace cers;

namespace {

// Pair-ordering (Mann-Whitney) statistic with ties counted half.
double auc_by_pairs(const std::vector<int>& truth, const std::vector<double>& score,
                    int positive) {
  double wins = 0;
  long long pairs = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] != positive) continue;
    for (size_t j = 0; j < truth.size(); ++j) {
      if (truth[j] == positive) continue;
      ++pairs;
      if (score[i] > score[j])
        wins += 1.0;
      else if (score[i] == score[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST(Metrics, ConfusionMatrixCounting) {
  std::vector<int> truth = {0, 0, 1, 1, 2, 2, 2};
  std::vector<int> pred = {0, 1, 1, 1, 2, 0, 2};
  auto cm = ConfusionMatrix::make(truth, pred, 3, {"a", "b", "c"});
  EXPECT_EQ(cm.at(0, 0), 1);
  EXPECT_EQ(cm.at(0, 1), 1);
  EXPECT_EQ(cm.at(1, 1), 2);
  EXPECT_EQ(cm.at(2, 0), 1);
  EXPECT_EQ(cm.at(2, 2), 2);
  EXPECT_EQ(cm.at(1, 0), 0);
  EXPECT_EQ(cm.total(), 7);

  EXPECT_THROW(ConfusionMatrix::make({0, 3}, {0, 0}, 3), std::invalid_argument);
  EXPECT_THROW(ConfusionMatrix::make({0}, {0, 1}, 2), std::invalid_argument);
}

TEST(Metrics, BasicMetricsWorkedExample) {
  // rows = true class:  [[2,1,0],[0,3,1],[1,0,2]]
  std::vector<int> truth = {0, 0, 0, 1, 1, 1, 1, 2, 2, 2};
  std::vector<int> pred = {0, 0, 1, 1, 1, 1, 2, 0, 2, 2};
  auto rep = basic_metrics(ConfusionMatrix::make(truth, pred, 3));
  EXPECT_NEAR(rep.overall_accuracy, 0.7, 1e-12);

  const auto& c0 = rep.per_class[0];
  EXPECT_EQ(c0.tp, 2);
  EXPECT_EQ(c0.fn, 1);
  EXPECT_EQ(c0.fp, 1);
  EXPECT_EQ(c0.tn, 6);
  EXPECT_NEAR(c0.accuracy, 0.8, 1e-12);
  EXPECT_NEAR(c0.sensitivity, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(c0.precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(c0.specificity, 6.0 / 7.0, 1e-12);
  EXPECT_NEAR(c0.f1, 2.0 / 3.0, 1e-12);
  EXPECT_FALSE(c0.degenerate);

  // macro is the unweighted mean of the per-class values
  double s = 0;
  for (const auto& m : rep.per_class) s += m.sensitivity;
  EXPECT_NEAR(rep.macro.sensitivity, s / 3.0, 1e-12);
}

TEST(Metrics, BasicMetricsMatchesCountingOracle) {
  Rng rng(101);
  for (int rep_i = 0; rep_i < 300; ++rep_i) {
    const Dim k = 2 + static_cast<Dim>(rng.next_index(5));
    const size_t n = 1 + rng.next_index(60);
    std::vector<int> truth(n), pred(n);
    for (size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(rng.next_index(static_cast<size_t>(k)));
      pred[i] = static_cast<int>(rng.next_index(static_cast<size_t>(k)));
    }
    auto rep = basic_metrics(ConfusionMatrix::make(truth, pred, k));
    for (Dim c = 0; c < k; ++c) {
      Dim tp = 0, fp = 0, fn = 0, tn = 0;
      for (size_t i = 0; i < n; ++i) {
        const bool t = truth[i] == c, p = pred[i] == c;
        tp += t && p;
        fp += !t && p;
        fn += t && !p;
        tn += !t && !p;
      }
      const auto& m = rep.per_class[c];
      ASSERT_EQ(m.tp, tp);
      ASSERT_EQ(m.fp, fp);
      ASSERT_EQ(m.fn, fn);
      ASSERT_EQ(m.tn, tn);
      auto safe = [](double num, double den) { return den > 0 ? num / den : 0.0; };
      ASSERT_NEAR(m.sensitivity, safe(tp, tp + fn), 1e-12);
      ASSERT_NEAR(m.precision, safe(tp, tp + fp), 1e-12);
      ASSERT_NEAR(m.specificity, safe(tn, tn + fp), 1e-12);
      ASSERT_NEAR(m.accuracy, static_cast<double>(tp + tn) / n, 1e-12);
      const double pr = safe(tp, tp + fp), sn = safe(tp, tp + fn);
      ASSERT_NEAR(m.f1, (pr + sn) > 0 ? 2 * pr * sn / (pr + sn) : 0.0, 1e-12);
      const bool degen = (tp + fn) == 0 || (tp + fp) == 0 || (tn + fp) == 0 ||
                         (pr + sn) <= 0;
      ASSERT_EQ(m.degenerate, degen);
    }
  }
}

TEST(Metrics, ConfidenceIntervalClosedForm) {
  EXPECT_NEAR(confidence_interval(0.017, 4889), 0.0036237, 1e-5);
  EXPECT_NEAR(confidence_interval(0.5, 100), 1.96 * 0.05, 1e-12);
  EXPECT_EQ(confidence_interval(0.0, 50), 0.0);
  EXPECT_EQ(confidence_interval(1.0, 50), 0.0);
  EXPECT_THROW(confidence_interval(0.1, 0), std::invalid_argument);
  EXPECT_THROW(confidence_interval(1.2, 10), std::invalid_argument);
  // report carries the same value for its overall error rate
  auto rep = basic_metrics(ConfusionMatrix::make({0, 0, 1, 1}, {0, 1, 1, 1}, 2));
  EXPECT_NEAR(rep.ci95_half_width, confidence_interval(0.25, 4), 1e-12);
}

TEST(Metrics, RocAucEqualsPairOrderingStatistic) {
  Rng rng(202);
  for (int rep_i = 0; rep_i < 200; ++rep_i) {
    const size_t n = 5 + rng.next_index(196);
    std::vector<int> truth(n);
    std::vector<double> score(n);
    bool any_pos = false, any_neg = false;
    for (size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(rng.next_index(2));
      (truth[i] == 1 ? any_pos : any_neg) = true;
      // coarse grid of scores so ties happen often
      score[i] = static_cast<double>(rng.next_index(8)) / 7.0;
    }
    if (!any_pos || !any_neg) continue;
    auto curves = binary_curves(truth, score, 1);
    ASSERT_TRUE(curves.roc_auc.has_value());
    EXPECT_NEAR(*curves.roc_auc, auc_by_pairs(truth, score, 1), 1e-9);
  }
}

TEST(Metrics, CurveEndpointsAndKnownAreas) {
  std::vector<int> truth = {1, 1, 0, 0};
  std::vector<double> sep = {0.9, 0.8, 0.2, 0.1};
  auto perfect = binary_curves(truth, sep, 1);
  EXPECT_NEAR(*perfect.roc_auc, 1.0, 1e-12);
  EXPECT_NEAR(*perfect.pr_auc, 1.0, 1e-12);
  ASSERT_FALSE(perfect.roc.empty());
  EXPECT_TRUE(std::isinf(perfect.roc.front().threshold));
  EXPECT_EQ(perfect.roc.front().x, 0.0);
  EXPECT_EQ(perfect.roc.front().y, 0.0);
  EXPECT_NEAR(perfect.roc.back().x, 1.0, 1e-12);
  EXPECT_NEAR(perfect.roc.back().y, 1.0, 1e-12);

  std::vector<double> rev = {0.1, 0.2, 0.8, 0.9};
  EXPECT_NEAR(*binary_curves(truth, rev, 1).roc_auc, 0.0, 1e-12);

  std::vector<double> flat = {0.5, 0.5, 0.5, 0.5};
  auto tied = binary_curves(truth, flat, 1);
  EXPECT_NEAR(*tied.roc_auc, 0.5, 1e-12);
  // single step: PR anchored at (0, first precision) = (0, 0.5)
  EXPECT_NEAR(*tied.pr_auc, 0.5, 1e-12);

  std::vector<int> single(4, 1);
  EXPECT_FALSE(binary_curves(single, sep, 1).roc_auc.has_value());
}

TEST(Metrics, MultiClassCurvesAndMacro) {
  std::vector<int> truth = {0, 0, 1, 1};  // class 2 never occurs
  std::vector<std::vector<double>> scores = {
      {0.7, 0.2, 0.1}, {0.6, 0.3, 0.1}, {0.2, 0.7, 0.1}, {0.3, 0.6, 0.1}};
  auto curves = curves_auc(truth, scores, 3);
  ASSERT_EQ(curves.size(), 3u);
  EXPECT_TRUE(curves[0].roc_auc.has_value());
  EXPECT_TRUE(curves[1].roc_auc.has_value());
  EXPECT_FALSE(curves[2].roc_auc.has_value());

  auto rep = basic_metrics(ConfusionMatrix::make(truth, {0, 0, 1, 1}, 3));
  attach_auc(rep, curves);
  ASSERT_TRUE(rep.roc_auc_macro.has_value());
  EXPECT_NEAR(*rep.roc_auc_macro, (*curves[0].roc_auc + *curves[1].roc_auc) / 2.0,
              1e-12);
  EXPECT_FALSE(rep.roc_auc[2].has_value());

  std::vector<std::vector<double>> ragged = {{0.5, 0.5}, {0.5}, {0.5, 0.5},
                                             {0.5, 0.5}};
  EXPECT_THROW(curves_auc(truth, ragged, 2), std::invalid_argument);
}

TEST(Metrics, ProjectionRecoversPlantedDirection) {
  Rng rng(303);
  const size_t n = 200, d = 5;
  const double u[5] = {0.8, 0.6, 0, 0, 0};   // unit vector, largest loading positive
  const double v[5] = {0, 0, 1.0, 0, 0};
  std::vector<std::vector<double>> feats(n, std::vector<double>(d));
  std::vector<double> a(n);
  std::vector<int> labels(n, 0);
  for (size_t i = 0; i < n; ++i) {
    a[i] = 5.0 * rng.normal();
    const double b = rng.normal();
    for (size_t j = 0; j < d; ++j)
      feats[i][j] = a[i] * u[j] + b * v[j] + 0.01 * rng.normal();
  }
  auto p = feature_projection(feats, labels);
  ASSERT_EQ(p.coords.size(), n);
  // first coordinate tracks the planted strong direction, with positive sign
  double dot = 0, na = 0, nc = 0, mean_a = 0, mean_c = 0;
  for (size_t i = 0; i < n; ++i) {
    mean_a += a[i];
    mean_c += p.coords[i][0];
  }
  mean_a /= n;
  mean_c /= n;
  for (size_t i = 0; i < n; ++i) {
    dot += (a[i] - mean_a) * (p.coords[i][0] - mean_c);
    na += (a[i] - mean_a) * (a[i] - mean_a);
    nc += (p.coords[i][0] - mean_c) * (p.coords[i][0] - mean_c);
  }
  EXPECT_GT(dot / std::sqrt(na * nc), 0.999);
  EXPECT_GT(p.explained_variance[0], p.explained_variance[1]);
}

TEST(Metrics, ProjectionExactOnCollinearData) {
  std::vector<std::vector<double>> feats = {{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  std::vector<int> labels = {0, 0, 1, 1};
  auto p = feature_projection(feats, labels);
  const double s = std::sqrt(2.0);
  // centered projections: +-1.5*sqrt(2), +-0.5*sqrt(2), PC1 sign positive
  EXPECT_NEAR(p.coords[0][0], -1.5 * s, 1e-9);
  EXPECT_NEAR(p.coords[3][0], 1.5 * s, 1e-9);
  EXPECT_NEAR(p.explained_variance[0], 10.0 / 3.0, 1e-9);
  EXPECT_NEAR(p.explained_variance[1], 0.0, 1e-9);

  EXPECT_THROW(feature_projection({{1, 2}, {3, 4}}, {0, 1}), std::invalid_argument);
  EXPECT_THROW(feature_projection({{1}, {2}, {3}}, {0, 1, 0}), std::invalid_argument);
}

TEST(Metrics, JsonSerializationShape) {
  auto rep = basic_metrics(ConfusionMatrix::make({0, 1}, {0, 1}, 2, {"x", "y"}));
  auto curves = curves_auc({0, 1}, {{0.8, 0.2}, {0.3, 0.7}}, 2);
  attach_auc(rep, curves);
  auto j = metrics_to_json(rep);
  EXPECT_EQ(j["samples"], 2);
  EXPECT_EQ(j["classes"], 2);
  EXPECT_EQ(j["confusion_matrix"][0][0], 1);
  EXPECT_EQ(j["class_names"][1], "y");
  EXPECT_DOUBLE_EQ(j["overall_accuracy"].get<double>(), 1.0);
  EXPECT_EQ(j["per_class"].size(), 2u);
  EXPECT_TRUE(j["macro"].contains("f1"));
  EXPECT_FALSE(j["roc_auc"][0].is_null());
}

TEST(Metrics, CsvWritersFailCleanlyOnBadPaths) {
  Projection p;
  p.coords = {{0, 0}, {1, 1}, {2, 2}};
  p.labels = {0, 1, 0};
  EXPECT_THROW(write_projection_csv(p, "/nonexistent_dir_zz/x.csv"), IoError);
  auto curves = curves_auc({0, 1}, {{0.8, 0.2}, {0.3, 0.7}}, 2);
  EXPECT_THROW(write_curves_csv(curves, "/nonexistent_dir_zz/prefix"), IoError);
}
