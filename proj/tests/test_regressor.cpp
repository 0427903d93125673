#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "eqlm/regressor.hpp"

using namespace eqlm;

namespace {

const fs::path kData = EQLM_TEST_DATA;

// Landmark-like detections: a shared layout plus small per-image jitter, so
// the design matrix is as correlated as real detections.
std::vector<LandmarkSet> layouts(int n, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> base(-0.7, 0.7);
  std::normal_distribution<double> jitter(0, 0.05);
  LandmarkSet mean(k);
  for (auto& p : mean) p = {base(rng), base(rng)};
  std::vector<LandmarkSet> out(n, mean);
  for (auto& s : out)
    for (auto& p : s) p = p + Vec2{jitter(rng), jitter(rng)};
  return out;
}

Eigen::MatrixXd random_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, 0.5);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = d(rng);
  return m;
}

std::vector<LandmarkSet> apply(const Eigen::MatrixXd& W, const std::vector<LandmarkSet>& x) {
  std::vector<LandmarkSet> y;
  for (const auto& s : x) y.push_back(unstack(W * stack(s)));
  return y;
}

double rel_frobenius(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / b.norm(); }

}  // namespace

TEST(Predict, ZeroAndSelection) {
  const LandmarkSet x{{0.1, 0.2}, {-0.3, 0.4}, {0.5, -0.6}};
  const auto zero = predict({Eigen::MatrixXd::Zero(4, 6)}, x);
  for (auto p : zero) EXPECT_EQ(p, (Vec2{0, 0}));
  Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(4, 6);
  sel.block(0, 4, 2, 2).setIdentity();
  sel.block(2, 0, 2, 2).setIdentity();
  const auto y = predict({sel}, x);
  EXPECT_EQ(y[0], x[2]);
  EXPECT_EQ(y[1], x[0]);
  EXPECT_THROW(predict({sel}, LandmarkSet{{0, 0}}), UsageError);
}

TEST(Predict, MatchesNaiveProductAndIsLinear) {
  const Regressor r{random_matrix(6, 10, 1)};
  for (const auto& x : layouts(20, 5, 2)) {
    const auto y = predict(r, x);
    for (int i = 0; i < 6; ++i) {
      double acc = 0;
      for (int j = 0; j < 5; ++j) acc += r.W(i, 2 * j) * x[j].x + r.W(i, 2 * j + 1) * x[j].y;
      EXPECT_NEAR(i % 2 ? y[i / 2].y : y[i / 2].x, acc, 1e-12);
    }
    for (double a : {2.0, -0.5, 4.0}) {
      LandmarkSet xa = x;
      for (auto& p : xa) p = a * p;
      const auto ya = predict(r, xa);
      for (std::size_t m = 0; m < y.size(); ++m) EXPECT_EQ(ya[m], a * y[m]);
    }
  }
}

TEST(FitAdam, ZeroTargetsGiveZeroWeights) {
  const auto x = layouts(50, 7, 3);
  std::vector<LandmarkSet> y(50, LandmarkSet(3, Vec2{0, 0}));
  const auto r = fit_adam(make_regression_data(x, y), {});
  EXPECT_LT(r.W.norm(), 1e-3);
}

TEST(FitAdam, RecoversKnownMatrix) {
  const auto x = layouts(200, 7, 4);
  const auto W0 = random_matrix(6, 14, 5);
  FitTrace trace;
  const auto r = fit_adam(make_regression_data(x, apply(W0, x)), {}, &trace);
  EXPECT_LT(rel_frobenius(r.W, W0), 1e-3) << "iterations " << trace.iterations << " mse " << trace.final_mse;
  const auto ridge = fit_ridge(make_regression_data(x, apply(W0, x)), 1e-12);
  EXPECT_LT(rel_frobenius(ridge.W, W0), 1e-3);
}

TEST(FitAdam, SelectionTargetsGiveSelectionMatrix) {
  const auto x = layouts(100, 5, 6);
  std::vector<LandmarkSet> y;
  for (const auto& s : x) y.push_back({s[3], s[1]});
  const auto r = fit_adam(make_regression_data(x, y), {});
  Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(4, 10);
  sel.block(0, 6, 2, 2).setIdentity();
  sel.block(2, 2, 2, 2).setIdentity();
  EXPECT_LT((r.W - sel).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(FitAdam, FewerImagesThanInputsGivesMinimumNormInterpolant) {
  for (int n : {1, 3, 5}) {
    const auto x = layouts(n, 7, 40 + n);
    const auto y = layouts(n, 2, 50 + n);
    const auto d = make_regression_data(x, y);
    const auto r = fit_adam(d, {});
    // Oracle: Y X^+ through an SVD pseudo-inverse.
    const Eigen::MatrixXd pinv = d.X.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(
        Eigen::MatrixXd::Identity(d.X.rows(), d.X.rows()));
    const Eigen::MatrixXd w_star = d.Y * pinv;
    EXPECT_LT(rel_frobenius(r.W, w_star), 1e-3) << "n=" << n;
    EXPECT_LT((r.W * d.X - d.Y).cwiseAbs().maxCoeff(), 1e-4) << "n=" << n;
  }
}

TEST(FitAdam, InconsistentTargetCountIsDataError) {
  const auto x = layouts(3, 4, 7);
  std::vector<LandmarkSet> y{{{0, 0}}, {{0, 0}, {1, 1}}, {{0, 0}}};
  EXPECT_THROW(make_regression_data(x, y), FormatError);
}

TEST(Evaluate, ZeroErrorForPerfectPredictions) {
  const auto t = layouts(5, 4, 8);
  const auto r = evaluate_predictions(t, t, {"a", "b", "c", "d", "e"}, 40, 40, NormMode::inter_ocular, {0, 1});
  EXPECT_EQ(r.mean_error, 0.0);
  EXPECT_EQ(r.per_image.size(), 5u);
}

TEST(Evaluate, OneLandmarkOffByOneIod) {
  // Eyes at pixels (10, 20) and (30, 20): IOD 20 px. Landmark 2 moved 20 px down.
  const int w = 64, h = 48;
  auto n = [&](double x, double y) { return pixel_to_norm(Vec2{x, y}, w, h); };
  const LandmarkSet truth{n(10, 20), n(30, 20), n(20, 30), n(5, 5)};
  LandmarkSet pred = truth;
  pred[2] = n(20, 50);
  const auto r = evaluate_predictions({pred}, {truth}, {"x"}, w, h, NormMode::inter_ocular, {0, 1});
  EXPECT_NEAR(r.per_image[0].second, 1.0 / 4, 1e-12);
  const auto rw = evaluate_predictions({pred}, {truth}, {"x"}, w, h, NormMode::width);
  EXPECT_NEAR(rw.mean_error, 20.0 / 4 / w, 1e-12);
}

TEST(Evaluate, MatchesHandSummation) {
  const int w = 30, h = 20;
  const auto truth = layouts(6, 3, 9), pred = layouts(6, 3, 10);
  std::vector<std::string> ids{"0", "1", "2", "3", "4", "5"};
  const auto r = evaluate_predictions(pred, truth, ids, w, h, NormMode::inter_ocular, {2, 0});
  double sum = 0;
  for (int i = 0; i < 6; ++i) {
    auto px = [&](Vec2 v) { return std::pair{(v.x + 1) * w / 2 - 0.5, (v.y + 1) * h / 2 - 0.5}; };
    auto dist = [&](Vec2 a, Vec2 b) {
      const auto [ax, ay] = px(a);
      const auto [bx, by] = px(b);
      return std::hypot(ax - bx, ay - by);
    };
    const double iod = dist(truth[i][2], truth[i][0]);
    double e = 0;
    for (int k = 0; k < 3; ++k) e += dist(pred[i][k], truth[i][k]);
    sum += e / 3 / iod;
    EXPECT_NEAR(r.per_image[i].second, e / 3 / iod, 1e-9);
  }
  EXPECT_NEAR(r.mean_error, sum / 6, 1e-9);
}

TEST(Evaluate, ZeroInterOcularDistanceIsSkipped) {
  LandmarkSet t{{0.1, 0.1}, {0.1, 0.1}, {0.3, 0.3}};
  const auto good = layouts(1, 3, 11)[0];
  const auto r = evaluate_predictions({t, good}, {t, good}, {"bad", "ok"}, 10, 10, NormMode::inter_ocular);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0], "bad");
  EXPECT_EQ(r.per_image.size(), 1u);
}

TEST(ContributionGraph, Examples) {
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(6, 8);
  W.block(0, 2, 2, 2).setIdentity();   // target 0 <- source 1
  W(2, 0) = 0.5;                       // target 1 <- sources 0 and 3 equally
  W(3, 7) = -0.5;
  W(4, 2) = 0.85;                      // target 2: 0.85 / 0.15 split
  W(5, 5) = 0.15;
  const auto edges = contribution_graph({W});
  ASSERT_EQ(edges.size(), 4u);
  EXPECT_EQ(edges[0].source, 1);
  EXPECT_EQ(edges[0].target, 0);
  EXPECT_DOUBLE_EQ(edges[0].weight, 1.0);
  EXPECT_DOUBLE_EQ(edges[1].weight, 0.5);
  EXPECT_DOUBLE_EQ(edges[2].weight, 0.5);
  EXPECT_EQ(edges[3].source, 1);
  EXPECT_NEAR(edges[3].weight, 0.85, 1e-12);
  const auto none = contribution_graph({Eigen::MatrixXd::Zero(2, 8)});
  EXPECT_TRUE(none.empty());
}

TEST(ContributionGraph, WeightsSumToAtMostOne) {
  const Regressor r{random_matrix(10, 14, 12)};
  std::vector<double> sum(5, 0.0);
  for (const auto& e : contribution_graph(r)) sum[e.target] += e.weight;
  for (double s : sum) EXPECT_LE(s, 1.0 + 1e-12);
  double total = 0;
  for (const auto& e : contribution_graph(r, 0.0))
    if (e.target == 0) total += e.weight;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(FitRegressor, DetectorStaysFrozenAndLimitedDataWorks) {
  auto samples = load_idx(kData / "mnist35-images.idx3-ubyte", kData / "mnist35-labels.idx1-ubyte", 3);
  samples.resize(30);
  for (auto& s : samples) s.annotations = {{0.1, 0.2}, {-0.3, 0.1}};
  Detector<float> det(4, 1);
  det.init(3);
  const auto digest = parameter_digest(det);
  RegressorFitConfig cfg;
  cfg.augment_copies = 1;
  cfg.max_iters = 2000;
  const std::vector<Sample> test(samples.begin() + 20, samples.end());
  for (int n : {1, 5, 10, 20}) {
    const std::vector<Sample> train(samples.begin(), samples.begin() + n);
    const auto r = fit_regressor(det, train, PreprocessSpec::mnist(), cfg);
    EXPECT_TRUE(r.W.allFinite());
    const auto rep = evaluate(r, det, test, PreprocessSpec::mnist(), NormMode::width);
    EXPECT_TRUE(std::isfinite(rep.mean_error)) << n;
  }
  EXPECT_EQ(parameter_digest(det), digest);
  samples[3].annotations.pop_back();
  EXPECT_THROW(fit_regressor(det, samples, PreprocessSpec::mnist(), cfg), FormatError);
}

TEST(RegressorPersistence, RoundTripsThroughCheckpoint) {
  const Regressor r{random_matrix(6, 14, 13)};
  Checkpoint ck;
  put_regressor(ck, r, {{"norm", "width"}});
  const auto back = get_regressor(decode_checkpoint(encode_checkpoint(ck)));
  ASSERT_TRUE(back.has_value());
  EXPECT_LT((back->W - r.W).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_FALSE(get_regressor(Checkpoint{}).has_value());
}
