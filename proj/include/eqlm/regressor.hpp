#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eqlm/adam.hpp"
#include "eqlm/checkpoint.hpp"
#include "eqlm/data.hpp"
#include "eqlm/detector.hpp"
#include "eqlm/errors.hpp"

namespace eqlm {

// y = W x with x = (x1, y1, ..., xK, yK) and y = (x1, y1, ..., xM, yM); no bias.
struct Regressor {
  Eigen::MatrixXd W;  // 2M x 2K

  int sources() const { return static_cast<int>(W.cols() / 2); }
  int targets() const { return static_cast<int>(W.rows() / 2); }
};

inline Eigen::VectorXd stack(const LandmarkSet& s) {
  Eigen::VectorXd v(2 * s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    v[2 * i] = s[i].x;
    v[2 * i + 1] = s[i].y;
  }
  return v;
}

inline LandmarkSet unstack(const Eigen::VectorXd& v) {
  LandmarkSet s(v.size() / 2);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = {v[2 * i], v[2 * i + 1]};
  return s;
}

inline LandmarkSet predict(const Regressor& r, const LandmarkSet& x) {
  if (static_cast<Eigen::Index>(2 * x.size()) != r.W.cols())
    throw UsageError("predict: regressor expects " + std::to_string(r.sources()) + " landmarks, got " +
                     std::to_string(x.size()));
  return unstack(r.W * stack(x));
}

// Design data: column i of X is a stacked detection, column i of Y its target.
struct RegressionData {
  Eigen::MatrixXd X, Y;
};

inline RegressionData make_regression_data(const std::vector<LandmarkSet>& x, const std::vector<LandmarkSet>& y) {
  if (x.size() != y.size() || x.empty()) throw UsageError("regression data: need equally many non-zero inputs and targets");
  RegressionData d{Eigen::MatrixXd(2 * x[0].size(), x.size()), Eigen::MatrixXd(2 * y[0].size(), y.size())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != x[0].size()) throw UsageError("regression data: inconsistent detection count");
    if (y[i].size() != y[0].size())
      throw FormatError("regression data: target " + std::to_string(i) + " has " + std::to_string(y[i].size()) +
                        " landmarks, expected " + std::to_string(y[0].size()));
    d.X.col(i) = stack(x[i]);
    d.Y.col(i) = stack(y[i]);
  }
  return d;
}

// Closed form W = Y X^T (X X^T / N + ridge I)^-1 / N.
inline Regressor fit_ridge(const RegressionData& d, double ridge = 1e-4) {
  const double n = static_cast<double>(d.X.cols());
  Eigen::MatrixXd G = d.X * d.X.transpose() / n;
  G.diagonal().array() += ridge;
  const Eigen::MatrixXd B = d.Y * d.X.transpose() / n;
  return {G.ldlt().solve(B.transpose()).transpose()};
}

struct RegressorFitConfig {
  AdamSettings adam{1e-2, 0.9, 0.999, 1e-8};
  int max_iters = 20000;
  int patience = 200;         // iterations without improvement before lr decay
  double lr_decay = 0.1;
  int max_decays = 4;
  double tolerance = 1e-16;   // stop when the mean squared error falls below this
  bool whiten = true;         // optimize in decorrelated coordinates x' = P x
  int augment_copies = 0;     // extra warped copies per image
  WarpSamplerConfig augment = WarpSamplerConfig::mnist_g1();
  std::uint64_t seed = 0;
};

struct FitTrace {
  int iterations = 0;
  double final_mse = 0;
};

// Full-batch Adam on mean squared coordinate error. With whitening the
// parameters are V with W = V P, P = (X X^T / N + eps I)^-1/2; this is the
// same linear model in better-conditioned coordinates.
inline Regressor fit_adam(const RegressionData& d, const RegressorFitConfig& cfg, FitTrace* trace = nullptr) {
  const Eigen::Index k2 = d.X.rows(), m2 = d.Y.rows();
  const double n = static_cast<double>(d.X.cols());
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(k2, k2);
  if (cfg.whiten) {
    const Eigen::MatrixXd G = d.X * d.X.transpose() / n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    // Directions the data never spans (fewer images than 2K) are dropped, so W
    // stays in the span of the inputs.
    const double floor = 1e-10 * std::max(1e-300, es.eigenvalues().maxCoeff());
    Eigen::VectorXd inv = es.eigenvalues().unaryExpr([&](double v) { return v > floor ? 1.0 / std::sqrt(v) : 0.0; });
    P = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  }
  const Eigen::MatrixXd Xw = P * d.X;
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(m2, k2), m = V, v = V, best_V = V;
  double lr = cfg.adam.learning_rate, best = std::numeric_limits<double>::infinity();
  int since = 0, decays = 0, it = 0;
  const auto& s = cfg.adam;
  for (; it < cfg.max_iters; ++it) {
    const Eigen::MatrixXd R = V * Xw - d.Y;
    const double mse = R.squaredNorm() / n;
    if (!std::isfinite(mse)) throw NumericError("fit_regressor: non-finite loss");
    if (mse < best) {
      best = mse;
      best_V = V;
      since = 0;
    } else if (++since >= cfg.patience) {
      if (decays++ >= cfg.max_decays) break;
      lr *= cfg.lr_decay;
      since = 0;
      V = best_V;
    }
    if (mse < cfg.tolerance) break;
    const Eigen::MatrixXd g = (2.0 / n) * R * Xw.transpose();
    m = s.beta1 * m + (1 - s.beta1) * g;
    v = s.beta2 * v + (1 - s.beta2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(s.beta1, it + 1), c2 = 1 - std::pow(s.beta2, it + 1);
    V.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + s.eps);
  }
  if (trace) *trace = {it, best};
  return {best_V * P};
}

// Detections and view-frame targets for every annotated sample, plus
// `augment_copies` warped copies where image and annotations share the warp.
inline RegressionData regression_data(const Detector<float>& det, const std::vector<Sample>& samples,
                                      const PreprocessSpec& spec, const RegressorFitConfig& cfg) {
  if (samples.empty()) throw ConfigError("regressor: no annotated samples");
  std::vector<LandmarkSet> xs, ys;
  const std::size_t m = samples.front().annotations.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.annotations.empty() || s.annotations.size() != m)
      throw FormatError("regressor: sample '" + s.id + "' has " + std::to_string(s.annotations.size()) +
                        " annotations, expected " + std::to_string(m));
    const Frames f = frames_for(spec, s.image.height(), s.image.width());
    xs.push_back(det.detect(preprocess(s, spec)).landmarks[0]);
    ys.push_back(annotations_in_view(s.annotations, f));
    for (int a = 0; a < cfg.augment_copies; ++a) {
      const TpsWarp g = sample_tps(cfg.augment, derive_seed(cfg.seed, i, static_cast<std::uint64_t>(a)));
      xs.push_back(det.detect(render(s.image, spec, g)).landmarks[0]);
      ys.push_back(annotations_in_view(s.annotations, f, &g));
    }
  }
  return make_regression_data(xs, ys);
}

// The detector is only read; its parameters are never touched.
inline Regressor fit_regressor(const Detector<float>& det, const std::vector<Sample>& samples,
                               const PreprocessSpec& spec, const RegressorFitConfig& cfg = {},
                               FitTrace* trace = nullptr) {
  return fit_adam(regression_data(det, samples, spec, cfg), cfg, trace);
}

// ---- evaluation -----------------------------------------------------------

enum class NormMode { inter_ocular, width };

inline std::string to_string(NormMode m) { return m == NormMode::inter_ocular ? "iod" : "width"; }

inline NormMode norm_mode_from_string(const std::string& s) {
  if (s == "iod") return NormMode::inter_ocular;
  if (s == "width") return NormMode::width;
  throw ConfigError("unknown normalization '" + s + "' (iod, width)");
}

struct EvalReport {
  NormMode mode = NormMode::width;
  double mean_error = 0;
  std::vector<std::pair<std::string, double>> per_image;
  std::vector<std::string> skipped;  // zero normalization distance
};

// Mean over landmarks of pixel distance / normalization distance, averaged
// over images. Coordinates are normalized in a w x h frame.
inline EvalReport evaluate_predictions(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& truth,
                                       const std::vector<std::string>& ids, int w, int h, NormMode mode,
                                       std::pair<int, int> eyes = {0, 1}) {
  if (pred.size() != truth.size() || ids.size() != pred.size())
    throw UsageError("evaluate: prediction, truth and id counts differ");
  EvalReport r;
  r.mode = mode;
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto& p = pred[i];
    const auto& t = truth[i];
    if (p.size() != t.size() || t.empty()) throw UsageError("evaluate: landmark count mismatch for " + ids[i]);
    double d = w;
    if (mode == NormMode::inter_ocular) {
      const int a = eyes.first, b = eyes.second;
      if (a < 0 || b < 0 || a >= static_cast<int>(t.size()) || b >= static_cast<int>(t.size()))
        throw ConfigError("evaluate: eye indices out of range");
      d = norm(norm_to_pixel(t[a], w, h) - norm_to_pixel(t[b], w, h));
    }
    if (!(d > 0)) {
      r.skipped.push_back(ids[i]);
      continue;
    }
    double e = 0;
    for (std::size_t k = 0; k < t.size(); ++k) e += norm(norm_to_pixel(p[k], w, h) - norm_to_pixel(t[k], w, h));
    e /= static_cast<double>(t.size()) * d;
    r.per_image.emplace_back(ids[i], e);
    sum += e;
  }
  r.mean_error = r.per_image.empty() ? 0.0 : sum / r.per_image.size();
  return r;
}

inline EvalReport evaluate(const Regressor& reg, const Detector<float>& det, const std::vector<Sample>& samples,
                           const PreprocessSpec& spec, NormMode mode, std::pair<int, int> eyes = {0, 1}) {
  std::vector<LandmarkSet> pred, truth;
  std::vector<std::string> ids;
  int w = 0, h = 0;
  for (const auto& s : samples) {
    const Frames f = frames_for(spec, s.image.height(), s.image.width());
    if ((w && w != f.out_w) || (h && h != f.out_h)) throw UsageError("evaluate: preprocessed sizes differ");
    w = f.out_w;
    h = f.out_h;
    pred.push_back(predict(reg, det.detect(preprocess(s, spec)).landmarks[0]));
    truth.push_back(annotations_in_view(s.annotations, f));
    ids.push_back(s.id);
  }
  return evaluate_predictions(pred, truth, ids, w, h, mode, eyes);
}

inline json to_json(const EvalReport& r) {
  json per = json::array();
  for (const auto& [id, e] : r.per_image) per.push_back({{"id", id}, {"error", e}});
  return {{"normalization", to_string(r.mode)},
          {"mean_error", r.mean_error},
          {"images", r.per_image.size()},
          {"skipped", r.skipped},
          {"per_image", per}};
}

// ---- contribution graph ---------------------------------------------------

struct Edge {
  int source = 0, target = 0;
  double weight = 0;
};

// Per target: |coefficients| summed over each source's x/y pair, l1-normalized
// across sources, entries below `threshold` dropped.
inline std::vector<Edge> contribution_graph(const Regressor& reg, double threshold = 0.2) {
  std::vector<Edge> edges;
  const int k = reg.sources(), m = reg.targets();
  for (int t = 0; t < m; ++t) {
    std::vector<double> w(k, 0.0);
    double total = 0;
    for (int s = 0; s < k; ++s) {
      w[s] = reg.W.block(2 * t, 2 * s, 2, 2).cwiseAbs().sum();
      total += w[s];
    }
    if (!(total > 0)) continue;
    for (int s = 0; s < k; ++s)
      if (w[s] / total >= threshold) edges.push_back({s, t, w[s] / total});
  }
  return edges;
}

// ---- persistence ----------------------------------------------------------

inline void put_regressor(Checkpoint& ck, const Regressor& r, const json& info = json::object()) {
  NamedArray a{"regressor.W", {static_cast<int>(r.W.rows()), static_cast<int>(r.W.cols())}, {}};
  for (Eigen::Index i = 0; i < r.W.rows(); ++i)
    for (Eigen::Index j = 0; j < r.W.cols(); ++j) a.values.push_back(static_cast<float>(r.W(i, j)));
  ck.put(std::move(a));
  json m = info;
  m["targets"] = r.targets();
  m["sources"] = r.sources();
  ck.manifest["regressor"] = m;
}

inline std::optional<Regressor> get_regressor(const Checkpoint& ck) {
  const NamedArray* a = ck.find("regressor.W");
  if (!a) return std::nullopt;
  if (a->shape.size() != 2) throw FormatError("regressor.W must be two-dimensional");
  Regressor r{Eigen::MatrixXd(a->shape[0], a->shape[1])};
  for (int i = 0; i < a->shape[0]; ++i)
    for (int j = 0; j < a->shape[1]; ++j) r.W(i, j) = a->values[static_cast<std::size_t>(i) * a->shape[1] + j];
  return r;
}

}  // namespace eqlm
