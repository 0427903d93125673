#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "eqlm/errors.hpp"
#include "eqlm/geometry.hpp"
#include "eqlm/tensor.hpp"

namespace eqlm {

// Standard deviations for sampling a warp. Destination control points are the
// regular grid plus N(0, sigma_w) per element, plus N(0, sigma_W) with
// probability extra_prob; the similarity part has rotation N(0, rotation_deg),
// translation N(0, translation) and scale N(1, scale).
struct WarpSamplerConfig {
  int grid = 5;
  double sigma_w = 0;
  double sigma_W = 0;
  double rotation_deg = 0;
  double translation = 0;
  double scale = 0;
  double extra_prob = 0.5;

  void validate() const {
    if (grid < 2) throw ConfigError("warp sampler: grid size must be >= 2");
    for (double s : {sigma_w, sigma_W, rotation_deg, translation, scale})
      if (!(s >= 0) || !std::isfinite(s)) throw ConfigError("warp sampler: std-devs must be finite and >= 0");
    if (!(extra_prob >= 0 && extra_prob <= 1))
      throw ConfigError("warp sampler: extra perturbation probability must be in [0,1]");
  }

  static WarpSamplerConfig zero() { return {2, 0, 0, 0, 0, 0, 0}; }
  static WarpSamplerConfig mnist_g1() { return {5, 0.005, 0.01, 15, 0.1, 0.05, 0.5}; }
  static WarpSamplerConfig mnist_g2() { return {5, 0.005, 0.02, 20, 0.1, 0.05, 0.5}; }
  static WarpSamplerConfig faces_g1() { return {10, 0.001, 0.001, 0, 0, 0, 0.5}; }
  static WarpSamplerConfig faces_g2() { return {10, 0.001, 0.01, 20, 0.1, 0.05, 0.5}; }
};

struct Similarity {
  double rotation = 0;  // radians
  double scale = 1;
  Vec2 translation;

  Vec2 operator()(Vec2 p) const {
    const double c = std::cos(rotation), s = std::sin(rotation);
    return Vec2{scale * (c * p.x - s * p.y), scale * (s * p.x + c * p.y)} + translation;
  }
};

// Per-axis affine change of normalized frame: p -> scale * p + offset.
struct AxisAffine {
  Vec2 scale{1, 1};
  Vec2 offset{0, 0};

  Vec2 operator()(Vec2 p) const { return {scale.x * p.x + offset.x, scale.y * p.y + offset.y}; }
  Vec2 inverse(Vec2 q) const { return {(q.x - offset.x) / scale.x, (q.y - offset.y) / scale.y}; }
  bool is_identity() const { return scale == Vec2{1, 1} && offset == Vec2{0, 0}; }
};

// Thin-plate spline f(p) = a0 + p.x * ax + p.y * ay + sum_i w_i U(|p - c_i|),
// U(r) = r^2 log r^2, fitted to interpolate source -> destination control
// points. An optional frame change h = F^-1 o f o F re-expresses the same
// warp in another image frame (used after cropping).
class TpsWarp {
 public:
  static constexpr double kJitter = 1e-8;

  TpsWarp() = default;

  static TpsWarp identity() { return TpsWarp{}; }

  static TpsWarp fit(std::vector<Vec2> source, std::vector<Vec2> destination) {
    if (source.size() != destination.size())
      throw UsageError("TpsWarp::fit: control point count mismatch");
    TpsWarp w;
    const auto n = static_cast<Eigen::Index>(source.size());
    if (n == 0) return w;
    if (n < 3) throw ConfigError("TpsWarp::fit: need at least 3 control points");
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n + 3, n + 3);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) L(i, j) = kernel(norm2(source[i] - source[j]));
      L(i, i) += kJitter;
      L(i, n) = L(n, i) = 1;
      L(i, n + 1) = L(n + 1, i) = source[i].x;
      L(i, n + 2) = L(n + 2, i) = source[i].y;
      rhs(i, 0) = destination[i].x;
      rhs(i, 1) = destination[i].y;
    }
    const Eigen::MatrixXd sol = L.fullPivLu().solve(rhs);
    w.weights_.resize(source.size());
    for (Eigen::Index i = 0; i < n; ++i) w.weights_[i] = {sol(i, 0), sol(i, 1)};
    w.a0_ = {sol(n, 0), sol(n, 1)};
    w.ax_ = {sol(n + 1, 0), sol(n + 1, 1)};
    w.ay_ = {sol(n + 2, 0), sol(n + 2, 1)};
    w.source_ = std::move(source);
    w.destination_ = std::move(destination);
    return w;
  }

  Vec2 operator()(Vec2 p) const {
    if (!frame_.is_identity()) return frame_.inverse(core(frame_(p)));
    return core(p);
  }

  Mat2 jacobian(Vec2 p) const {
    if (frame_.is_identity()) return core_jacobian(p);
    const Mat2 j = core_jacobian(frame_(p));
    const double sx = frame_.scale.x, sy = frame_.scale.y;
    return {j.a, j.b * sy / sx, j.c * sx / sy, j.d};
  }

  // Solves h(p) = q by damped Newton iteration starting from q.
  Vec2 inverse(Vec2 q, int max_iter = 50, double tol = 1e-12) const {
    Vec2 p = q;
    for (int it = 0; it < max_iter; ++it) {
      const Vec2 r = (*this)(p) - q;
      if (norm2(r) < tol * tol) break;
      const Mat2 j = jacobian(p);
      const double det = j.a * j.d - j.b * j.c;
      if (std::abs(det) < 1e-14) throw NumericError("TpsWarp::inverse: singular Jacobian");
      const Vec2 step{(j.d * r.x - j.b * r.y) / det, (-j.c * r.x + j.a * r.y) / det};
      p = p - step;
    }
    return p;
  }

  // Same warp expressed in a frame F (points p in the new frame map to F(p) in
  // the current one).
  TpsWarp reframed(const AxisAffine& f) const {
    TpsWarp out = *this;
    out.frame_ = {{frame_.scale.x * f.scale.x, frame_.scale.y * f.scale.y},
                  {frame_.scale.x * f.offset.x + frame_.offset.x,
                   frame_.scale.y * f.offset.y + frame_.offset.y}};
    return out;
  }

  // Control points in this warp's frame.
  std::vector<Vec2> source_points() const { return in_frame(source_); }
  std::vector<Vec2> destination_points() const { return in_frame(destination_); }

  const AxisAffine& frame() const { return frame_; }
  const Similarity& similarity() const { return similarity_; }
  void set_similarity(const Similarity& s) { similarity_ = s; }

 private:
  static double kernel(double r2) { return r2 > 0 ? r2 * std::log(r2) : 0.0; }

  Vec2 core(Vec2 p) const {
    Vec2 out = a0_ + p.x * ax_ + p.y * ay_;
    for (std::size_t i = 0; i < source_.size(); ++i) out = out + kernel(norm2(p - source_[i])) * weights_[i];
    return out;
  }

  Mat2 core_jacobian(Vec2 p) const {
    Mat2 j{ax_.x, ay_.x, ax_.y, ay_.y};
    for (std::size_t i = 0; i < source_.size(); ++i) {
      const Vec2 d = p - source_[i];
      const double r2 = norm2(d);
      if (r2 <= 0) continue;
      const double f = 2.0 * (std::log(r2) + 1.0);
      j.a += weights_[i].x * f * d.x;
      j.b += weights_[i].x * f * d.y;
      j.c += weights_[i].y * f * d.x;
      j.d += weights_[i].y * f * d.y;
    }
    return j;
  }

  std::vector<Vec2> in_frame(const std::vector<Vec2>& pts) const {
    std::vector<Vec2> out;
    out.reserve(pts.size());
    for (auto p : pts) out.push_back(frame_.inverse(p));
    return out;
  }

  std::vector<Vec2> source_, destination_, weights_;
  Vec2 a0_{0, 0}, ax_{1, 0}, ay_{0, 1};
  AxisAffine frame_;
  Similarity similarity_;
};

// Regular grid x grid control points spanning [-1, 1]^2, row-major.
inline std::vector<Vec2> control_grid(int grid) {
  std::vector<Vec2> pts;
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j)
      pts.push_back({-1.0 + 2.0 * j / (grid - 1), -1.0 + 2.0 * i / (grid - 1)});
  return pts;
}

template <typename Rng>
TpsWarp sample_tps(const WarpSamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution extra(cfg.extra_prob);
  auto source = control_grid(cfg.grid);
  std::vector<Vec2> offsets(source.size());
  for (auto& o : offsets) {
    o.x = cfg.sigma_w * normal(rng);
    o.y = cfg.sigma_w * normal(rng);
  }
  for (auto& o : offsets) {
    if (extra(rng)) o.x += cfg.sigma_W * normal(rng);
    if (extra(rng)) o.y += cfg.sigma_W * normal(rng);
  }
  Similarity sim;
  sim.rotation = cfg.rotation_deg * normal(rng) * std::numbers::pi / 180.0;
  sim.translation.x = cfg.translation * normal(rng);
  sim.translation.y = cfg.translation * normal(rng);
  sim.scale = 1.0 + cfg.scale * normal(rng);
  std::vector<Vec2> destination(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) destination[i] = sim(source[i] + offsets[i]);
  auto w = TpsWarp::fit(std::move(source), std::move(destination));
  w.set_similarity(sim);
  return w;
}

inline TpsWarp sample_tps(const WarpSamplerConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_tps(cfg, rng);
}

// compose(g1, g2)(p) = g1(g2(p)).
template <typename A, typename B>
struct Composition {
  A first;
  B second;
  Vec2 operator()(Vec2 p) const { return first(second(p)); }
};

template <typename A, typename B>
Composition<A, B> compose(A g1, B g2) {
  return {std::move(g1), std::move(g2)};
}

enum class FillPolicy { constant, edge_replicate };

struct Fill {
  FillPolicy policy = FillPolicy::edge_replicate;
  float value = 0.0f;
};

// Bilinear sample of batch item n at pixel coordinates (px, py).
inline float sample_bilinear(const Tensor4<float>& img, int n, double px, double py, int c,
                             const Fill& fill) {
  const int h = img.height(), w = img.width();
  const double fx = std::floor(px), fy = std::floor(py);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const double ax = px - fx, ay = py - fy;
  auto at = [&](int y, int x) -> double {
    if (x < 0 || x >= w || y < 0 || y >= h) {
      if (fill.policy == FillPolicy::constant) return fill.value;
      x = std::clamp(x, 0, w - 1);
      y = std::clamp(y, 0, h - 1);
    }
    return img(n, y, x, c);
  };
  const double top = (1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1);
  const double bottom = (1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1);
  return static_cast<float>((1 - ay) * top + ay * bottom);
}

// Inverse warping: out(v) = image(map(v)), with v and map(v) in the
// normalized frames of the output and input images respectively. Leaf
// operation; nothing is differentiated through it.
template <typename Map>
Tensor4<float> warp_image(const Tensor4<float>& image, const Map& map, int out_h, int out_w,
                          const Fill& fill = {}) {
  if (out_h <= 0 || out_w <= 0)
    throw ConfigError("warp_image: degenerate output size " + std::to_string(out_h) + "x" +
                      std::to_string(out_w));
  if (image.height() <= 0 || image.width() <= 0) throw ConfigError("warp_image: empty input image");
  Tensor4<float> out(image.batch(), out_h, out_w, image.channels());
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Vec2 src = map(Vec2{pixel_to_norm(x, out_w), pixel_to_norm(y, out_h)});
      const double px = norm_to_pixel(src.x, image.width());
      const double py = norm_to_pixel(src.y, image.height());
      for (int n = 0; n < image.batch(); ++n)
        for (int c = 0; c < image.channels(); ++c) out(n, y, x, c) = sample_bilinear(image, n, px, py, c, fill);
    }
  return out;
}

}  // namespace eqlm
