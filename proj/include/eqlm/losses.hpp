#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "eqlm/detector.hpp"
#include "eqlm/errors.hpp"
#include "eqlm/geometry.hpp"
#include "eqlm/network.hpp"
#include "eqlm/tensor.hpp"
#include "eqlm/warp.hpp"

namespace eqlm {

struct LossConfig {
  double gamma = 500;    // diversity weight
  double lambda = 5e-4;  // weight decay
  int pool = 3;          // diversity sum-pooling window m

  void validate() const {
    if (!(gamma >= 0) || !(lambda >= 0)) throw ConfigError("loss config: gamma and lambda must be >= 0");
    if (pool < 1) throw ConfigError("loss config: pooling window must be >= 1");
  }
};

// One batch item of a (batch, h, w, K) map tensor, cell-major.
template <typename T>
struct MapView {
  const T* data = nullptr;
  int h = 0, w = 0, k = 0;

  int cells() const { return h * w; }
  T operator()(int cell, int r) const { return data[static_cast<std::size_t>(cell) * k + r]; }
};

template <typename T>
MapView<T> view(const Tensor4<T>& maps, int n) {
  return {maps.item(n), maps.height(), maps.width(), maps.channels()};
}

// g evaluated at every cell center of an h x w grid.
template <typename Map>
std::vector<Vec2> warped_grid(const Map& g, int h, int w) {
  auto pts = cell_centers(h, w);
  for (auto& p : pts) p = g(p);
  return pts;
}

// (1/K) sum_r |u_r - g(v_r)|^2 with u from x and v from x'. Optional outputs
// receive d/du and d/dv (the latter needs g.jacobian).
template <typename Warp>
double align_loss_points(const LandmarkSet& u, const LandmarkSet& v, const Warp& g,
                         LandmarkSet* du = nullptr, LandmarkSet* dv = nullptr) {
  if (u.size() != v.size() || u.empty())
    throw UsageError("align_loss_points: landmark sets must be non-empty and the same size");
  const double k = static_cast<double>(u.size());
  if (du) du->assign(u.size(), {});
  if (dv) dv->assign(u.size(), {});
  double loss = 0;
  for (std::size_t r = 0; r < u.size(); ++r) {
    const Vec2 diff = u[r] - g(v[r]);
    loss += norm2(diff);
    if (du) (*du)[r] = (2.0 / k) * diff;
    if (dv) (*dv)[r] = (-2.0 / k) * g.jacobian(v[r]).transposed_times(diff);
  }
  return loss / k;
}

// (1/K) sum_r sum_{u,v} |u - g(v)|^2 p(u|x,r) p(v|x',r), evaluated in linear
// time as sum_u |u|^2 p + sum_v |g(v)|^2 p' - 2 (sum_u u p).(sum_v g(v) p').
// `gv` holds g at the cell centers of x'. Gradients (scaled) are accumulated
// into dpx / dpxp when given.
template <typename T>
double align_loss_probmaps(MapView<T> px, MapView<T> pxp, std::span<const Vec2> gv,
                           T* dpx = nullptr, T* dpxp = nullptr, double scale = 1.0) {
  if (px.h != pxp.h || px.w != pxp.w || px.k != pxp.k)
    throw UsageError("align_loss_probmaps: map shapes differ");
  if (gv.size() != static_cast<std::size_t>(pxp.cells()))
    throw UsageError("align_loss_probmaps: warped grid size mismatch");
  const auto u = cell_centers(px.h, px.w);
  const int k = px.k, n = px.cells();
  double total = 0;
  for (int r = 0; r < k; ++r) {
    double a = 0, b = 0;
    Vec2 mu, mg;
    for (int c = 0; c < n; ++c) {
      const double p = px(c, r), q = pxp(c, r);
      a += norm2(u[c]) * p;
      mu = mu + p * u[c];
      b += norm2(gv[c]) * q;
      mg = mg + q * gv[c];
    }
    total += a + b - 2.0 * dot(mu, mg);
    const double s = scale / k;
    if (dpx)
      for (int c = 0; c < n; ++c)
        dpx[static_cast<std::size_t>(c) * k + r] += static_cast<T>(s * (norm2(u[c]) - 2.0 * dot(u[c], mg)));
    if (dpxp)
      for (int c = 0; c < n; ++c)
        dpxp[static_cast<std::size_t>(c) * k + r] += static_cast<T>(s * (norm2(gv[c]) - 2.0 * dot(gv[c], mu)));
  }
  return total / k;
}

template <typename T, typename Warp>
double align_loss_probmaps(const Tensor4<T>& maps_x, const Tensor4<T>& maps_xp, const Warp& g, int n = 0) {
  if (maps_x.shape() != maps_xp.shape()) throw UsageError("align_loss_probmaps: map shapes differ");
  const auto gv = warped_grid(g, maps_xp.height(), maps_xp.width());
  return align_loss_probmaps(view(maps_x, n), view(maps_xp, n), std::span<const Vec2>(gv));
}

// (1/K^2) sum_{r,r'} sum_u p(u|r) p(u|r'), by default over r != r' only.
template <typename T>
double div_loss_overlap(MapView<T> p, bool include_diagonal = false, T* dp = nullptr, double scale = 1.0) {
  const int k = p.k;
  const double norm = 1.0 / (static_cast<double>(k) * k);
  double total = 0;
  for (int c = 0; c < p.cells(); ++c) {
    double s = 0, sq = 0;
    for (int r = 0; r < k; ++r) {
      s += p(c, r);
      sq += static_cast<double>(p(c, r)) * p(c, r);
    }
    total += include_diagonal ? s * s : s * s - sq;
    if (dp)
      for (int r = 0; r < k; ++r)
        dp[static_cast<std::size_t>(c) * k + r] +=
            static_cast<T>(scale * norm * 2.0 * (include_diagonal ? s : s - p(c, r)));
  }
  return norm * total;
}

// K - sum_u max_r P(u|r) where P sums p over non-overlapping m x m windows
// (partial windows at the right/bottom edges). The subgradient routes -1 to
// the lowest-index landmark attaining each maximum.
template <typename T>
double div_loss_pooled(MapView<T> p, int m, T* dp = nullptr, double scale = 1.0) {
  if (m < 1) throw ConfigError("div_loss_pooled: window must be >= 1");
  const int ph = (p.h + m - 1) / m, pw = (p.w + m - 1) / m, k = p.k;
  std::vector<double> pooled(static_cast<std::size_t>(ph) * pw * k, 0.0);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x)
      for (int r = 0; r < k; ++r)
        pooled[(static_cast<std::size_t>(y / m) * pw + x / m) * k + r] += p(y * p.w + x, r);
  double sum_max = 0;
  std::vector<int> winner(static_cast<std::size_t>(ph) * pw);
  for (std::size_t c = 0; c < winner.size(); ++c) {
    int best = 0;
    for (int r = 1; r < k; ++r)
      if (pooled[c * k + r] > pooled[c * k + best]) best = r;
    winner[c] = best;
    sum_max += pooled[c * k + best];
  }
  if (dp)
    for (int y = 0; y < p.h; ++y)
      for (int x = 0; x < p.w; ++x) {
        const int r = winner[static_cast<std::size_t>(y / m) * pw + x / m];
        dp[(static_cast<std::size_t>(y) * p.w + x) * k + r] -= static_cast<T>(scale);
      }
  return static_cast<double>(k) - sum_max;
}

// K - sum_u max_r p(u|r).
template <typename T>
double div_loss_max(MapView<T> p, T* dp = nullptr, double scale = 1.0) {
  return div_loss_pooled(p, 1, dp, scale);
}

struct ObjectiveTerms {
  double align = 0;         // mean alignment loss
  double div_x = 0;         // gamma * mean pooled diversity of x
  double div_xp = 0;        // gamma * mean pooled diversity of x'
  double weight_decay = 0;  // lambda * sum of squared conv weights
  double total = 0;
};

template <typename T>
struct ObjectiveResult {
  ObjectiveTerms terms;
  Tensor4<T> grad_x, grad_xp;  // d total / d maps
};

inline void check_finite_term(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("objective: non-finite term '") + name + "'");
}

// lambda R + mean_i [ align(x_i, x'_i, g_i) + gamma div(x_i) + gamma div(x'_i) ].
// `warps[i]` relates x'_i to x_i (x'_i(v) = x_i(g_i(v))).
template <typename T, typename Warp>
ObjectiveResult<T> objective(const Tensor4<T>& maps_x, const Tensor4<T>& maps_xp, std::span<const Warp> warps,
                             double weight_norm2, const LossConfig& cfg) {
  cfg.validate();
  if (maps_x.shape() != maps_xp.shape()) throw UsageError("objective: map shapes differ");
  if (warps.size() != static_cast<std::size_t>(maps_x.batch()))
    throw UsageError("objective: one warp per batch item required");
  ObjectiveResult<T> res{{}, Tensor4<T>(maps_x.shape()), Tensor4<T>(maps_x.shape())};
  const int batch = maps_x.batch();
  const double inv_n = 1.0 / batch;
  double align = 0, dx = 0, dxp = 0;
  for (int n = 0; n < batch; ++n) {
    const auto gv = warped_grid(warps[n], maps_xp.height(), maps_xp.width());
    align += align_loss_probmaps(view(maps_x, n), view(maps_xp, n), std::span<const Vec2>(gv),
                                 res.grad_x.item(n), res.grad_xp.item(n), inv_n);
    if (cfg.gamma > 0) {
      dx += div_loss_pooled(view(maps_x, n), cfg.pool, res.grad_x.item(n), cfg.gamma * inv_n);
      dxp += div_loss_pooled(view(maps_xp, n), cfg.pool, res.grad_xp.item(n), cfg.gamma * inv_n);
    }
  }
  auto& t = res.terms;
  t.align = align * inv_n;
  t.div_x = cfg.gamma * dx * inv_n;
  t.div_xp = cfg.gamma * dxp * inv_n;
  t.weight_decay = cfg.lambda * weight_norm2;
  check_finite_term(t.align, "align");
  check_finite_term(t.div_x, "div_x");
  check_finite_term(t.div_xp, "div_xp");
  check_finite_term(t.weight_decay, "weight_decay");
  t.total = t.weight_decay + t.align + t.div_x + t.div_xp;
  return res;
}

template <typename T, typename Warp>
ObjectiveResult<T> objective(const Tensor4<T>& maps_x, const Tensor4<T>& maps_xp, std::span<const Warp> warps,
                             const Network<T>& net, const LossConfig& cfg) {
  return objective(maps_x, maps_xp, warps, net.weight_norm2(), cfg);
}

// Adds d(lambda R)/dw = 2 lambda w for every decayed parameter.
template <typename T>
void add_weight_decay_gradient(const Network<T>& net, Gradients<T>& g, double lambda) {
  const auto& params = net.params();
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].decayed)
      for (std::size_t k = 0; k < params[i].value.size(); ++k)
        g.params[i][k] += static_cast<T>(2.0 * lambda * params[i].value[k]);
}

}  // namespace eqlm
