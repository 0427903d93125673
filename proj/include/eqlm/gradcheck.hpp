#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eqlm/detector.hpp"
#include "eqlm/losses.hpp"
#include "eqlm/network.hpp"
#include "eqlm/warp.hpp"

namespace eqlm {

struct GradCheckOptions {
  int instances = 20;
  double step = 1e-3;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string name;
  int instances = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

// ||a - n|| / max(||a||, ||n||, floor) with n the central-difference gradient
// of f with respect to x (perturbed in place and restored). The floor keeps
// gradients that vanish identically (a bias feeding a softmax) from comparing
// rounding noise against rounding noise.
inline constexpr double kGradientFloor = 1e-6;

inline double fd_relative_error(std::span<double> x, std::span<const double> analytic,
                                const std::function<double()>& f, double h) {
  double diff2 = 0, a2 = 0, n2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f();
    x[i] = saved - h;
    const double fm = f();
    x[i] = saved;
    const double num = (fp - fm) / (2 * h);
    diff2 += (num - analytic[i]) * (num - analytic[i]);
    a2 += analytic[i] * analytic[i];
    n2 += num * num;
  }
  const double denom = std::sqrt(std::max({a2, n2, kGradientFloor * kGradientFloor}));
  return std::sqrt(diff2) / denom;
}

namespace gradcheck_detail {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo = -1, double hi = 1) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Tensor4<double> random_tensor(Shape4 s, Rng& rng, double min_abs = 0) {
  Tensor4<double> t(s);
  for (auto& v : t.vec()) {
    do v = uniform(rng);
    while (std::abs(v) < min_abs);
  }
  return t;
}

// Whether every maxpool window has a clear winner.
inline bool separated_windows(const Tensor4<double>& x, int window, int stride, double gap) {
  const int ho = (x.height() - window) / stride + 1, wo = (x.width() - window) / stride + 1;
  for (int n = 0; n < x.batch(); ++n)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        for (int c = 0; c < x.channels(); ++c) {
          std::vector<double> vals;
          for (int dy = 0; dy < window; ++dy)
            for (int dx = 0; dx < window; ++dx) vals.push_back(x(n, oy * stride + dy, ox * stride + dx, c));
          std::sort(vals.rbegin(), vals.rend());
          if (vals.size() > 1 && vals[0] - vals[1] < gap) return false;
        }
  return true;
}

// Checks every parameter tensor and the input gradient of a one-layer (or
// small) network under L = sum(output * weights).
inline double check_network(Network<double>& net, Tensor4<double> input, Rng& rng, double h) {
  const auto probe = net.forward(input, Mode::train).output;
  const auto proj = random_tensor(probe.shape(), rng);
  auto loss = [&] {
    const auto y = net.forward(input, Mode::train).output;
    double s = 0;
    for (std::size_t k = 0; k < y.size(); ++k) s += y.vec()[k] * proj.vec()[k];
    return s;
  };
  const auto tape = net.forward(input, Mode::train);
  const auto g = net.backward(tape, proj);
  double worst = fd_relative_error(input.vec(), g.input.vec(), loss, h);
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    auto& p = net.params()[i];
    if (!p.trainable) continue;
    worst = std::max(worst, fd_relative_error(p.value, g.params[i], loss, h));
  }
  return worst;
}

// Smallest distance of any relu input from zero and of any maxpool winner from
// its runner-up (exact ties at zero from a preceding relu are harmless).
inline double kink_margin(Network<double>& net, const Tensor4<double>& input) {
  double margin = std::numeric_limits<double>::infinity();
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind != LayerKind::relu && layers[i].kind != LayerKind::maxpool) continue;
    const auto x = net.forward(input, Mode::train, i).output;
    if (layers[i].kind == LayerKind::relu) {
      for (double v : x.vec()) margin = std::min(margin, std::abs(v));
      continue;
    }
    const auto& l = layers[i];
    const int ho = (x.height() - l.window) / l.stride + 1, wo = (x.width() - l.window) / l.stride + 1;
    for (int n = 0; n < x.batch(); ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
          for (int c = 0; c < x.channels(); ++c) {
            std::vector<double> vals;
            for (int dy = 0; dy < l.window; ++dy)
              for (int dx = 0; dx < l.window; ++dx) vals.push_back(x(n, oy * l.stride + dy, ox * l.stride + dx, c));
            std::sort(vals.rbegin(), vals.rend());
            if (vals.size() > 1 && !(vals[0] == 0 && vals[1] == 0)) margin = std::min(margin, vals[0] - vals[1]);
          }
  }
  return margin;
}

inline void randomize_params(Network<double>& net, Rng& rng) {
  for (auto& p : net.params()) {
    if (!p.trainable) continue;
    for (auto& v : p.value) v = p.name.ends_with("gamma") ? uniform(rng, 0.5, 1.5) : uniform(rng);
  }
}

inline Tensor4<double> random_maps(Shape4 s, Rng& rng) {
  Tensor4<double> t(s);
  for (auto& v : t.vec()) v = uniform(rng, 0.01, 1.0);
  return t;
}

// True if every pooled cell has a clear maximum over landmarks.
inline bool separated_pooled_max(MapView<double> p, int m, double gap) {
  const int ph = (p.h + m - 1) / m, pw = (p.w + m - 1) / m;
  std::vector<double> pooled(static_cast<std::size_t>(ph) * pw * p.k, 0.0);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x)
      for (int r = 0; r < p.k; ++r) pooled[(static_cast<std::size_t>(y / m) * pw + x / m) * p.k + r] += p(y * p.w + x, r);
  for (std::size_t c = 0; c < static_cast<std::size_t>(ph) * pw; ++c) {
    std::vector<double> v(pooled.begin() + c * p.k, pooled.begin() + (c + 1) * p.k);
    std::sort(v.rbegin(), v.rend());
    if (v.size() > 1 && v[0] - v[1] < gap) return false;
  }
  return true;
}

}  // namespace gradcheck_detail

// Finite-difference checks of every layer kind and every loss term, in
// 64-bit arithmetic.
inline std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& opt = {}) {
  using namespace gradcheck_detail;
  std::vector<GradCheckResult> results;
  Rng rng(opt.seed);
  const double h = opt.step;

  auto run = [&](const std::string& name, const std::function<double(Rng&)>& instance) {
    GradCheckResult r{name, opt.instances, 0.0, opt.tolerance};
    for (int i = 0; i < opt.instances; ++i) r.max_rel_error = std::max(r.max_rel_error, instance(rng));
    results.push_back(r);
  };
  auto small_shape = [](Rng& g, int c) {
    std::uniform_int_distribution<int> d(4, 6);
    return Shape4{2, d(g), d(g), c};
  };

  run("conv", [&](Rng& g) {
    const int cin = std::uniform_int_distribution<int>(1, 3)(g), cout = std::uniform_int_distribution<int>(1, 3)(g);
    const int k = std::bernoulli_distribution(0.5)(g) ? 3 : 5;
    Network<double> net({LayerSpec::conv(k, cin, cout, k / 2, true)});
    randomize_params(net, g);
    return check_network(net, random_tensor(small_shape(g, cin), g), g, h);
  });
  run("batchnorm", [&](Rng& g) {
    const int c = std::uniform_int_distribution<int>(1, 3)(g);
    Network<double> net({LayerSpec::batchnorm(c)});
    randomize_params(net, g);
    return check_network(net, random_tensor(small_shape(g, c), g), g, h);
  });
  run("relu", [&](Rng& g) {
    Network<double> net({LayerSpec::relu()});
    return check_network(net, random_tensor(small_shape(g, 2), g, 0.01), g, h);
  });
  run("maxpool", [&](Rng& g) {
    Network<double> net({LayerSpec::maxpool(2, 2)});
    Tensor4<double> x;
    do x = random_tensor(small_shape(g, 2), g);
    while (!separated_windows(x, 2, 2, 0.01));
    return check_network(net, x, g, h);
  });
  run("spatial-softmax", [&](Rng& g) {
    Network<double> net({LayerSpec::spatial_softmax()});
    return check_network(net, random_tensor(small_shape(g, 3), g), g, h);
  });

  run("network", [&](Rng& g) {
    Network<double> net({LayerSpec::conv(3, 2, 3, 1, false), LayerSpec::batchnorm(3), LayerSpec::relu(),
                         LayerSpec::maxpool(2, 2), LayerSpec::conv(3, 3, 2, 1, true), LayerSpec::spatial_softmax()});
    Tensor4<double> x;
    do {
      randomize_params(net, g);
      x = random_tensor({2, 6, 6, 2}, g);
    } while (kink_margin(net, x) < 5 * h);
    return check_network(net, x, g, h);
  });

  const auto warp_cfg = WarpSamplerConfig::mnist_g2();
  auto maps_shape = [](Rng& g) {
    std::uniform_int_distribution<int> d(3, 8), kd(1, 4);
    return Shape4{1, d(g), d(g), kd(g)};
  };

  run("soft-argmax", [&](Rng& g) {
    auto maps = random_maps(maps_shape(g), g);
    std::vector<LandmarkSet> w{LandmarkSet(maps.channels())};
    for (auto& p : w[0]) p = {uniform(g), uniform(g)};
    auto f = [&] {
      const auto lm = soft_argmax(maps);
      double s = 0;
      for (int r = 0; r < maps.channels(); ++r) s += dot(lm[0][r], w[0][r]);
      return s;
    };
    const auto grad = soft_argmax_backward<double>(maps.shape(), w);
    return fd_relative_error(maps.vec(), grad.vec(), f, h);
  });
  run("align-points", [&](Rng& g) {
    const int k = std::uniform_int_distribution<int>(1, 5)(g);
    const auto warp = sample_tps(warp_cfg, g);
    std::vector<double> u(2 * k), v(2 * k);
    for (auto& x : u) x = uniform(g, -0.9, 0.9);
    for (auto& x : v) x = uniform(g, -0.9, 0.9);
    auto as_set = [](const std::vector<double>& a) {
      LandmarkSet s(a.size() / 2);
      for (std::size_t r = 0; r < s.size(); ++r) s[r] = {a[2 * r], a[2 * r + 1]};
      return s;
    };
    auto f = [&] { return align_loss_points(as_set(u), as_set(v), warp); };
    LandmarkSet du, dv;
    align_loss_points(as_set(u), as_set(v), warp, &du, &dv);
    std::vector<double> gu, gvv;
    for (auto p : du) gu.insert(gu.end(), {p.x, p.y});
    for (auto p : dv) gvv.insert(gvv.end(), {p.x, p.y});
    return std::max(fd_relative_error(u, gu, f, h), fd_relative_error(v, gvv, f, h));
  });
  run("align-probmaps", [&](Rng& g) {
    const auto s = maps_shape(g);
    auto px = random_maps(s, g), pxp = random_maps(s, g);
    const auto warp = sample_tps(warp_cfg, g);
    const auto gv = warped_grid(warp, s.h, s.w);
    auto f = [&] { return align_loss_probmaps(view(px, 0), view(pxp, 0), std::span<const Vec2>(gv)); };
    Tensor4<double> dx(s), dxp(s);
    align_loss_probmaps(view(px, 0), view(pxp, 0), std::span<const Vec2>(gv), dx.data(), dxp.data());
    return std::max(fd_relative_error(px.vec(), dx.vec(), f, h), fd_relative_error(pxp.vec(), dxp.vec(), f, h));
  });
  for (bool diag : {false, true})
    run(diag ? "div-overlap-diagonal" : "div-overlap", [&, diag](Rng& g) {
      auto p = random_maps(maps_shape(g), g);
      auto f = [&] { return div_loss_overlap(view(p, 0), diag); };
      Tensor4<double> d(p.shape());
      div_loss_overlap(view(p, 0), diag, d.data());
      return fd_relative_error(p.vec(), d.vec(), f, h);
    });
  for (int m : {1, 3})
    run(m == 1 ? "div-max" : "div-pooled", [&, m](Rng& g) {
      Tensor4<double> p;
      do p = random_maps(maps_shape(g), g);
      while (!separated_pooled_max(view(p, 0), m, 0.01));
      auto f = [&] { return div_loss_pooled(view(p, 0), m); };
      Tensor4<double> d(p.shape());
      div_loss_pooled(view(p, 0), m, d.data());
      return fd_relative_error(p.vec(), d.vec(), f, h);
    });
  run("objective", [&](Rng& g) {
    auto s = maps_shape(g);
    s.n = 2;
    LossConfig cfg{5.0, 0.1, 2};
    Tensor4<double> px, pxp;
    do {
      px = random_maps(s, g);
      pxp = random_maps(s, g);
    } while (!separated_pooled_max(view(px, 0), 2, 0.01) || !separated_pooled_max(view(px, 1), 2, 0.01) ||
             !separated_pooled_max(view(pxp, 0), 2, 0.01) || !separated_pooled_max(view(pxp, 1), 2, 0.01));
    std::vector<TpsWarp> warps{sample_tps(warp_cfg, g), sample_tps(warp_cfg, g)};
    Network<double> net({LayerSpec::conv(3, 1, 2, 1, true)});
    randomize_params(net, g);
    auto f = [&] { return objective(px, pxp, std::span<const TpsWarp>(warps), net, cfg).terms.total; };
    const auto res = objective(px, pxp, std::span<const TpsWarp>(warps), net, cfg);
    auto grads = net.zero_gradients();
    add_weight_decay_gradient(net, grads, cfg.lambda);
    return std::max({fd_relative_error(px.vec(), res.grad_x.vec(), f, h),
                     fd_relative_error(pxp.vec(), res.grad_xp.vec(), f, h),
                     fd_relative_error(net.params()[0].value, grads.params[0], f, h)});
  });
  return results;
}

}  // namespace eqlm
