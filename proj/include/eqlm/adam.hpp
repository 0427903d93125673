#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "eqlm/errors.hpp"
#include "eqlm/layers.hpp"

namespace eqlm {

struct AdamSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamSettings settings;
  std::vector<std::vector<double>> m, v;
  long step = 0;

  AdamState() = default;
  AdamState(const std::vector<Param<T>>& params, AdamSettings s) : settings(s) {
    if (!(s.learning_rate >= 0) || !(s.beta1 > 0 && s.beta1 < 1) || !(s.beta2 > 0 && s.beta2 < 1) ||
        !(s.eps > 0))
      throw ConfigError("invalid Adam settings");
    for (const auto& p : params) {
      m.emplace_back(p.value.size(), 0.0);
      v.emplace_back(p.value.size(), 0.0);
    }
  }
};

// One bias-corrected Adam update of every trainable parameter. Throws before
// touching anything if a gradient is non-finite.
template <typename T>
void adam_step(std::vector<Param<T>>& params, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw UsageError("adam_step: parameter/gradient/state count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    if (grads[i].size() != params[i].value.size() || state.m[i].size() != params[i].value.size())
      throw UsageError("adam_step: shape mismatch for '" + params[i].name + "'");
    for (T g : grads[i])
      if (!std::isfinite(g))
        throw NumericError("adam_step: non-finite gradient in '" + params[i].name + "'");
  }
  const auto& s = state.settings;
  ++state.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto& w = params[i].value;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = grads[i][k];
      m[k] = s.beta1 * m[k] + (1 - s.beta1) * g;
      v[k] = s.beta2 * v[k] + (1 - s.beta2) * g * g;
      w[k] = static_cast<T>(w[k] - s.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + s.eps));
    }
  }
}

}  // namespace eqlm
