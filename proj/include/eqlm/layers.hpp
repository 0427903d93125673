#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eqlm/errors.hpp"

namespace eqlm {

enum class LayerKind { conv, batchnorm, relu, maxpool, spatial_softmax };
enum class Mode { train, eval };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::spatial_softmax: return "spatial-softmax";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::conv, LayerKind::batchnorm, LayerKind::relu,
                 LayerKind::maxpool, LayerKind::spatial_softmax})
    if (s == to_string(k)) return k;
  throw FormatError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv
  int kernel = 0;
  int in_channels = 0;
  int out_channels = 0;
  int padding = 0;
  bool bias = true;
  // batchnorm
  double momentum = 0.9;
  double eps = 1e-5;
  // maxpool
  int window = 2;
  int stride = 2;

  static LayerSpec conv(int kernel, int in_ch, int out_ch, int padding, bool bias) {
    LayerSpec s;
    s.kind = LayerKind::conv;
    s.kernel = kernel;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.padding = padding;
    s.bias = bias;
    return s;
  }
  static LayerSpec batchnorm(int channels) {
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    s.in_channels = s.out_channels = channels;
    return s;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec maxpool(int window, int stride) {
    LayerSpec s;
    s.kind = LayerKind::maxpool;
    s.window = window;
    s.stride = stride;
    return s;
  }
  static LayerSpec spatial_softmax() {
    LayerSpec s;
    s.kind = LayerKind::spatial_softmax;
    return s;
  }

  void validate(std::size_t index) const {
    const auto where = "layer " + std::to_string(index) + " (" + to_string(kind) + "): ";
    switch (kind) {
      case LayerKind::conv:
        if (out_channels <= 0 || in_channels <= 0)
          throw ConfigError(where + "channel counts must be positive");
        if (kernel <= 0 || padding < 0)
          throw ConfigError(where + "invalid kernel/padding");
        break;
      case LayerKind::batchnorm:
        if (in_channels <= 0) throw ConfigError(where + "channel count must be positive");
        if (!(momentum >= 0 && momentum < 1) || !(eps > 0))
          throw ConfigError(where + "invalid momentum/eps");
        break;
      case LayerKind::maxpool:
        if (stride < 1 || window < 1) throw ConfigError(where + "window and stride must be >= 1");
        break;
      default:
        break;
    }
  }
};

// A named parameter array. Running statistics are carried as non-trainable
// parameters so they persist alongside the weights.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  bool trainable = true;
  bool decayed = false;  // included in the weight shrinkage term
};

}  // namespace eqlm
