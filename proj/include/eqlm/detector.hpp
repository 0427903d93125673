#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "eqlm/errors.hpp"
#include "eqlm/geometry.hpp"
#include "eqlm/network.hpp"

namespace eqlm {

// K landmark coordinates in normalized image coordinates.
using LandmarkSet = std::vector<Vec2>;

// Filter counts of the five hidden conv blocks; the sixth has K filters.
inline constexpr std::array<int, 5> kDetectorWidths{20, 48, 64, 80, 256};
inline constexpr std::array<int, 6> kDetectorKernels{5, 5, 3, 3, 3, 3};

// conv-bn-relu x5 (one 2x2/2 maxpool after the first block), then a plain
// conv producing K score maps, then the spatial softmax.
inline std::vector<LayerSpec> detector_layers(int landmarks, int in_channels) {
  if (landmarks < 1) throw ConfigError("detector: landmark count must be >= 1");
  if (in_channels < 1) throw ConfigError("detector: input channel count must be >= 1");
  std::vector<LayerSpec> layers;
  int ch = in_channels;
  for (std::size_t i = 0; i < kDetectorWidths.size(); ++i) {
    const int k = kDetectorKernels[i];
    layers.push_back(LayerSpec::conv(k, ch, kDetectorWidths[i], k / 2, false));
    layers.push_back(LayerSpec::batchnorm(kDetectorWidths[i]));
    layers.push_back(LayerSpec::relu());
    if (i == 0) layers.push_back(LayerSpec::maxpool(2, 2));
    ch = kDetectorWidths[i];
  }
  layers.push_back(LayerSpec::conv(kDetectorKernels[5], ch, landmarks, kDetectorKernels[5] / 2, true));
  layers.push_back(LayerSpec::spatial_softmax());
  return layers;
}

inline void check_detector_input(const Shape4& s, int in_channels) {
  if (s.h < 8 || s.w < 8 || s.h % 2 || s.w % 2)
    throw ConfigError("detector input must have even spatial dims >= 8, got " + to_string(s));
  if (s.c != in_channels)
    throw ConfigError("detector expects " + std::to_string(in_channels) + " channels, got " + to_string(s));
}

template <typename T>
struct Detection {
  Tensor4<T> maps;                      // (batch, H/2, W/2, K) probabilities
  std::vector<LandmarkSet> landmarks;   // one set per batch item
};

// Expected cell-center coordinate under each probability map.
template <typename T>
std::vector<LandmarkSet> soft_argmax(const Tensor4<T>& maps) {
  const int h = maps.height(), w = maps.width(), k = maps.channels();
  std::vector<LandmarkSet> out(maps.batch(), LandmarkSet(k));
  for (int n = 0; n < maps.batch(); ++n)
    for (int r = 0; r < k; ++r) {
      double sx = 0, sy = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double p = maps(n, y, x, r);
          sx += p * pixel_to_norm(x, w);
          sy += p * pixel_to_norm(y, h);
        }
      out[n][r] = {sx, sy};
    }
  return out;
}

// Pulls a gradient w.r.t. landmark coordinates back onto the maps.
template <typename T>
Tensor4<T> soft_argmax_backward(const Shape4& map_shape, const std::vector<LandmarkSet>& d_coords) {
  Tensor4<T> d(map_shape);
  for (int n = 0; n < map_shape.n; ++n)
    for (int y = 0; y < map_shape.h; ++y)
      for (int x = 0; x < map_shape.w; ++x)
        for (int r = 0; r < map_shape.c; ++r) {
          const Vec2 g = d_coords[n][r];
          d(n, y, x, r) = static_cast<T>(g.x * pixel_to_norm(x, map_shape.w) + g.y * pixel_to_norm(y, map_shape.h));
        }
  return d;
}

template <typename T>
Tensor4<T> spatial_softmax(Tensor4<T> scores) {
  if (!scores.all_finite()) throw NumericError("spatial_softmax: non-finite score");
  spatial_softmax_inplace(scores);
  return scores;
}

// The landmark detector: image -> K probability maps -> K landmarks.
template <typename T>
class Detector {
 public:
  static constexpr double kInitStd = 0.01;

  Detector() = default;
  Detector(int landmarks, int in_channels)
      : net_(detector_layers(landmarks, in_channels)), landmarks_(landmarks), in_channels_(in_channels) {}

  void init(std::uint64_t seed, double stddev = kInitStd) {
    std::mt19937_64 rng(seed);
    net_.init_gaussian(rng, stddev);
  }

  int landmarks() const { return landmarks_; }
  int in_channels() const { return in_channels_; }
  Network<T>& network() { return net_; }
  const Network<T>& network() const { return net_; }

  // Index of the final spatial-softmax layer.
  std::size_t softmax_layer() const { return net_.layers().size() - 1; }

  // Raw scores (H/2 x W/2 x K). Train mode updates batchnorm statistics.
  Tensor4<T> score_maps(const Tensor4<T>& image, Mode mode) {
    check_detector_input(image.shape(), in_channels_);
    if (mode == Mode::eval) return net_.infer(image, softmax_layer());
    return net_.forward(image, Mode::train, softmax_layer()).output;
  }
  Tensor4<T> score_maps(const Tensor4<T>& image) const {
    check_detector_input(image.shape(), in_channels_);
    return net_.infer(image, softmax_layer());
  }

  // Eval-mode probability maps.
  Tensor4<T> probability_maps(const Tensor4<T>& image) const {
    check_detector_input(image.shape(), in_channels_);
    return net_.infer(image);
  }

  Detection<T> detect(const Tensor4<T>& image) const {
    Detection<T> d{probability_maps(image), {}};
    d.landmarks = soft_argmax(d.maps);
    return d;
  }

  // Train-mode forward returning the tape; its output is the probability maps.
  Tape<T> forward_train(const Tensor4<T>& image) {
    check_detector_input(image.shape(), in_channels_);
    return net_.forward(image, Mode::train);
  }

 private:
  Network<T> net_;
  int landmarks_ = 0;
  int in_channels_ = 0;
};

}  // namespace eqlm
