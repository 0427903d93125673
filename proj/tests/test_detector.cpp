#include <gtest/gtest.h>

#include <random>

#include "eqlm/detector.hpp"

using namespace eqlm;

namespace {

Tensor4<float> random_image(int n, int h, int w, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0, 1);
  Tensor4<float> t(n, h, w, c);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

void zero_trainable(Detector<float>& det) {
  for (auto& p : det.network().params())
    if (p.trainable) std::fill(p.value.begin(), p.value.end(), 0.f);
}

Tensor4<float> delta_map(int h, int w, int k, const std::vector<int>& cells) {
  Tensor4<float> m(1, h, w, k);
  for (int r = 0; r < k; ++r) m.item(0)[static_cast<std::size_t>(cells[r]) * k + r] = 1.f;
  return m;
}

}  // namespace

TEST(DetectorArchitecture, FilterCountsAndSinglePool) {
  const auto layers = detector_layers(7, 1);
  std::vector<int> couts;
  int pools = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::conv) couts.push_back(layers[i].out_channels);
    if (layers[i].kind == LayerKind::maxpool) {
      ++pools;
      EXPECT_EQ(layers[i].window, 2);
      EXPECT_EQ(layers[i].stride, 2);
      ASSERT_GE(i, 3u);
      EXPECT_EQ(layers[i - 1].kind, LayerKind::relu);
      EXPECT_EQ(layers[i - 3].kind, LayerKind::conv);
      EXPECT_EQ(i, 3u);
    }
  }
  EXPECT_EQ(couts, (std::vector<int>{20, 48, 64, 80, 256, 7}));
  EXPECT_EQ(pools, 1);
  EXPECT_EQ(layers.back().kind, LayerKind::spatial_softmax);
}

TEST(DetectorShapes, FaceCropHalvesToScoreMaps) {
  Detector<float> det(10, 3);
  det.init(1);
  const auto s = det.score_maps(random_image(1, 80, 80, 3, 1));
  EXPECT_EQ(s.shape(), (Shape4{1, 40, 40, 10}));
}

TEST(DetectorShapes, DigitCropHalvesToScoreMaps) {
  Detector<float> det(7, 1);
  det.init(2);
  const auto s = det.score_maps(random_image(2, 44, 44, 1, 2));
  EXPECT_EQ(s.shape(), (Shape4{2, 22, 22, 7}));
}

TEST(DetectorShapes, InvalidInputIsConfigError) {
  Detector<float> det(3, 1);
  det.init(3);
  EXPECT_THROW(det.score_maps(random_image(1, 45, 44, 1, 3)), ConfigError);
  EXPECT_THROW(det.score_maps(random_image(1, 44, 45, 1, 3)), ConfigError);
  EXPECT_THROW(det.score_maps(random_image(1, 6, 6, 1, 3)), ConfigError);
  EXPECT_THROW(det.score_maps(random_image(1, 44, 44, 3, 3)), ConfigError);
}

TEST(Detector, ZeroWeightsGiveConstantScoresAndCentroidLandmarks) {
  Detector<float> det(5, 1);
  det.init(4);
  zero_trainable(det);
  const auto img = random_image(1, 16, 20, 1, 4);
  const auto s = det.score_maps(img);
  for (float v : s.vec()) EXPECT_EQ(v, s.vec()[0]);
  const auto d = det.detect(img);
  for (auto p : d.landmarks[0]) {
    EXPECT_NEAR(p.x, 0, 1e-6);
    EXPECT_NEAR(p.y, 0, 1e-6);
  }
}

TEST(Detector, ProbabilityMapsAreNormalized) {
  Detector<float> det(4, 1);
  det.init(5, 0.3);
  const auto m = det.probability_maps(random_image(3, 12, 12, 1, 5));
  for (int n = 0; n < 3; ++n)
    for (int r = 0; r < 4; ++r) {
      double sum = 0;
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
          const float p = m(n, y, x, r);
          EXPECT_GE(p, 0.f);
          EXPECT_LE(p, 1.f);
          sum += p;
        }
      EXPECT_NEAR(sum, 1.0, 1e-5);
    }
  for (const auto& set : soft_argmax(m))
    for (auto p : set) {
      EXPECT_LE(std::abs(p.x), 1.0);
      EXPECT_LE(std::abs(p.y), 1.0);
    }
}

TEST(Detector, IdenticalBatchItemsGiveIdenticalLandmarks) {
  Detector<float> det(6, 1);
  det.init(6);
  const auto one = random_image(1, 20, 20, 1, 6);
  const auto d = det.detect(concat_batch(one, one));
  ASSERT_EQ(d.landmarks.size(), 2u);
  EXPECT_EQ(d.landmarks[0], d.landmarks[1]);
}

TEST(SpatialSoftmax, ConstantScoresGiveUniform) {
  Tensor4<float> s(1, 4, 5, 2, 3.5f);
  const auto p = spatial_softmax(s);
  for (float v : p.vec()) EXPECT_NEAR(v, 1.0 / 20, 1e-7);
}

TEST(SpatialSoftmax, LargeSpikeTakesAllMass) {
  Tensor4<float> s(1, 6, 6, 1, 0.f);
  s(0, 2, 3, 0) = 1000.f;
  const auto p = spatial_softmax(s);
  EXPECT_GE(p(0, 2, 3, 0), 1 - 1e-6);
}

TEST(SpatialSoftmax, ShiftInvariantPerLandmark) {
  auto s = random_image(2, 5, 5, 3, 7);
  auto shifted = s;
  const float c[3] = {4.f, -2.5f, 17.f};
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x)
        for (int r = 0; r < 3; ++r) shifted(n, y, x, r) += c[r];
  const auto a = spatial_softmax(s), b = spatial_softmax(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.vec()[i], b.vec()[i], 1e-7);
}

TEST(SpatialSoftmax, NonFiniteScoreIsRejected) {
  Tensor4<float> s(1, 2, 2, 1, 0.f);
  s(0, 1, 1, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(spatial_softmax(s), NumericError);
}

TEST(SoftArgmax, DeltaReturnsCellCenterExactly) {
  // 6x4 grid: column 2 has center x = 0.25, row 1 has center y = -0.5.
  const auto m = delta_map(6, 4, 1, {1 * 4 + 2});
  const auto lm = soft_argmax(m);
  EXPECT_EQ(lm[0][0].x, 0.25);
  EXPECT_EQ(lm[0][0].y, -0.5);
}

TEST(SoftArgmax, UniformMapGivesCentroid) {
  Tensor4<float> m(1, 10, 10, 2, 0.01f);
  const auto lm = soft_argmax(m);
  for (auto p : lm[0]) {
    EXPECT_NEAR(p.x, 0, 1e-6);
    EXPECT_NEAR(p.y, 0, 1e-6);
  }
}

TEST(SoftArgmax, EvenMixtureGivesMidpoint) {
  Tensor4<double> m(1, 6, 6, 1);
  m(0, 1, 4, 0) = 0.5;
  m(0, 5, 0, 0) = 0.5;
  const Vec2 a{pixel_to_norm(4, 6), pixel_to_norm(1, 6)}, b{pixel_to_norm(0, 6), pixel_to_norm(5, 6)};
  const auto lm = soft_argmax(m);
  EXPECT_NEAR(lm[0][0].x, (a.x + b.x) / 2, 1e-12);
  EXPECT_NEAR(lm[0][0].y, (a.y + b.y) / 2, 1e-12);
}
