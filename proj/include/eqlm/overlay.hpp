#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "eqlm/errors.hpp"
#include "eqlm/geometry.hpp"
#include "eqlm/regressor.hpp"
#include "eqlm/tensor.hpp"

namespace eqlm {

using Rgb = std::array<float, 3>;

// Landmark r is drawn in kPalette[r % size] on every image.
inline constexpr std::array<Rgb, 10> kPalette{{{0.90f, 0.10f, 0.10f},
                                               {0.10f, 0.55f, 0.95f},
                                               {0.15f, 0.80f, 0.20f},
                                               {1.00f, 0.75f, 0.00f},
                                               {0.70f, 0.20f, 0.85f},
                                               {0.00f, 0.85f, 0.85f},
                                               {1.00f, 0.45f, 0.00f},
                                               {0.95f, 0.40f, 0.70f},
                                               {0.55f, 0.35f, 0.15f},
                                               {0.60f, 0.90f, 0.50f}}};

inline Rgb palette_color(int index) { return kPalette[static_cast<std::size_t>(index) % kPalette.size()]; }

// Batch item n as a single RGB image, enlarged by an integer factor.
inline Tensor4<float> to_rgb(const Tensor4<float>& img, int n = 0, int scale = 1) {
  const int h = img.height(), w = img.width(), c = img.channels();
  if (c != 1 && c != 3) throw UsageError("to_rgb: need 1 or 3 channels");
  if (scale < 1) throw UsageError("to_rgb: scale must be >= 1");
  Tensor4<float> out(1, h * scale, w * scale, 3);
  for (int y = 0; y < h * scale; ++y)
    for (int x = 0; x < w * scale; ++x)
      for (int k = 0; k < 3; ++k) out(0, y, x, k) = img(n, y / scale, x / scale, c == 1 ? 0 : k);
  return out;
}

inline void put_pixel(Tensor4<float>& img, int x, int y, const Rgb& color, float alpha = 1.0f) {
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) return;
  for (int k = 0; k < 3; ++k) img(0, y, x, k) = (1 - alpha) * img(0, y, x, k) + alpha * color[k];
}

inline void fill_disk(Tensor4<float>& img, double cx, double cy, double r, const Rgb& color) {
  for (int y = static_cast<int>(std::floor(cy - r)); y <= static_cast<int>(std::ceil(cy + r)); ++y)
    for (int x = static_cast<int>(std::floor(cx - r)); x <= static_cast<int>(std::ceil(cx + r)); ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) put_pixel(img, x, y, color);
}

inline void draw_line(Tensor4<float>& img, Vec2 a, Vec2 b, double half_width, const Rgb& color, float alpha = 1.0f) {
  const Vec2 d = b - a;
  const double len2 = dot(d, d);
  const int x0 = static_cast<int>(std::floor(std::min(a.x, b.x) - half_width));
  const int x1 = static_cast<int>(std::ceil(std::max(a.x, b.x) + half_width));
  const int y0 = static_cast<int>(std::floor(std::min(a.y, b.y) - half_width));
  const int y1 = static_cast<int>(std::ceil(std::max(a.y, b.y) + half_width));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      const double t = len2 > 0 ? std::clamp(dot(p - a, d) / len2, 0.0, 1.0) : 0.0;
      if (norm(p - (a + t * d)) <= half_width) put_pixel(img, x, y, color, alpha);
    }
}

// Landmarks (normalized coordinates of `img`) as palette disks with a dark rim.
inline Tensor4<float> overlay_landmarks(const Tensor4<float>& img, const LandmarkSet& landmarks, int scale = 1) {
  Tensor4<float> out = to_rgb(img, 0, scale);
  const double r = std::max(2.0, 0.025 * std::min(out.width(), out.height()));
  for (std::size_t k = 0; k < landmarks.size(); ++k) {
    const Vec2 p = norm_to_pixel(landmarks[k], out.width(), out.height());
    fill_disk(out, p.x, p.y, r + 1, {0, 0, 0});
    fill_disk(out, p.x, p.y, r, palette_color(static_cast<int>(k)));
  }
  return out;
}

// Images placed left to right with a `gap`-pixel white separator; heights may differ.
inline Tensor4<float> hstack(const std::vector<Tensor4<float>>& images, int gap = 2) {
  if (images.empty()) throw UsageError("hstack: no images");
  int h = 0, w = -gap;
  for (const auto& im : images) {
    h = std::max(h, im.height());
    w += im.width() + gap;
  }
  Tensor4<float> out(1, h, w, 3);
  std::fill(out.vec().begin(), out.vec().end(), 1.0f);
  int x0 = 0;
  for (const auto& im : images) {
    const Tensor4<float> rgb = to_rgb(im);
    for (int y = 0; y < rgb.height(); ++y)
      for (int x = 0; x < rgb.width(); ++x)
        for (int k = 0; k < 3; ++k) out(0, y, x0 + x, k) = rgb(0, y, x, k);
    x0 += im.width() + gap;
  }
  return out;
}

// Bipartite drawing: detector landmarks on the left in palette colors,
// annotated landmarks on the right in gray, edge width and opacity by weight.
inline Tensor4<float> contribution_graph_image(const std::vector<Edge>& edges, int sources, int targets) {
  const int row = 28, h = row * std::max({sources, targets, 1}) + row, w = 240;
  Tensor4<float> out(1, h, w, 3);
  std::fill(out.vec().begin(), out.vec().end(), 1.0f);
  auto src = [&](int k) { return Vec2{40.0, row * (k + 1.0) + (h - row * (sources + 1.0)) / 2}; };
  auto dst = [&](int m) { return Vec2{w - 40.0, row * (m + 1.0) + (h - row * (targets + 1.0)) / 2}; };
  for (const auto& e : edges)
    draw_line(out, src(e.source), dst(e.target), 0.5 + 3.0 * e.weight, palette_color(e.source),
              static_cast<float>(0.3 + 0.7 * e.weight));
  for (int k = 0; k < sources; ++k) {
    fill_disk(out, src(k).x, src(k).y, 8, {0, 0, 0});
    fill_disk(out, src(k).x, src(k).y, 7, palette_color(k));
  }
  for (int m = 0; m < targets; ++m) {
    fill_disk(out, dst(m).x, dst(m).y, 8, {0, 0, 0});
    fill_disk(out, dst(m).x, dst(m).y, 7, {0.6f, 0.6f, 0.6f});
  }
  return out;
}

}  // namespace eqlm
