#pragma once

#include <cmath>
#include <functional>
#include <vector>

namespace eqlm {

// A point in normalized image coordinates: x runs left to right and y top to
// bottom, both over [-1, 1] with the outermost pixel centers just inside.
struct Vec2 {
  double x = 0.0, y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm2(Vec2 a) { return dot(a, a); }
inline double norm(Vec2 a) { return std::sqrt(norm2(a)); }

// Row-major 2x2 Jacobian.
struct Mat2 {
  double a = 1, b = 0, c = 0, d = 1;
  Vec2 operator*(Vec2 v) const { return {a * v.x + b * v.y, c * v.x + d * v.y}; }
  Mat2 operator*(const Mat2& o) const {
    return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c,
            c * o.b + d * o.d};
  }
  Vec2 transposed_times(Vec2 v) const {
    return {a * v.x + c * v.y, b * v.x + d * v.y};
  }
};

// Output-to-input coordinate map used for inverse warping.
using PointMap = std::function<Vec2(Vec2)>;

// Pixel-center convention: pixel i of n maps to -1 + (2i + 1) / n.
inline double pixel_to_norm(double px, int extent) {
  return -1.0 + (2.0 * px + 1.0) / extent;
}
inline double norm_to_pixel(double v, int extent) {
  return ((v + 1.0) * extent - 1.0) / 2.0;
}
inline Vec2 pixel_to_norm(Vec2 px, int width, int height) {
  return {pixel_to_norm(px.x, width), pixel_to_norm(px.y, height)};
}
inline Vec2 norm_to_pixel(Vec2 v, int width, int height) {
  return {norm_to_pixel(v.x, width), norm_to_pixel(v.y, height)};
}

// Normalized centers of an h x w cell grid, row-major.
inline std::vector<Vec2> cell_centers(int h, int w) {
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.push_back({pixel_to_norm(x, w), pixel_to_norm(y, h)});
  return out;
}

}  // namespace eqlm
