#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "eqlm/detector.hpp"
#include "eqlm/errors.hpp"
#include "eqlm/geometry.hpp"
#include "eqlm/image_io.hpp"
#include "eqlm/tensor.hpp"
#include "eqlm/warp.hpp"

namespace eqlm {

struct Sample {
  Tensor4<float> image;     // (1, H, W, C) in [0, 1]
  LandmarkSet annotations;  // normalized coordinates of `image`; may be empty
  std::string id;
  int label = -1;
};

enum class ChannelPolicy { keep, gray, rgb };

// Geometry applied before the network: resize, pad with a constant border,
// warp (in the padded frame), then center-crop.
struct PreprocessSpec {
  int resize_h = 0, resize_w = 0;  // 0 keeps the source size
  int pad = 0;
  float pad_value = 0.0f;
  int crop_h = 0, crop_w = 0;      // 0 keeps the padded size
  ChannelPolicy channels = ChannelPolicy::keep;

  // 28x28 digits -> 35x35, 5 px black border (45x45), even crop 44x44.
  static PreprocessSpec mnist() { return {35, 35, 5, 0.0f, 44, 44, ChannelPolicy::gray}; }
  static PreprocessSpec faces() { return {100, 100, 0, 0.0f, 80, 80, ChannelPolicy::rgb}; }
  static PreprocessSpec shoes() { return {64, 64, 15, 1.0f, 94, 94, ChannelPolicy::rgb}; }

  int out_channels(int source_channels) const {
    switch (channels) {
      case ChannelPolicy::gray: return 1;
      case ChannelPolicy::rgb: return 3;
      default: return source_channels;
    }
  }
};

// Normalized-frame maps for one source size.
struct Frames {
  int padded_h = 0, padded_w = 0, out_h = 0, out_w = 0;
  AxisAffine pad;   // source -> padded
  AxisAffine crop;  // output (cropped) -> padded
};

inline Frames frames_for(const PreprocessSpec& spec, int src_h, int src_w) {
  const int rh = spec.resize_h > 0 ? spec.resize_h : src_h;
  const int rw = spec.resize_w > 0 ? spec.resize_w : src_w;
  if (rh <= 0 || rw <= 0 || spec.pad < 0) throw ConfigError("preprocess: invalid resize or pad");
  Frames f;
  f.padded_h = rh + 2 * spec.pad;
  f.padded_w = rw + 2 * spec.pad;
  f.out_h = spec.crop_h > 0 ? spec.crop_h : f.padded_h;
  f.out_w = spec.crop_w > 0 ? spec.crop_w : f.padded_w;
  if (f.out_h > f.padded_h || f.out_w > f.padded_w)
    throw ConfigError("preprocess: crop " + std::to_string(f.out_h) + "x" + std::to_string(f.out_w) +
                      " exceeds padded size " + std::to_string(f.padded_h) + "x" + std::to_string(f.padded_w));
  f.pad = {{static_cast<double>(rw) / f.padded_w, static_cast<double>(rh) / f.padded_h}, {0, 0}};
  // Output pixel i sits at padded pixel i + o, o = floor((padded - out) / 2).
  auto axis = [](int out, int padded) {
    const int o = (padded - out) / 2;
    return std::pair{static_cast<double>(out) / padded, static_cast<double>(out + 2 * o - padded) / padded};
  };
  const auto [sx, ox] = axis(f.out_w, f.padded_w);
  const auto [sy, oy] = axis(f.out_h, f.padded_h);
  f.crop = {{sx, sy}, {ox, oy}};
  return f;
}

inline Tensor4<float> apply_channel_policy(const Tensor4<float>& image, ChannelPolicy policy) {
  const int c = image.channels();
  if (policy == ChannelPolicy::keep || (policy == ChannelPolicy::gray && c == 1) ||
      (policy == ChannelPolicy::rgb && c == 3))
    return image;
  Tensor4<float> out(image.batch(), image.height(), image.width(), policy == ChannelPolicy::gray ? 1 : 3);
  for (int n = 0; n < image.batch(); ++n)
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) {
        double mean = 0;
        for (int k = 0; k < c; ++k) mean += image(n, y, x, k);
        mean /= c;
        for (int k = 0; k < out.channels(); ++k)
          out(n, y, x, k) = (c == 1 || policy == ChannelPolicy::gray) ? static_cast<float>(mean) : image(n, y, x, 0);
      }
  return out;
}

// Renders out(q) = I(pad^-1(g(crop(q)))) straight from the source image, so
// resize, pad, warp and crop cost a single bilinear resampling.
template <typename Map>
Tensor4<float> render(const Tensor4<float>& source, const PreprocessSpec& spec, const Map& g) {
  const auto img = apply_channel_policy(source, spec.channels);
  const Frames f = frames_for(spec, img.height(), img.width());
  const Fill fill = spec.pad > 0 ? Fill{FillPolicy::constant, spec.pad_value} : Fill{};
  auto map = [&](Vec2 q) { return f.pad.inverse(g(f.crop(q))); };
  return warp_image(img, map, f.out_h, f.out_w, fill);
}

inline Tensor4<float> preprocess(const Sample& s, const PreprocessSpec& spec) {
  return render(s.image, spec, [](Vec2 p) { return p; });
}

// Source-frame annotations in the output frame of render(.., g1): a point a
// lands at q with g1(crop(q)) = pad(a).
inline LandmarkSet annotations_in_view(const LandmarkSet& a, const Frames& f, const TpsWarp* g1 = nullptr) {
  LandmarkSet out;
  out.reserve(a.size());
  for (auto p : a) {
    Vec2 q = f.pad(p);
    if (g1) q = g1->inverse(q);
    out.push_back(f.crop.inverse(q));
  }
  return out;
}

struct Triplet {
  Tensor4<float> x, xp;
  TpsWarp g;   // x'(v) = x(g(v)) in the output frame
  TpsWarp g1;  // padded-frame warp used to render x
};

// x = I o g1 and x' = I o (g1 o g2), both rendered from the source image.
inline Triplet make_triplet(const Sample& s, const WarpSamplerConfig& g1_cfg, const WarpSamplerConfig& g2_cfg,
                            const PreprocessSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TpsWarp g1 = sample_tps(g1_cfg, rng);
  TpsWarp g2 = sample_tps(g2_cfg, rng);
  const Frames f = frames_for(spec, s.image.height(), s.image.width());
  Triplet t;
  t.x = render(s.image, spec, g1);
  t.xp = render(s.image, spec, compose(g1, g2));
  t.g = g2.reframed(f.crop);
  t.g1 = std::move(g1);
  return t;
}

// ---- seeds and batches ----------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(base) ^ a) ^ (b * 0x2545f4914f6cdd1dull));
}

// Permutation of [0, n) for one epoch.
inline std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5eed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline std::vector<std::vector<int>> split_batches(const std::vector<int>& order, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  return out;
}

struct TripletBatch {
  Tensor4<float> x, xp;
  std::vector<TpsWarp> g;
};

// Triplet i of a batch uses derive_seed(seed, epoch, sample index), so the
// result does not depend on how synthesis is scheduled.
inline TripletBatch make_batch(const std::vector<Sample>& samples, const std::vector<int>& indices,
                               const WarpSamplerConfig& g1_cfg, const WarpSamplerConfig& g2_cfg,
                               const PreprocessSpec& spec, std::uint64_t seed, int epoch) {
  std::vector<Tensor4<float>> xs, xps;
  TripletBatch b;
  for (int i : indices) {
    auto t = make_triplet(samples.at(i), g1_cfg, g2_cfg, spec,
                          derive_seed(seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(i)));
    xs.push_back(std::move(t.x));
    xps.push_back(std::move(t.xp));
    b.g.push_back(std::move(t.g));
  }
  b.x = concat_batch(std::span<const Tensor4<float>>(xs));
  b.xp = concat_batch(std::span<const Tensor4<float>>(xps));
  return b;
}

inline Tensor4<float> preprocess_batch(const std::vector<Sample>& samples, const std::vector<int>& indices,
                                       const PreprocessSpec& spec) {
  std::vector<Tensor4<float>> xs;
  for (int i : indices) xs.push_back(preprocess(samples.at(i), spec));
  return concat_batch(std::span<const Tensor4<float>>(xs));
}

// ---- loaders --------------------------------------------------------------

inline std::vector<Sample> load_idx(const fs::path& images_path, const fs::path& labels_path,
                                    std::optional<int> digit = std::nullopt) {
  const IdxArray images = read_idx(images_path, 0x803);
  const IdxArray labels = read_idx(labels_path, 0x801);
  if (images.dims.size() != 3) throw FormatError(images_path.string() + ": expected 3 dimensions");
  if (labels.dims.size() != 1) throw FormatError(labels_path.string() + ": expected 1 dimension");
  if (images.dims[0] != labels.dims[0])
    throw FormatError("IDX count mismatch: " + std::to_string(images.dims[0]) + " images, " +
                      std::to_string(labels.dims[0]) + " labels");
  const int n = images.dims[0], h = images.dims[1], w = images.dims[2];
  const std::size_t px = static_cast<std::size_t>(h) * w;
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    const int label = labels.data[i];
    if (digit && label != *digit) continue;
    Sample s{Tensor4<float>(1, h, w, 1), {}, std::to_string(i), label};
    std::transform(images.data.begin() + i * px, images.data.begin() + (i + 1) * px, s.image.data(),
                   [](std::uint8_t v) { return v / 255.0f; });
    out.push_back(std::move(s));
  }
  return out;
}

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".pgm";
}

struct AnnotationLine {
  std::vector<double> coords;  // x1 y1 ... xM yM in pixels
  int line = 0;
};

// Annotation file: one line per image, "<name> x1 y1 ... xM yM" in pixel
// coordinates (origin at the top-left pixel center). '#' starts a comment
// line. All lines must carry the same landmark count.
inline std::map<std::string, AnnotationLine> read_annotation_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::map<std::string, AnnotationLine> out;
  std::string line;
  std::size_t expected = 0;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name) || name[0] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::logic_error&) {
        throw FormatError(where + "bad number '" + tok + "'");
      }
    }
    if (v.empty() || v.size() % 2) throw FormatError(where + "expected an even, non-zero count of coordinates");
    if (expected && v.size() != expected)
      throw FormatError(where + "expected " + std::to_string(expected / 2) + " landmarks, got " +
                        std::to_string(v.size() / 2));
    expected = v.size();
    if (!out.emplace(fs::path(name).lexically_normal().string(), AnnotationLine{std::move(v), lineno}).second)
      throw FormatError(where + "duplicate entry for " + name);
  }
  if (out.empty()) throw FormatError(path.string() + ": no annotations");
  return out;
}

inline LandmarkSet annotation_landmarks(const AnnotationLine& a, int w, int h) {
  LandmarkSet s;
  for (std::size_t i = 0; i < a.coords.size(); i += 2) s.push_back(pixel_to_norm(Vec2{a.coords[i], a.coords[i + 1]}, w, h));
  return s;
}

// Images are read in lexicographic order. With an annotation file, every
// image in the directory must be annotated and every line must name an image.
inline std::vector<Sample> load_image_dir(const fs::path& dir, const std::optional<fs::path>& annotation_file = {}) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());

  std::map<std::string, AnnotationLine> coords;
  if (annotation_file) {
    coords = read_annotation_file(*annotation_file);
    for (const auto& [n, a] : coords)
      if (!fs::exists(dir / n))
        throw FormatError(annotation_file->string() + ":" + std::to_string(a.line) + ": missing image " +
                          (dir / n).string());
    for (const auto& n : names)
      if (!coords.count(n)) throw FormatError(annotation_file->string() + ": no annotation line for image " + n);
    names.clear();
    for (const auto& [n, a] : coords) names.push_back(n);  // std::map keeps lexicographic order
  }

  std::vector<Sample> out;
  for (const auto& n : names) {
    Sample s{read_image(dir / n), {}, n, -1};
    if (annotation_file) s.annotations = annotation_landmarks(coords.at(n), s.image.width(), s.image.height());
    out.push_back(std::move(s));
  }
  return out;
}

// Keeps the samples named in the annotation file (by id) and attaches their
// landmarks; names without a matching sample are an error.
inline std::vector<Sample> select_annotated(std::vector<Sample> samples, const fs::path& annotation_file) {
  const auto coords = read_annotation_file(annotation_file);
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) by_id.emplace(samples[i].id, i);
  std::vector<Sample> out;
  for (const auto& [n, a] : coords) {
    auto it = by_id.find(n);
    if (it == by_id.end())
      throw FormatError(annotation_file.string() + ":" + std::to_string(a.line) + ": no sample with id '" + n + "'");
    Sample s = samples[it->second];
    s.annotations = annotation_landmarks(a, s.image.width(), s.image.height());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace eqlm
