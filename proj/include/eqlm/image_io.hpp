#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eqlm/errors.hpp"
#include "eqlm/tensor.hpp"

namespace eqlm {

namespace fs = std::filesystem;

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- IDX ------------------------------------------------------------------

struct IdxArray {
  std::vector<int> dims;
  std::vector<std::uint8_t> data;
};

// Unsigned-byte IDX file with the given magic (0x801 labels, 0x803 images).
inline IdxArray read_idx(const fs::path& path, std::uint32_t expected_magic) {
  const auto bytes = read_bytes(path);
  auto be32 = [&](std::size_t off) {
    return (std::uint32_t(bytes[off]) << 24) | (std::uint32_t(bytes[off + 1]) << 16) |
           (std::uint32_t(bytes[off + 2]) << 8) | std::uint32_t(bytes[off + 3]);
  };
  if (bytes.size() < 4) throw FormatError(path.string() + ": truncated IDX header");
  const std::uint32_t magic = be32(0);
  if (magic != expected_magic) {
    std::ostringstream os;
    os << path.string() << ": bad IDX magic 0x" << std::hex << magic << ", expected 0x" << expected_magic;
    throw FormatError(os.str());
  }
  const int ndims = static_cast<int>(magic & 0xff);
  if (bytes.size() < 4 + 4 * static_cast<std::size_t>(ndims))
    throw FormatError(path.string() + ": truncated IDX header");
  IdxArray a;
  std::size_t count = 1;
  for (int i = 0; i < ndims; ++i) {
    a.dims.push_back(static_cast<int>(be32(4 + 4 * i)));
    count *= a.dims.back();
  }
  const std::size_t off = 4 + 4 * static_cast<std::size_t>(ndims);
  if (bytes.size() - off < count)
    throw FormatError(path.string() + ": truncated IDX payload (" + std::to_string(bytes.size() - off) + " of " +
                      std::to_string(count) + " bytes)");
  a.data.assign(bytes.begin() + off, bytes.begin() + off + count);
  return a;
}

// ---- PNG / PGM ------------------------------------------------------------

namespace detail {

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) { throw FormatError(msg); }
inline void png_warn(png_structp, png_const_charp) {}

}  // namespace detail

// 8-bit gray or RGB; alpha is dropped, 16-bit is stripped, palettes expanded.
inline Tensor4<float> read_png(const fs::path& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("cannot open " + path.string());
  detail::PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_fail, detail::png_warn);
  if (!g.png) throw FormatError("png: out of memory");
  g.info = png_create_info_struct(g.png);
  try {
    png_init_io(g.png, f.get());
    png_read_info(g.png, g.info);
    png_set_strip_16(g.png);
    png_set_strip_alpha(g.png);
    png_set_packing(g.png);
    png_set_palette_to_rgb(g.png);
    png_set_expand_gray_1_2_4_to_8(g.png);
    png_read_update_info(g.png, g.info);
    const int w = static_cast<int>(png_get_image_width(g.png, g.info));
    const int h = static_cast<int>(png_get_image_height(g.png, g.info));
    const int c = png_get_channels(g.png, g.info);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(h) * w * c);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * c;
    png_read_image(g.png, rows.data());
    Tensor4<float> out(1, h, w, c);
    std::transform(buf.begin(), buf.end(), out.vec().begin(), [](std::uint8_t v) { return v / 255.0f; });
    return out;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Binary (P5) or ASCII (P2) graymap with maxval <= 255.
inline Tensor4<float> read_pgm(const fs::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError { return FormatError(path.string() + ": " + what); };
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#')
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      else if (std::isspace(bytes[pos]))
        ++pos;
      else
        break;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    if (t.empty()) throw fail("truncated PGM header");
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P2") throw fail("not a PGM file");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw fail("bad PGM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw fail("unsupported PGM dimensions or maxval");
  Tensor4<float> out(1, h, w, 1);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (magic == "P5") {
    ++pos;  // single whitespace after maxval
    if (bytes.size() < pos + n) throw fail("truncated PGM payload");
    for (std::size_t i = 0; i < n; ++i) out.vec()[i] = static_cast<float>(bytes[pos + i]) / maxval;
  } else {
    for (std::size_t i = 0; i < n; ++i) out.vec()[i] = static_cast<float>(std::stoi(token())) / maxval;
  }
  return out;
}

inline Tensor4<float> read_image(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm") return read_pgm(path);
  throw FormatError(path.string() + ": unsupported image type");
}

// Writes batch item n (1 or 3 channels, values clamped to [0,1]) as 8-bit PNG.
inline void write_png(const fs::path& path, const Tensor4<float>& image, int n = 0) {
  const int h = image.height(), w = image.width(), c = image.channels();
  if (c != 1 && c != 3) throw UsageError("write_png: need 1 or 3 channels, got " + std::to_string(c));
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw FormatError("cannot write " + path.string());
  detail::PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_fail, detail::png_warn);
  g.info = png_create_info_struct(g.png);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(h) * w * c);
  const float* src = image.item(n);
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * c;
  png_init_io(g.png, f.get());
  png_set_IHDR(g.png, g.info, w, h, 8, c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(g.png, g.info, rows.data());
  png_write_png(g.png, g.info, PNG_TRANSFORM_IDENTITY, nullptr);
}

}  // namespace eqlm
