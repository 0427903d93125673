#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "eqlm/errors.hpp"
#include "eqlm/layers.hpp"
#include "eqlm/tensor.hpp"

namespace eqlm {

template <typename T>
struct Gradients {
  std::vector<std::vector<T>> params;  // parallel to Network::params()
  Tensor4<T> input;
};

// State recorded by a train-mode forward pass for use by backward().
template <typename T>
struct Tape {
  struct Entry {
    Tensor4<T> saved;             // conv: input, bn: normalized input, relu/softmax: output
    std::vector<T> inv_std;       // batchnorm
    std::vector<double> batch_mean, batch_var;  // batchnorm, unbiased variance
    std::vector<std::uint32_t> argmax;  // maxpool
    Shape4 in_shape;
  };
  std::vector<Entry> entries;
  Tensor4<T> output;
  bool valid = false;
};

// Softmax over the spatial positions of each (item, channel), with
// max-subtraction and a 64-bit normalizer.
template <typename T>
void spatial_softmax_inplace(Tensor4<T>& x) {
  const int hw = x.height() * x.width(), c = x.channels();
  for (int n = 0; n < x.batch(); ++n) {
    T* p = x.item(n);
    for (int ch = 0; ch < c; ++ch) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int u = 0; u < hw; ++u) mx = std::max(mx, p[u * c + ch]);
      double s = 0;
      for (int u = 0; u < hw; ++u) s += std::exp(static_cast<double>(p[u * c + ch]) - mx);
      for (int u = 0; u < hw; ++u)
        p[u * c + ch] = static_cast<T>(std::exp(static_cast<double>(p[u * c + ch]) - mx) / s);
    }
  }
}

// Sequential feed-forward network over NHWC tensors.
template <typename T>
class Network {
 public:
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapMat = Eigen::Map<RowMat>;
  using CMapMat = Eigen::Map<const RowMat>;

  Network() = default;

  explicit Network(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    int channels = -1;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      l.validate(i);
      if (l.kind == LayerKind::conv || l.kind == LayerKind::batchnorm) {
        if (channels >= 0 && l.in_channels != channels)
          throw ConfigError("layer " + std::to_string(i) + " (" + to_string(l.kind) +
                            ") expects " + std::to_string(l.in_channels) +
                            " input channels but receives " + std::to_string(channels));
        channels = l.out_channels;
      }
      first_param_.push_back(params_.size());
      const auto prefix = "layer" + std::to_string(i) + ".";
      if (l.kind == LayerKind::conv) {
        const int fan = l.kernel * l.kernel * l.in_channels;
        params_.push_back({prefix + "weight", {l.kernel, l.kernel, l.in_channels, l.out_channels},
                           std::vector<T>(static_cast<std::size_t>(fan) * l.out_channels), true, true});
        if (l.bias)
          params_.push_back({prefix + "bias", {l.out_channels},
                             std::vector<T>(l.out_channels), true, false});
      } else if (l.kind == LayerKind::batchnorm) {
        const auto c = static_cast<std::size_t>(l.in_channels);
        params_.push_back({prefix + "gamma", {l.in_channels}, std::vector<T>(c, T(1)), true, false});
        params_.push_back({prefix + "beta", {l.in_channels}, std::vector<T>(c, T(0)), true, false});
        params_.push_back({prefix + "running_mean", {l.in_channels}, std::vector<T>(c, T(0)), false, false});
        params_.push_back({prefix + "running_var", {l.in_channels}, std::vector<T>(c, T(1)), false, false});
      }
    }
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  Param<T>* find_param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  // Zero-mean Gaussian conv weights; biases and batchnorm reset to identity.
  template <typename Rng>
  void init_gaussian(Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].kind != LayerKind::conv) continue;
      auto& w = params_[first_param_[i]].value;
      for (auto& v : w) v = static_cast<T>(dist(rng));
    }
  }

  // Sum of squared conv weights.
  double weight_norm2() const {
    double s = 0;
    for (const auto& p : params_)
      if (p.decayed)
        for (T v : p.value) s += static_cast<double>(v) * v;
    return s;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    for (const auto& p : params_) g.params.emplace_back(p.value.size(), T(0));
    return g;
  }

  template <typename U>
  Network<U> cast() const {
    Network<U> out(layers_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      std::transform(params_[i].value.begin(), params_[i].value.end(),
                     out.params()[i].value.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  // Runs layers [0, stop); stop defaults to all layers. Train mode records a
  // tape and updates batchnorm running statistics.
  Tape<T> forward(const Tensor4<T>& input, Mode mode,
                  std::optional<std::size_t> stop = std::nullopt) {
    const std::size_t end = stop.value_or(layers_.size());
    Tape<T> tape;
    tape.entries.resize(end);
    Tensor4<T> x = input;
    for (std::size_t i = 0; i < end; ++i) {
      x = run_layer(i, std::move(x), mode, mode == Mode::train ? &tape.entries[i] : nullptr);
      if (mode == Mode::train && layers_[i].kind == LayerKind::batchnorm)
        update_running_stats(i, tape.entries[i]);
    }
    tape.output = std::move(x);
    tape.valid = mode == Mode::train;
    return tape;
  }

  // Eval-mode forward; does not touch any state.
  Tensor4<T> infer(const Tensor4<T>& input, std::optional<std::size_t> stop = std::nullopt) const {
    const std::size_t end = stop.value_or(layers_.size());
    Tensor4<T> x = input;
    for (std::size_t i = 0; i < end; ++i)
      x = run_layer(i, std::move(x), Mode::eval, nullptr);
    return x;
  }

  // With with_input_gradient false, a leading conv skips its input gradient and
  // Gradients::input is left empty.
  Gradients<T> backward(const Tape<T>& tape, const Tensor4<T>& grad_output, bool with_input_gradient = true) const {
    if (!tape.valid) throw UsageError("backward() requires the tape of a train-mode forward()");
    if (grad_output.shape() != tape.output.shape())
      throw UsageError("backward(): output gradient shape " + to_string(grad_output.shape()) +
                       " != forward output shape " + to_string(tape.output.shape()));
    Gradients<T> g = zero_gradients();
    Tensor4<T> dy = grad_output;
    for (std::size_t i = tape.entries.size(); i-- > 0;) {
      if (i == 0 && !with_input_gradient && layers_[0].kind == LayerKind::conv) {
        conv_backward(0, tape.entries[0], dy, g, false);
        return g;
      }
      dy = back_layer(i, tape.entries[i], dy, g);
    }
    g.input = std::move(dy);
    return g;
  }

 private:
  void check_input(std::size_t i, const Tensor4<T>& x) const {
    const auto& l = layers_[i];
    if ((l.kind == LayerKind::conv || l.kind == LayerKind::batchnorm) && x.channels() != l.in_channels)
      throw ConfigError("layer " + std::to_string(i) + " (" + to_string(l.kind) + ") expects " +
                        std::to_string(l.in_channels) + " channels, got input " + to_string(x.shape()));
    if (l.kind == LayerKind::conv &&
        (x.height() + 2 * l.padding < l.kernel || x.width() + 2 * l.padding < l.kernel))
      throw ConfigError("layer " + std::to_string(i) + " (conv): input " + to_string(x.shape()) +
                        " smaller than kernel");
    if (l.kind == LayerKind::maxpool && (x.height() < l.window || x.width() < l.window))
      throw ConfigError("layer " + std::to_string(i) + " (maxpool): input " + to_string(x.shape()) +
                        " smaller than window");
  }

  void update_running_stats(std::size_t i, const typename Tape<T>::Entry& e) {
    const auto& l = layers_[i];
    auto& rmean = params_[first_param_[i] + 2].value;
    auto& rvar = params_[first_param_[i] + 3].value;
    for (std::size_t ch = 0; ch < rmean.size(); ++ch) {
      rmean[ch] = static_cast<T>(l.momentum * rmean[ch] + (1 - l.momentum) * e.batch_mean[ch]);
      rvar[ch] = static_cast<T>(l.momentum * rvar[ch] + (1 - l.momentum) * e.batch_var[ch]);
    }
  }

  Tensor4<T> run_layer(std::size_t i, Tensor4<T> x, Mode mode, typename Tape<T>::Entry* e) const {
    check_input(i, x);
    if (e) e->in_shape = x.shape();
    switch (layers_[i].kind) {
      case LayerKind::conv: {
        auto y = conv_forward(i, x);
        if (e) e->saved = std::move(x);
        return y;
      }
      case LayerKind::batchnorm: return bn_forward(i, std::move(x), mode, e);
      case LayerKind::relu:
        for (auto& v : x.vec()) v = v > T(0) ? v : T(0);
        if (e) e->saved = x;
        return x;
      case LayerKind::maxpool: return pool_forward(i, x, e);
      case LayerKind::spatial_softmax:
        spatial_softmax_inplace(x);
        if (e) e->saved = x;
        return x;
    }
    return x;
  }

  Tensor4<T> back_layer(std::size_t i, const typename Tape<T>::Entry& e, Tensor4<T>& dy,
                        Gradients<T>& g) const {
    switch (layers_[i].kind) {
      case LayerKind::conv: return conv_backward(i, e, dy, g);
      case LayerKind::batchnorm: return bn_backward(i, e, dy, g);
      case LayerKind::relu:
        for (std::size_t k = 0; k < dy.size(); ++k)
          if (!(e.saved.vec()[k] > T(0))) dy.vec()[k] = T(0);
        return std::move(dy);
      case LayerKind::maxpool: {
        Tensor4<T> dx(e.in_shape);
        for (std::size_t k = 0; k < dy.size(); ++k) dx.vec()[e.argmax[k]] += dy.vec()[k];
        return dx;
      }
      case LayerKind::spatial_softmax: {
        const auto& p = e.saved;
        const int hw = p.height() * p.width(), c = p.channels();
        for (int n = 0; n < p.batch(); ++n) {
          const T* pn = p.item(n);
          T* dn = dy.item(n);
          for (int ch = 0; ch < c; ++ch) {
            double s = 0;
            for (int u = 0; u < hw; ++u) s += static_cast<double>(pn[u * c + ch]) * dn[u * c + ch];
            for (int u = 0; u < hw; ++u)
              dn[u * c + ch] = static_cast<T>(pn[u * c + ch] * (dn[u * c + ch] - s));
          }
        }
        return std::move(dy);
      }
    }
    return std::move(dy);
  }

  // --- convolution (stride 1, zero padding) via im2col + GEMM

  // Rows for images [n0, n0 + nb), one row per output pixel.
  void im2col(const LayerSpec& l, const Tensor4<T>& x, int n0, int nb, int ho, int wo, RowMat& cols) const {
    const int k = l.kernel, cin = l.in_channels, pad = l.padding;
    cols.resize(static_cast<Eigen::Index>(nb) * ho * wo, static_cast<Eigen::Index>(k) * k * cin);
    T* row = cols.data();
    for (int n = n0; n < n0 + nb; ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, row += cols.cols())
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy + ky - pad;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox + kx - pad;
              T* dst = row + (ky * k + kx) * cin;
              if (iy < 0 || iy >= x.height() || ix < 0 || ix >= x.width())
                std::fill_n(dst, cin, T(0));
              else
                std::copy_n(x.data() + x.index(n, iy, ix, 0), cin, dst);
            }
          }
  }

  // Images per GEMM, keeping the im2col buffer around 2 MB.
  static int conv_chunk(int pixels, int row_len, int batch) {
    const std::size_t budget = (std::size_t{2} << 20) / sizeof(T);
    const std::size_t per_image = static_cast<std::size_t>(pixels) * row_len;
    return std::clamp(static_cast<int>(budget / std::max<std::size_t>(per_image, 1)), 1, std::max(batch, 1));
  }

  Tensor4<T> conv_forward(std::size_t i, const Tensor4<T>& x) const {
    const auto& l = layers_[i];
    const int ho = x.height() + 2 * l.padding - l.kernel + 1;
    const int wo = x.width() + 2 * l.padding - l.kernel + 1;
    const int kkc = l.kernel * l.kernel * l.in_channels;
    Tensor4<T> y(x.batch(), ho, wo, l.out_channels);
    const auto& wp = params_[first_param_[i]];
    CMapMat wmat(wp.value.data(), kkc, l.out_channels);
    RowMat cols;
    const int chunk = conv_chunk(ho * wo, kkc, x.batch());
    for (int n = 0; n < x.batch(); n += chunk) {
      const int nb = std::min(chunk, x.batch() - n);
      im2col(l, x, n, nb, ho, wo, cols);
      MapMat out(y.item(n), static_cast<Eigen::Index>(nb) * ho * wo, l.out_channels);
      out.noalias() = cols * wmat;
      if (l.bias) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(
            params_[first_param_[i] + 1].value.data(), l.out_channels);
        out.rowwise() += b;
      }
    }
    return y;
  }

  Tensor4<T> conv_backward(std::size_t i, const typename Tape<T>::Entry& e, const Tensor4<T>& dy,
                           Gradients<T>& g, bool input_gradient = true) const {
    const auto& l = layers_[i];
    const auto& x = e.saved;
    const int ho = dy.height(), wo = dy.width(), k = l.kernel, cin = l.in_channels, kkc = k * k * cin;
    const auto pi = first_param_[i];
    CMapMat wmat(params_[pi].value.data(), kkc, l.out_channels);
    MapMat dw(g.params[pi].data(), kkc, l.out_channels);
    Tensor4<T> dx(input_gradient ? x.shape() : Shape4{});
    RowMat cols, dcols;
    const int chunk = conv_chunk(ho * wo, kkc, x.batch());
    for (int n0 = 0; n0 < x.batch(); n0 += chunk) {
      const int nb = std::min(chunk, x.batch() - n0);
      CMapMat dout(dy.item(n0), static_cast<Eigen::Index>(nb) * ho * wo, l.out_channels);
      im2col(l, x, n0, nb, ho, wo, cols);
      dw.noalias() += cols.transpose() * dout;
      if (l.bias) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(g.params[pi + 1].data(), l.out_channels);
        db += dout.colwise().sum();
      }
      if (!input_gradient) continue;
      dcols.noalias() = dout * wmat.transpose();
      const T* row = dcols.data();
      for (int n = n0; n < n0 + nb; ++n)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox, row += kkc)
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy + ky - l.padding;
              if (iy < 0 || iy >= x.height()) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox + kx - l.padding;
                if (ix < 0 || ix >= x.width()) continue;
                T* dst = dx.data() + dx.index(n, iy, ix, 0);
                const T* src = row + (ky * k + kx) * cin;
                for (int c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
    }
    return dx;
  }

  // --- batch normalization over (N, H, W) per channel

  Tensor4<T> bn_forward(std::size_t i, Tensor4<T> x, Mode mode, typename Tape<T>::Entry* e) const {
    const auto& l = layers_[i];
    const auto pi = first_param_[i];
    const auto& gamma = params_[pi].value;
    const auto& beta = params_[pi + 1].value;
    const auto& rmean = params_[pi + 2].value;
    const auto& rvar = params_[pi + 3].value;
    const int c = x.channels();
    const std::size_t count = x.size() / c;
    T* px = x.data();
    if (mode == Mode::eval) {
      std::vector<double> scale(c), shift(c);
      for (int ch = 0; ch < c; ++ch) {
        scale[ch] = gamma[ch] / std::sqrt(static_cast<double>(rvar[ch]) + l.eps);
        shift[ch] = beta[ch] - rmean[ch] * scale[ch];
      }
      for (std::size_t r = 0; r < count; ++r, px += c)
        for (int ch = 0; ch < c; ++ch) px[ch] = static_cast<T>(px[ch] * scale[ch] + shift[ch]);
      return x;
    }
    if (!e) throw UsageError("batchnorm train mode requires a tape");
    if (count < 2)
      throw ConfigError("layer " + std::to_string(i) + " (batchnorm): train mode needs more than one value per channel");
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t r = 0; r < count; ++r)
      for (int ch = 0; ch < c; ++ch) mean[ch] += px[r * c + ch];
    for (auto& m : mean) m /= static_cast<double>(count);
    for (std::size_t r = 0; r < count; ++r)
      for (int ch = 0; ch < c; ++ch) {
        const double d = px[r * c + ch] - mean[ch];
        var[ch] += d * d;
      }
    std::vector<T> inv_std(c);
    for (int ch = 0; ch < c; ++ch) {
      const double v = var[ch] / static_cast<double>(count);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + l.eps));
      var[ch] /= static_cast<double>(count - 1);
    }
    std::vector<T> mean_t(mean.begin(), mean.end());
    for (std::size_t r = 0; r < count; ++r)
      for (int ch = 0; ch < c; ++ch) px[r * c + ch] = (px[r * c + ch] - mean_t[ch]) * inv_std[ch];
    e->saved = x;
    e->inv_std = std::move(inv_std);
    e->batch_mean = std::move(mean);
    e->batch_var = std::move(var);
    for (std::size_t r = 0; r < count; ++r)
      for (int ch = 0; ch < c; ++ch) px[r * c + ch] = gamma[ch] * px[r * c + ch] + beta[ch];
    return x;
  }

  Tensor4<T> bn_backward(std::size_t i, const typename Tape<T>::Entry& e, Tensor4<T>& dy,
                         Gradients<T>& g) const {
    const auto pi = first_param_[i];
    const auto& gamma = params_[pi].value;
    const T* xhat = e.saved.data();
    T* pd = dy.data();
    const int c = dy.channels();
    const std::size_t rows = dy.size() / c;
    const double count = static_cast<double>(rows);
    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t k = r * c + ch;
        sum_dy[ch] += pd[k];
        sum_dy_xhat[ch] += static_cast<double>(pd[k]) * xhat[k];
      }
    std::vector<T> scale(c), a(c), b(c);
    for (int ch = 0; ch < c; ++ch) {
      g.params[pi][ch] += static_cast<T>(sum_dy_xhat[ch]);
      g.params[pi + 1][ch] += static_cast<T>(sum_dy[ch]);
      const double sc = gamma[ch] * static_cast<double>(e.inv_std[ch]) / count;
      scale[ch] = static_cast<T>(sc * count);
      a[ch] = static_cast<T>(sc * sum_dy[ch]);
      b[ch] = static_cast<T>(sc * sum_dy_xhat[ch]);
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t k = r * c + ch;
        pd[k] = scale[ch] * pd[k] - a[ch] - xhat[k] * b[ch];
      }
    return std::move(dy);
  }

  // --- pooling and softmax

  Tensor4<T> pool_forward(std::size_t i, const Tensor4<T>& x, typename Tape<T>::Entry* e) const {
    const auto& l = layers_[i];
    const int ho = (x.height() - l.window) / l.stride + 1;
    const int wo = (x.width() - l.window) / l.stride + 1;
    Tensor4<T> y(x.batch(), ho, wo, x.channels());
    if (e) e->argmax.resize(y.size());
    for (int n = 0; n < x.batch(); ++n)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
          for (int c = 0; c < x.channels(); ++c) {
            std::size_t best = x.index(n, oy * l.stride, ox * l.stride, c);
            for (int dy = 0; dy < l.window; ++dy)
              for (int dx = 0; dx < l.window; ++dx) {
                const auto k = x.index(n, oy * l.stride + dy, ox * l.stride + dx, c);
                if (x.vec()[k] > x.vec()[best]) best = k;
              }
            const auto out = y.index(n, oy, ox, c);
            y.vec()[out] = x.vec()[best];
            if (e) e->argmax[out] = static_cast<std::uint32_t>(best);
          }
    return y;
  }

  std::vector<LayerSpec> layers_;
  std::vector<Param<T>> params_;
  std::vector<std::size_t> first_param_;
};

}  // namespace eqlm
