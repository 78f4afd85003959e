#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mosquitonet/tensor.hpp"

namespace mqnet {

enum class Mode { train, eval };

/// A trainable tensor and its gradient accumulator.
struct Parameter {
  Tensor value;
  Tensor grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0f); }
  std::size_t size() const noexcept { return value.size(); }
};

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t kernel = 5;
  std::size_t stride = 1;
  std::size_t pad = 2;

  std::size_t output_extent(std::size_t input) const {
    if (stride == 0) throw DomainError("convolution stride must be positive");
    if (input + 2 * pad < kernel) {
      throw ShapeError("convolution kernel " + std::to_string(kernel) + " does not fit input extent " +
                       std::to_string(input) + " with pad " + std::to_string(pad));
    }
    return (input + 2 * pad - kernel) / stride + 1;
  }
};

namespace detail {

/// Output columns [lo, hi) whose tap lands inside a row of `width` pixels.
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t out_w, std::size_t width, std::size_t stride,
                                                         std::size_t v, std::size_t pad) {
  // x = j * stride + v - pad must satisfy 0 <= x < width.
  const std::size_t lo = v >= pad ? 0 : (pad - v + stride - 1) / stride;
  const std::size_t limit = width + pad;  // j * stride + v < width + pad
  const std::size_t hi = limit > v ? std::min(out_w, (limit - v - 1) / stride + 1) : 0;
  return {std::min(lo, hi), hi};
}

/// Unrolls one image [C,H,W] into columns [C*k*k, Ho*Wo].
inline void im2col(const float* x, std::size_t channels, std::size_t height, std::size_t width,
                   const ConvGeometry& g, std::size_t out_h, std::size_t out_w, float* cols) {
  const std::size_t k = g.kernel, s = g.stride;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* xc = x + c * height * width;
    for (std::size_t u = 0; u < k; ++u) {
      for (std::size_t v = 0; v < k; ++v) {
        float* row = cols + ((c * k + u) * k + v) * plane;
        const auto [lo, hi] = valid_columns(out_w, width, s, v, g.pad);
        for (std::size_t i = 0; i < out_h; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * s + u) - pad;
          float* dst = row + i * out_w;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height) || lo == hi) {
            std::fill_n(dst, out_w, 0.0f);
            continue;
          }
          // Source pixel for column j is src[(j - lo) * s].
          const float* src = xc + static_cast<std::size_t>(y) * width + (lo * s + v - g.pad);
          std::fill_n(dst, lo, 0.0f);
          if (s == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (std::size_t j = lo; j < hi; ++j) dst[j] = src[(j - lo) * s];
          }
          std::fill(dst + hi, dst + out_w, 0.0f);
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back onto the image.
inline void col2im(const float* cols, std::size_t channels, std::size_t height, std::size_t width,
                   const ConvGeometry& g, std::size_t out_h, std::size_t out_w, float* x) {
  const std::size_t k = g.kernel, s = g.stride;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t plane = out_h * out_w;
  std::fill_n(x, channels * height * width, 0.0f);
  for (std::size_t c = 0; c < channels; ++c) {
    float* xc = x + c * height * width;
    for (std::size_t u = 0; u < k; ++u) {
      for (std::size_t v = 0; v < k; ++v) {
        const float* row = cols + ((c * k + u) * k + v) * plane;
        const auto [lo, hi] = valid_columns(out_w, width, s, v, g.pad);
        for (std::size_t i = 0; i < out_h; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * s + u) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) continue;
          if (lo == hi) continue;
          float* dst = xc + static_cast<std::size_t>(y) * width + (lo * s + v - g.pad);
          const float* src = row + i * out_w + lo;
          if (s == 1) {
            for (std::size_t j = 0; j < hi - lo; ++j) dst[j] += src[j];
          } else {
            for (std::size_t j = 0; j < hi - lo; ++j) dst[j * s] += src[j];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// im2col convolution. x [N,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout].
inline Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
  if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
    throw ShapeError("conv2d expects x [N,C,H,W], weight [Co,Ci,k,k], bias [Co]; got " + to_string(x.shape()) +
                     ", " + to_string(weight.shape()) + ", " + to_string(bias.shape()));
  }
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + ", weight " +
                     to_string(weight.shape()));
  }
  if (weight.dim(2) != g.kernel || weight.dim(3) != g.kernel || bias.dim(0) != cout) {
    throw ShapeError("conv2d weight " + to_string(weight.shape()) + " / bias " + to_string(bias.shape()) +
                     " inconsistent with kernel " + std::to_string(g.kernel));
  }
  const std::size_t oh = g.output_extent(h), ow = g.output_extent(w);
  const std::size_t patch = cin * g.kernel * g.kernel;
  const std::size_t plane = oh * ow;

  Tensor out({n, cout, oh, ow});
  std::vector<float> cols(patch * plane);
  for (std::size_t b = 0; b < n; ++b) {
    detail::im2col(x.data() + b * cin * h * w, cin, h, w, g, oh, ow, cols.data());
    float* o = out.data() + b * cout * plane;
    for (std::size_t co = 0; co < cout; ++co) std::fill_n(o + co * plane, plane, bias[co]);
    detail::gemm_nn(cout, plane, patch, weight.data(), patch, cols.data(), plane, o, plane, true);
  }
  return out;
}

class Conv2d {
 public:
  struct Cache {
    Tensor input;
  };

  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, ConvGeometry geometry = {})
      : weight(Tensor({out_channels, in_channels, geometry.kernel, geometry.kernel})),
        bias(Tensor({out_channels})),
        geometry_(geometry) {}

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const {
    Tensor out = conv2d_forward(x, weight.value, bias.value, geometry_);
    if (cache) cache->input = x;
    return out;
  }

  /// Gradient w.r.t. the input only; parameters are untouched.
  Tensor backward_input(const Cache& cache, const Tensor& grad_out) const {
    return backward_impl(cache, grad_out, nullptr, nullptr);
  }

  /// Returns the input gradient and accumulates into weight.grad / bias.grad.
  /// With `input_grad` false only the parameter gradients are computed and
  /// an empty tensor is returned.
  Tensor backward(const Cache& cache, const Tensor& grad_out, bool input_grad = true) {
    return backward_impl(cache, grad_out, &weight.grad, &bias.grad, input_grad);
  }

  const ConvGeometry& geometry() const noexcept { return geometry_; }
  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t out_channels() const { return weight.value.dim(0); }

  Parameter weight;
  Parameter bias;

 private:
  Tensor backward_impl(const Cache& cache, const Tensor& grad_out, Tensor* grad_w, Tensor* grad_b,
                       bool input_grad = true) const {
    const Tensor& x = cache.input;
    if (x.rank() != 4) throw ShapeError("conv2d backward called without a cached forward");
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = out_channels();
    const std::size_t oh = geometry_.output_extent(h), ow = geometry_.output_extent(w);
    if (grad_out.shape() != Shape{n, cout, oh, ow}) {
      throw ShapeError("conv2d backward: grad " + to_string(grad_out.shape()) + " does not match forward output " +
                       to_string(Shape{n, cout, oh, ow}));
    }
    const std::size_t patch = cin * geometry_.kernel * geometry_.kernel;
    const std::size_t plane = oh * ow;

    const Tensor w_t = transpose(weight.value.reshaped({cout, patch}));
    Tensor grad_x = input_grad ? Tensor(x.shape()) : Tensor();
    std::vector<float> cols(grad_w ? patch * plane : 0);
    std::vector<float> grad_cols(input_grad ? patch * plane : 0);
    for (std::size_t b = 0; b < n; ++b) {
      const float* g = grad_out.data() + b * cout * plane;
      if (grad_w) {
        detail::im2col(x.data() + b * cin * h * w, cin, h, w, geometry_, oh, ow, cols.data());
        detail::gemm_nt(cout, patch, plane, g, plane, cols.data(), plane, grad_w->data(), patch, true);
      }
      if (grad_b) {
        for (std::size_t co = 0; co < cout; ++co) {
          double s = 0.0;
          for (std::size_t p = 0; p < plane; ++p) s += g[co * plane + p];
          (*grad_b)[co] += static_cast<float>(s);
        }
      }
      if (!input_grad) continue;
      detail::gemm_nn(patch, plane, cout, w_t.data(), cout, g, plane, grad_cols.data(), plane, false);
      detail::col2im(grad_cols.data(), cin, h, w, geometry_, oh, ow, grad_x.data() + b * cin * h * w);
    }
    return grad_x;
  }

  ConvGeometry geometry_;
};

// ---------------------------------------------------------------------------
// Batch normalization

class BatchNorm2d {
 public:
  struct Cache {
    Mode mode = Mode::eval;
    Tensor normalized;
    std::vector<float> inv_std;
  };

  static constexpr float kDefaultEps = 1e-5f;
  static constexpr float kDefaultMomentum = 0.1f;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels, float eps = kDefaultEps, float momentum = kDefaultMomentum)
      : gamma(Tensor({channels}, 1.0f)),
        beta(Tensor({channels})),
        running_mean(Tensor({channels})),
        running_var(Tensor({channels}, 1.0f)),
        eps_(eps),
        momentum_(momentum) {}

  /// Marks the running statistics (mean 0, var 1) as usable for eval mode.
  void init_running_stats() {
    running_mean.fill(0.0f);
    running_var.fill(1.0f);
    stats_ready_ = true;
  }
  void set_running_stats(Tensor mean, Tensor var) {
    if (mean.shape() != gamma.value.shape() || var.shape() != gamma.value.shape()) {
      throw ShapeError("batchnorm running stats shape mismatch");
    }
    running_mean = std::move(mean);
    running_var = std::move(var);
    stats_ready_ = true;
  }
  bool has_running_stats() const noexcept { return stats_ready_; }

  Tensor forward(const Tensor& x, Mode mode, Cache* cache = nullptr) {
    return mode == Mode::train ? forward_train(x, cache) : forward_eval(x, cache);
  }

  /// Normalizes with batch statistics and updates the running estimates.
  Tensor forward_train(const Tensor& x, Cache* cache = nullptr) {
    const auto [n, c, plane] = dims(x);
    const std::size_t count = n * plane;
    if (count < 2) throw DomainError("batchnorm train mode needs at least 2 values per channel");
    Tensor xhat(x.shape());
    Tensor out(x.shape());
    std::vector<float> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const float* p = x.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const float* p = x.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / static_cast<double>(count);
      const float istd = static_cast<float>(1.0 / std::sqrt(var + eps_));
      inv_std[ch] = istd;
      const float m = static_cast<float>(mu);
      const float gm = gamma.value[ch], bt = beta.value[ch];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const float xh = (x[off + i] - m) * istd;
          xhat[off + i] = xh;
          out[off + i] = gm * xh + bt;
        }
      }
      // Running variance tracks the unbiased estimate.
      const double unbiased = sq / static_cast<double>(count - 1);
      running_mean[ch] = (1.0f - momentum_) * running_mean[ch] + momentum_ * m;
      running_var[ch] = (1.0f - momentum_) * running_var[ch] + momentum_ * static_cast<float>(unbiased);
    }
    stats_ready_ = true;
    if (cache) {
      cache->mode = Mode::train;
      cache->normalized = std::move(xhat);
      cache->inv_std = std::move(inv_std);
    }
    return out;
  }

  Tensor forward_eval(const Tensor& x, Cache* cache = nullptr) const {
    if (!stats_ready_) throw DomainError("batchnorm eval mode used before running statistics exist");
    const auto [n, c, plane] = dims(x);
    Tensor out(x.shape());
    Tensor xhat;
    if (cache) xhat = Tensor(x.shape());
    std::vector<float> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float istd = 1.0f / std::sqrt(running_var[ch] + eps_);
      inv_std[ch] = istd;
      const float m = running_mean[ch];
      const float gm = gamma.value[ch], bt = beta.value[ch];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const float xh = (x[off + i] - m) * istd;
          if (cache) xhat[off + i] = xh;
          out[off + i] = gm * xh + bt;
        }
      }
    }
    if (cache) {
      cache->mode = Mode::eval;
      cache->normalized = std::move(xhat);
      cache->inv_std = std::move(inv_std);
    }
    return out;
  }

  Tensor backward_input(const Cache& cache, const Tensor& grad_out) const {
    return backward_impl(cache, grad_out, nullptr, nullptr);
  }

  Tensor backward(const Cache& cache, const Tensor& grad_out) {
    return backward_impl(cache, grad_out, &gamma.grad, &beta.grad);
  }

  std::size_t channels() const { return gamma.value.dim(0); }
  float eps() const noexcept { return eps_; }
  float momentum() const noexcept { return momentum_; }

  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;

 private:
  struct Dims {
    std::size_t n, c, plane;
  };

  Dims dims(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != channels()) {
      throw ShapeError("batchnorm expects [N," + std::to_string(channels()) + ",H,W], got " +
                       to_string(x.shape()));
    }
    return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  }

  Tensor backward_impl(const Cache& cache, const Tensor& grad_out, Tensor* grad_gamma, Tensor* grad_beta) const {
    const Tensor& xhat = cache.normalized;
    if (xhat.shape() != grad_out.shape()) {
      throw ShapeError("batchnorm backward: grad " + to_string(grad_out.shape()) + " does not match cached " +
                       to_string(xhat.shape()));
    }
    const auto [n, c, plane] = dims(grad_out);
    const double count = static_cast<double>(n * plane);
    Tensor grad_x(grad_out.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += grad_out[off + i];
          sum_dy_xhat += static_cast<double>(grad_out[off + i]) * xhat[off + i];
        }
      }
      if (grad_gamma) (*grad_gamma)[ch] += static_cast<float>(sum_dy_xhat);
      if (grad_beta) (*grad_beta)[ch] += static_cast<float>(sum_dy);
      const float k = gamma.value[ch] * cache.inv_std[ch];
      if (cache.mode == Mode::eval) {
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) grad_x[off + i] = k * grad_out[off + i];
        }
      } else {
        const float mean_dy = static_cast<float>(sum_dy / count);
        const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / count);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            grad_x[off + i] = k * (grad_out[off + i] - mean_dy - xhat[off + i] * mean_dy_xhat);
          }
        }
      }
    }
    return grad_x;
  }

  float eps_ = kDefaultEps;
  float momentum_ = kDefaultMomentum;
  bool stats_ready_ = false;
};

// ---------------------------------------------------------------------------
// ReLU

struct ReluCache {
  Tensor input;
};

inline Tensor relu(const Tensor& x, ReluCache* cache = nullptr) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  if (cache) cache->input = x;
  return out;
}

/// Subgradient at exactly 0 is 0.
inline Tensor relu_backward(const ReluCache& cache, const Tensor& grad_out) {
  if (cache.input.shape() != grad_out.shape()) {
    throw ShapeError("relu backward: grad " + to_string(grad_out.shape()) + " does not match cached " +
                     to_string(cache.input.shape()));
  }
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = cache.input[i] > 0.0f ? grad_out[i] : 0.0f;
  return g;
}

// ---------------------------------------------------------------------------
// Max pooling

struct PoolGeometry {
  std::size_t kernel = 2;
  std::size_t stride = 2;

  std::size_t output_extent(std::size_t input) const {
    if (input < kernel) {
      throw ShapeError("max-pool kernel " + std::to_string(kernel) + " exceeds input extent " +
                       std::to_string(input));
    }
    return (input - kernel) / stride + 1;
  }
};

struct MaxPoolCache {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input offset per output element
};

inline Tensor maxpool2d(const Tensor& x, PoolGeometry g = {}, MaxPoolCache* cache = nullptr) {
  if (x.rank() != 4) throw ShapeError("maxpool2d expects [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = g.output_extent(h), ow = g.output_extent(w);
  Tensor out({n, c, oh, ow});
  if (cache) {
    cache->input_shape = x.shape();
    cache->argmax.assign(out.size(), 0);
  }
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const std::size_t base = nc * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + (i * g.stride) * w + j * g.stride;
        for (std::size_t u = 0; u < g.kernel; ++u) {
          for (std::size_t v = 0; v < g.kernel; ++v) {
            const std::size_t idx = base + (i * g.stride + u) * w + (j * g.stride + v);
            if (x[idx] > x[best]) best = idx;
          }
        }
        out[o] = x[best];
        if (cache) cache->argmax[o] = best;
      }
    }
  }
  return out;
}

inline Tensor maxpool2d_backward(const MaxPoolCache& cache, const Tensor& grad_out) {
  if (cache.argmax.size() != grad_out.size()) {
    throw ShapeError("maxpool backward: grad " + to_string(grad_out.shape()) + " does not match cached forward");
  }
  Tensor g(cache.input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) g[cache.argmax[o]] += grad_out[o];
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected

class Linear {
 public:
  struct Cache {
    Tensor input;
  };

  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features)
      : weight(Tensor({in_features, out_features})), bias(Tensor({out_features})) {}

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const {
    if (x.rank() != 2 || x.dim(1) != in_features()) {
      throw ShapeError("linear expects [N," + std::to_string(in_features()) + "], got " + to_string(x.shape()));
    }
    const std::size_t n = x.dim(0), din = in_features(), dout = out_features();
    Tensor out({n, dout});
    for (std::size_t r = 0; r < n; ++r) std::copy_n(bias.value.data(), dout, out.data() + r * dout);
    detail::gemm_nn(n, dout, din, x.data(), din, weight.value.data(), dout, out.data(), dout, true);
    if (cache) cache->input = x;
    return out;
  }

  Tensor backward_input(const Cache& cache, const Tensor& grad_out) const {
    check_grad(cache, grad_out);
    const std::size_t n = grad_out.dim(0), din = in_features(), dout = out_features();
    Tensor grad_x({n, din});
    detail::gemm_nt(n, din, dout, grad_out.data(), dout, weight.value.data(), dout, grad_x.data(), din, false);
    return grad_x;
  }

  Tensor backward(const Cache& cache, const Tensor& grad_out) {
    Tensor grad_x = backward_input(cache, grad_out);
    const std::size_t n = grad_out.dim(0), din = in_features(), dout = out_features();
    const Tensor xt = transpose(cache.input);
    detail::gemm_nn(din, dout, n, xt.data(), n, grad_out.data(), dout, weight.grad.data(), dout, true);
    for (std::size_t o = 0; o < dout; ++o) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += grad_out[r * dout + o];
      bias.grad[o] += static_cast<float>(s);
    }
    return grad_x;
  }

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Parameter weight;
  Parameter bias;

 private:
  void check_grad(const Cache& cache, const Tensor& grad_out) const {
    if (cache.input.rank() != 2 || grad_out.shape() != Shape{cache.input.dim(0), out_features()}) {
      throw ShapeError("linear backward: grad " + to_string(grad_out.shape()) + " does not match cached input " +
                       to_string(cache.input.shape()));
    }
  }
};

// ---------------------------------------------------------------------------
// Dropout (inverted)

struct DropoutCache {
  Tensor mask;  // 0 or 1/(1-p); empty when the pass was an identity
};

inline void check_dropout_p(float p) {
  if (!(p >= 0.0f && p < 1.0f)) throw DomainError("dropout probability must be in [0,1), got " + std::to_string(p));
}

inline Tensor dropout(const Tensor& x, float p, Mode mode, Rng& rng, DropoutCache* cache = nullptr) {
  check_dropout_p(p);
  if (cache) cache->mask = Tensor();
  if (mode == Mode::eval || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  Tensor mask(x.shape());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? 0.0f : keep_scale;
    out[i] = x[i] * mask[i];
  }
  if (cache) cache->mask = std::move(mask);
  return out;
}

inline Tensor dropout_backward(const DropoutCache& cache, const Tensor& grad_out) {
  if (cache.mask.empty()) return grad_out;
  return mul(grad_out, cache.mask);
}

// ---------------------------------------------------------------------------
// Loss

/// Row-wise softmax of [N,C] logits.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [N,C], got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const float* row = logits.data() + r * c;
    const float m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j]) - m);
    for (std::size_t j = 0; j < c; ++j) p[r * c + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - m) / z);
  }
  return p;
}

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean negative log-likelihood over the batch; grad = (softmax - onehot) / N.
inline LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross-entropy: logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  LossResult r;
  r.grad_logits = Tensor(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DomainError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) +
                        " classes");
    }
    const float* row = logits.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    const double log_z = std::log(z) + m;
    r.loss += log_z - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) {
      const double pj = std::exp(row[j] - log_z);
      const double onehot = (static_cast<int>(j) == labels[i]) ? 1.0 : 0.0;
      r.grad_logits[i * c + j] = static_cast<float>((pj - onehot) / static_cast<double>(n));
    }
  }
  r.loss /= static_cast<double>(n);
  return r;
}

}  // namespace mqnet
