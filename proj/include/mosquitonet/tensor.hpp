#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace mqnet {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major float tensor. Images use NCHW.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + mqnet::to_string(shape_));
    }
  }

  static Tensor vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  float& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  float at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  /// Same data viewed under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + mqnet::to_string(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(index.size()) + " does not match tensor rank " +
                       std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Random numbers

struct RngSeed {
  std::uint64_t value = 0;
  friend bool operator==(RngSeed, RngSeed) = default;
};

/// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministically forks a seed for a named consumer and an optional index
/// (epoch, fold, sample...).
inline RngSeed fork_seed(RngSeed root, std::string_view purpose, std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the purpose tag
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return RngSeed{mix64(mix64(root.value ^ h) + index)};
}

class Rng {
 public:
  explicit Rng(RngSeed seed) : engine_(seed.value) {}

  float uniform(float a, float b) {
    if (a == b) return a;
    return std::uniform_real_distribution<float>(a, b)(engine_);
  }
  float normal(float mean, float stddev) { return std::normal_distribution<float>(mean, stddev)(engine_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }
  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

struct UniformInit {
  float low = 0.0f;
  float high = 0.0f;
};

/// Normal with std = sqrt(2 / fan_in).
struct KaimingFanIn {
  std::size_t fan_in = 1;
};

using InitScheme = std::variant<UniformInit, KaimingFanIn>;

inline Tensor random_init(const Shape& shape, const InitScheme& scheme, RngSeed seed) {
  if (shape.empty()) throw ShapeError("random_init requires a non-empty shape");
  Tensor t(shape);
  Rng rng(seed);
  if (const auto* u = std::get_if<UniformInit>(&scheme)) {
    for (float& v : t.values()) v = rng.uniform(u->low, u->high);
  } else {
    const auto& k = std::get<KaimingFanIn>(scheme);
    if (k.fan_in == 0) throw DomainError("kaiming fan_in must be positive");
    const float stddev = std::sqrt(2.0f / static_cast<float>(k.fan_in));
    for (float& v : t.values()) v = rng.normal(0.0f, stddev);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Matrix kernels

namespace detail {

/// C[m,n] (+)= A[m,k] * B[k,n]; row-major with leading dimensions.
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* __restrict a, std::size_t lda,
                    const float* __restrict b, std::size_t ldb, float* __restrict c, std::size_t ldc,
                    bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, 0.0f);
  }
  constexpr std::size_t kColBlock = 512;
  constexpr std::size_t kDepthBlock = 128;
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t nb = std::min(kColBlock, n - j0);
    for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
      const std::size_t pe = std::min(k, p0 + kDepthBlock);
      std::size_t i = 0;
      for (; i + 4 <= m; i += 4) {
        float* __restrict c0 = c + (i + 0) * ldc + j0;
        float* __restrict c1 = c + (i + 1) * ldc + j0;
        float* __restrict c2 = c + (i + 2) * ldc + j0;
        float* __restrict c3 = c + (i + 3) * ldc + j0;
        for (std::size_t p = p0; p < pe; ++p) {
          const float a0 = a[(i + 0) * lda + p];
          const float a1 = a[(i + 1) * lda + p];
          const float a2 = a[(i + 2) * lda + p];
          const float a3 = a[(i + 3) * lda + p];
          const float* __restrict brow = b + p * ldb + j0;
          for (std::size_t j = 0; j < nb; ++j) {
            const float bv = brow[j];
            c0[j] += a0 * bv;
            c1[j] += a1 * bv;
            c2[j] += a2 * bv;
            c3[j] += a3 * bv;
          }
        }
      }
      for (; i < m; ++i) {
        float* __restrict ci = c + i * ldc + j0;
        for (std::size_t p = p0; p < pe; ++p) {
          const float av = a[i * lda + p];
          const float* __restrict brow = b + p * ldb + j0;
          for (std::size_t j = 0; j < nb; ++j) ci[j] += av * brow[j];
        }
      }
    }
  }
}

inline float dot(const float* __restrict x, const float* __restrict y, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += x[i + l] * y[i + l];
  }
  float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

/// C[m,n] (+)= A[m,k] * B[n,k]^T.
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
                    std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const float v = dot(a + i * lda, b + j * ldb, k);
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + v : v;
    }
  }
}

inline void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t re = std::min(rows, r0 + kTile);
      const std::size_t ce = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < re; ++r) {
        for (std::size_t c = c0; c < ce; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  detail::gemm_nn(m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + to_string(a.shape()));
  Tensor t({a.dim(1), a.dim(0)});
  detail::transpose(a.dim(0), a.dim(1), a.data(), t.data());
  return t;
}

inline Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = 1.0f;
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { add, sub, mul, scale };

namespace detail {
inline float apply(ElementwiseOp op, float x, float y) {
  switch (op) {
    case ElementwiseOp::add: return x + y;
    case ElementwiseOp::sub: return x - y;
    case ElementwiseOp::mul:
    case ElementwiseOp::scale: return x * y;
  }
  return x;
}
}  // namespace detail

inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = detail::apply(op, a[i], b[i]);
  return out;
}

inline Tensor elementwise(ElementwiseOp op, const Tensor& a, float scalar) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = detail::apply(op, a[i], scalar);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }
inline Tensor scale(const Tensor& a, float s) { return elementwise(ElementwiseOp::scale, a, s); }

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, max, argmax };

/// Reduction over every element. argmax returns the flat index (lowest on ties).
inline double reduce_all(ReduceOp op, const Tensor& t) {
  if (t.empty()) throw DomainError("reduction over an empty tensor");
  switch (op) {
    case ReduceOp::sum:
    case ReduceOp::mean: {
      double s = 0.0;
      for (float v : t.values()) s += v;
      return op == ReduceOp::sum ? s : s / static_cast<double>(t.size());
    }
    case ReduceOp::max: return *std::max_element(t.values().begin(), t.values().end());
    case ReduceOp::argmax:
      return static_cast<double>(std::max_element(t.values().begin(), t.values().end()) - t.values().begin());
  }
  return 0.0;
}

/// Reduction along one axis; the axis is removed from the result shape
/// (a rank-1 input yields shape [1]). argmax results are stored as floats.
inline Tensor reduce(ReduceOp op, const Tensor& t, std::size_t axis) {
  if (t.empty()) throw DomainError("reduction over an empty tensor");
  if (axis >= t.rank()) {
    throw ShapeError("reduce axis " + std::to_string(axis) + " out of range for " + to_string(t.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
  const std::size_t len = t.dim(axis);

  Shape out_shape;
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i != axis) out_shape.push_back(t.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);

  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const float* base = t.data() + o * len * inner + in;
      double acc = 0.0;
      float best = base[0];
      std::size_t best_i = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const float v = base[l * inner];
        acc += v;
        if (v > best) {
          best = v;
          best_i = l;
        }
      }
      float r = 0.0f;
      switch (op) {
        case ReduceOp::sum: r = static_cast<float>(acc); break;
        case ReduceOp::mean: r = static_cast<float>(acc / static_cast<double>(len)); break;
        case ReduceOp::max: r = best; break;
        case ReduceOp::argmax: r = static_cast<float>(best_i); break;
      }
      out[o * inner + in] = r;
    }
  }
  return out;
}

inline double sum(const Tensor& t) { return reduce_all(ReduceOp::sum, t); }
inline double mean(const Tensor& t) { return reduce_all(ReduceOp::mean, t); }
inline float max(const Tensor& t) { return static_cast<float>(reduce_all(ReduceOp::max, t)); }
inline std::size_t argmax(const Tensor& t) { return static_cast<std::size_t>(reduce_all(ReduceOp::argmax, t)); }

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](float v) { return std::isfinite(v); });
}

}  // namespace mqnet
