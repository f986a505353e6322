#pragma once

#include <algorithm>
#include <bit>
#include <cassert>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "bpq/errors.hpp"

namespace bpq {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major tensor. Real is float for training and inference; double is
// used for gradient checking.
template <std::floating_point Real>
class BasicTensor {
 public:
  using value_type = Real;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Real fill = Real{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_volume(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 view: all leading axes are folded into rows.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return shape_.empty() ? 1 : size() / cols(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  Real* raw() { return data_.data(); }
  const Real* raw() const { return data_.data(); }
  std::vector<Real>& storage() { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const Real& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<Real> row(std::size_t r) { return std::span<Real>(data_).subspan(r * cols(), cols()); }
  std::span<const Real> row(std::size_t r) const {
    return std::span<const Real>(data_).subspan(r * cols(), cols());
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_volume(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <std::floating_point To>
  BasicTensor<To> cast() const {
    std::vector<To> out(data_.begin(), data_.end());
    return BasicTensor<To>(shape_, std::move(out));
  }

  void fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t extent : shape_) {
      if (extent == 0) throw ShapeError("zero extent in shape " + shape_to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Groups of row indices that attend to each other. Every row of the token
// matrix belongs to exactly one group.
struct AttentionGroups {
  std::vector<std::vector<std::uint32_t>> members;
};

namespace kernels {

// 32-byte SIMD lane group (GCC/Clang vector extension).
template <typename Real>
struct Lanes {
  static constexpr std::size_t kWidth = 32 / sizeof(Real);
  typedef Real Vec __attribute__((vector_size(32)));

  static Vec load(const Real* p) {
    Vec v;
    std::memcpy(&v, p, sizeof(v));
    return v;
  }
  static void store(Real* p, Vec v) { std::memcpy(p, &v, sizeof(v)); }
};

// Register tile of IB rows x NV vectors; each element starts from its
// current value (or zero) and adds the k products in increasing order.
template <typename Real, std::size_t IB, std::size_t NV>
inline void gemm_tile(std::size_t i, std::size_t j0, std::size_t k, std::size_t n, const Real* a, const Real* b,
                      Real* c, bool accumulate) {
  using L = Lanes<Real>;
  typename L::Vec acc[IB][NV];
  for (std::size_t r = 0; r < IB; ++r)
    for (std::size_t v = 0; v < NV; ++v)
      acc[r][v] = accumulate ? L::load(c + (i + r) * n + j0 + v * L::kWidth) : typename L::Vec{};
  for (std::size_t p = 0; p < k; ++p) {
    const Real* brow = b + p * n + j0;
    for (std::size_t r = 0; r < IB; ++r) {
      const Real av = a[(i + r) * k + p];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * L::load(brow + v * L::kWidth);
    }
  }
  for (std::size_t r = 0; r < IB; ++r)
    for (std::size_t v = 0; v < NV; ++v) L::store(c + (i + r) * n + j0 + v * L::kWidth, acc[r][v]);
}

// C[m,n] (+)= A[m,k] * B[k,n]. Each output element is summed over k in
// increasing order, so the tiling below never changes the result.
template <typename Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c,
             bool accumulate) {
  constexpr std::size_t kW = Lanes<Real>::kWidth;
  constexpr std::size_t kIB = 4;
  const std::size_t m_tiled = m - m % kIB;
  std::size_t j0 = 0;
  auto sweep = [&]<std::size_t NV>(std::integral_constant<std::size_t, NV>) {
    for (; j0 + NV * kW <= n; j0 += NV * kW) {
      std::size_t i = 0;
      for (; i < m_tiled; i += kIB) gemm_tile<Real, kIB, NV>(i, j0, k, n, a, b, c, accumulate);
      for (; i < m; ++i) gemm_tile<Real, 1, NV>(i, j0, k, n, a, b, c, accumulate);
    }
  };
  sweep(std::integral_constant<std::size_t, 4>{});
  sweep(std::integral_constant<std::size_t, 1>{});
  if (j0 == n) return;
  for (std::size_t i = 0; i < m; ++i) {
    Real* __restrict crow = c + i * n;
    if (!accumulate) std::fill(crow + j0, crow + n, Real{0});
    const Real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* __restrict brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n], summed over m in increasing order.
template <typename Real>
void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  std::vector<Real> at(m * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  gemm_nn(k, m, n, at.data(), b, c, true);
}

using Float8 = Lanes<float>::Vec;
typedef std::int32_t Int8 __attribute__((vector_size(32)));

// exp with a Cephes-style polynomial, a few ulp of relative error over the
// clamped range.
inline Float8 fast_exp(Float8 x) {
  const Float8 lo = Float8{} - 87.3F;
  const Float8 hi = Float8{} + 88.7F;
  x = x > lo ? x : lo;
  x = x < hi ? x : hi;
  // Adding and removing 1.5 * 2^23 rounds to the nearest integer.
  const Float8 n = (x * 1.44269504088896341F + 12582912.0F) - 12582912.0F;
  Float8 r = x - n * 0.693359375F;
  r = r - n * -2.12194440e-4F;
  Float8 p = Float8{} + 1.9875691500E-4F;
  p = p * r + 1.3981999507E-3F;
  p = p * r + 8.3334519073E-3F;
  p = p * r + 4.1665795894E-2F;
  p = p * r + 1.6666665459E-1F;
  p = p * r + 5.0000001201E-1F;
  p = p * r * r + r + 1.0F;
  const Int8 bits = (__builtin_convertvector(n, Int8) + 127) << 23;
  return p * std::bit_cast<Float8>(bits);
}

// Scalar entry point; evaluates one lane so results match the vector path.
inline float fast_exp(float x) { return fast_exp(Float8{} + x)[0]; }

template <typename T>
struct ScalarOf {
  using type = T;
};
template <>
struct ScalarOf<Float8> {
  using type = float;
};

template <typename T>
inline T exp_fn(T x) {
  if constexpr (std::is_same_v<T, double>) {
    return std::exp(x);
  } else {
    return fast_exp(x);
  }
}

template <typename T>
inline T tanh_fn(T x) {
  if constexpr (std::is_same_v<T, double>) {
    return std::tanh(x);
  } else {
    return 1.0F - 2.0F / (1.0F + fast_exp(2.0F * x));
  }
}

// out[i] = fn(in[i]); float runs eight lanes at a time with a zero-padded tail.
template <typename Real, typename Fn>
void map_lanes(std::size_t n, const Real* in, Real* out, Fn fn) {
  if constexpr (std::is_same_v<Real, float>) {
    using L = Lanes<float>;
    std::size_t i = 0;
    for (; i + L::kWidth <= n; i += L::kWidth) L::store(out + i, fn(L::load(in + i)));
    if (i < n) {
      float buf[L::kWidth] = {};
      std::copy(in + i, in + n, buf);
      L::store(buf, fn(L::load(buf)));
      std::copy(buf, buf + (n - i), out + i);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(in[i]);
  }
}

template <typename Real>
void transpose(std::size_t rows, std::size_t cols, const Real* in, Real* out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

template <typename T>
T gelu_tanh(T x) {
  using S = typename ScalarOf<T>::type;
  constexpr S kAlpha = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S kBeta = S(0.044715);
  const T inner = kAlpha * (x + kBeta * x * x * x);
  return S(0.5) * x * (S(1) + tanh_fn(inner));
}

template <typename T>
T gelu_tanh_grad(T x) {
  using S = typename ScalarOf<T>::type;
  constexpr S kAlpha = S(0.7978845608028654);
  constexpr S kBeta = S(0.044715);
  const T inner = kAlpha * (x + kBeta * x * x * x);
  const T t = tanh_fn(inner);
  const T dinner = kAlpha * (S(1) + S(3) * kBeta * x * x);
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * dinner;
}

}  // namespace kernels

template <std::floating_point Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  BasicTensor<Real> out({a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.raw(), b.raw(), out.raw(), false);
  return out;
}

template <std::floating_point Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_to_string(a.shape()));
  BasicTensor<Real> out({a.dim(1), a.dim(0)});
  kernels::transpose(a.dim(0), a.dim(1), a.raw(), out.raw());
  return out;
}

// y = x * W + b with W laid out [in, out]. bias may be empty.
template <std::floating_point Real>
BasicTensor<Real> linear(const BasicTensor<Real>& x, const BasicTensor<Real>& weight,
                         const BasicTensor<Real>* bias) {
  if (weight.rank() != 2 || x.cols() != weight.dim(0)) {
    throw ShapeError("linear shape mismatch " + shape_to_string(x.shape()) + " x " +
                     shape_to_string(weight.shape()));
  }
  const std::size_t n = weight.dim(1);
  BasicTensor<Real> out({x.rows(), n});
  if (bias != nullptr) {
    if (bias->size() != n) throw ShapeError("linear bias length mismatch");
    for (std::size_t r = 0; r < x.rows(); ++r) std::copy(bias->raw(), bias->raw() + n, out.raw() + r * n);
  }
  kernels::gemm_nn(x.rows(), x.cols(), n, x.raw(), weight.raw(), out.raw(), bias != nullptr);
  return out;
}

template <std::floating_point Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add shape mismatch");
  BasicTensor<Real> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

// Softmax along `axis`, max-subtracted.
template <std::floating_point Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  BasicTensor<Real> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      Real mx = x[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      Real sum = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const Real e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= sum;
    }
  }
  return out;
}

template <std::floating_point Real>
struct LayerNormStats {
  std::vector<Real> mean;
  std::vector<Real> rstd;
};

// Row-wise layer normalization over the last axis. When `stats` is non-null
// the per-row mean and reciprocal standard deviation are returned for reuse.
template <std::floating_point Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gain,
                             const BasicTensor<Real>& bias, Real eps = Real(1e-5),
                             LayerNormStats<Real>* stats = nullptr) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) throw ShapeError("layer_norm affine length mismatch");
  if (!(eps > 0)) throw ConfigError("layer_norm eps must be positive");
  BasicTensor<Real> out(x.shape());
  if (stats != nullptr) {
    stats->mean.resize(rows);
    stats->rstd.resize(rows);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.raw() + r * cols;
    Real mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += in[c];
    mean /= Real(cols);
    Real var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= Real(cols);
    const Real rstd = Real(1) / std::sqrt(var + eps);
    Real* o = out.raw() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] = (in[c] - mean) * rstd * gain[c] + bias[c];
    if (stats != nullptr) {
      stats->mean[r] = mean;
      stats->rstd[r] = rstd;
    }
  }
  return out;
}

template <std::floating_point Real>
BasicTensor<Real> gelu(const BasicTensor<Real>& x) {
  BasicTensor<Real> out(x.shape());
  kernels::map_lanes(x.size(), x.raw(), out.raw(), [](auto v) { return kernels::gelu_tanh(v); });
  return out;
}

template <std::floating_point Real>
BasicTensor<Real> mean_rows(const BasicTensor<Real>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  BasicTensor<Real> out({1, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
  for (std::size_t c = 0; c < cols; ++c) out[c] /= Real(rows);
  return out;
}

// out[i,:] = x[i,:] + table[index[i],:]
template <std::floating_point Real>
BasicTensor<Real> add_rows(const BasicTensor<Real>& x, const BasicTensor<Real>& table,
                           std::span<const std::uint32_t> index) {
  if (index.size() != x.rows() || table.cols() != x.cols()) throw ShapeError("add_rows shape mismatch");
  BasicTensor<Real> out = x;
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (index[r] >= table.rows()) throw ShapeError("add_rows index out of range");
    const Real* t = table.raw() + index[r] * cols;
    Real* o = out.raw() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] += t[c];
  }
  return out;
}

namespace kernels {

// Copies the head slice [off, off + dh) of the listed rows into a dense
// [len, dh] buffer.
template <typename Real>
void gather_head(const Real* src, std::size_t dim, std::span<const std::uint32_t> rows, std::size_t off,
                 std::size_t dh, Real* dst) {
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(src + rows[i] * dim + off, dh, dst + i * dh);
}

template <typename Real>
void scatter_add_head(const Real* src, std::size_t dim, std::span<const std::uint32_t> rows, std::size_t off,
                      std::size_t dh, Real* dst) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Real* d = dst + rows[i] * dim + off;
    for (std::size_t j = 0; j < dh; ++j) d[j] += src[i * dh + j];
  }
}

// In-place row softmax of a [len, len] score tile after scaling.
template <typename Real>
void scaled_softmax_rows(Real* s, std::size_t len, Real scale) {
  for (std::size_t i = 0; i < len; ++i) {
    Real* row = s + i * len;
    Real mx = row[0] * scale;
    for (std::size_t j = 0; j < len; ++j) {
      row[j] *= scale;
      mx = std::max(mx, row[j]);
    }
    for (std::size_t j = 0; j < len; ++j) row[j] -= mx;
    map_lanes(len, row, row, [](auto v) { return exp_fn(v); });
    Real sum = 0;
    for (std::size_t j = 0; j < len; ++j) sum += row[j];
    const Real inv = Real(1) / sum;
    for (std::size_t j = 0; j < len; ++j) row[j] *= inv;
  }
}

}  // namespace kernels

// Multi-head scaled dot-product attention restricted to groups of rows.
// q, k, v are [N, D]; heads split D evenly. When `probs` is non-null the
// attention probabilities are appended group-major, head-minor.
template <std::floating_point Real>
BasicTensor<Real> grouped_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                    const BasicTensor<Real>& v, const AttentionGroups& groups,
                                    std::size_t heads, std::vector<Real>* probs = nullptr) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2) {
    throw ShapeError("attention q/k/v shape mismatch");
  }
  const std::size_t dim = q.cols();
  if (heads == 0 || dim % heads != 0) throw ShapeError("attention heads must divide width");
  const std::size_t dh = dim / heads;
  const Real scale = Real(1) / std::sqrt(Real(dh));
  BasicTensor<Real> out(q.shape());
  std::vector<Real> qg, kt, kg, vg, scores, og;
  if (probs != nullptr) probs->clear();
  for (const auto& members : groups.members) {
    const std::size_t len = members.size();
    qg.resize(len * dh);
    kg.resize(len * dh);
    kt.resize(len * dh);
    vg.resize(len * dh);
    og.resize(len * dh);
    scores.resize(len * len);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      kernels::gather_head(q.raw(), dim, members, off, dh, qg.data());
      kernels::gather_head(k.raw(), dim, members, off, dh, kg.data());
      kernels::gather_head(v.raw(), dim, members, off, dh, vg.data());
      kernels::transpose(len, dh, kg.data(), kt.data());
      kernels::gemm_nn(len, dh, len, qg.data(), kt.data(), scores.data(), false);
      kernels::scaled_softmax_rows(scores.data(), len, scale);
      kernels::gemm_nn(len, len, dh, scores.data(), vg.data(), og.data(), false);
      kernels::scatter_add_head(og.data(), dim, members, off, dh, out.raw());
      if (probs != nullptr) probs->insert(probs->end(), scores.begin(), scores.end());
    }
  }
  return out;
}

}  // namespace bpq
