#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ademvl/errors.hpp"

namespace ademvl {

// Scalar type used everywhere. f64 keeps finite-difference checks meaningful.
using Real = double;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major array of rank 1..3. A default-constructed Tensor is the
// "unset" value (rank 0, no data) and is only used as a placeholder.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = 0.0) : shape_(std::move(shape)) {
    check_rank();
    data_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<Real> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  static Tensor vector(std::initializer_list<Real> v) {
    return Tensor({v.size()}, std::vector<Real>(v));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  bool empty() const noexcept { return shape_.empty(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  // Matrix views; rank-1 tensors read as a single row.
  std::size_t rows() const {
    require_matrix("rows");
    return rank() == 1 ? 1 : shape_[0];
  }
  std::size_t cols() const {
    require_matrix("cols");
    return rank() == 1 ? shape_[0] : shape_[1];
  }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  const std::vector<Real>& values() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  Real operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  Real& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Real operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::span<Real> row(std::size_t i) { return {data_.data() + i * cols(), cols()}; }
  std::span<const Real> row(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }

  bool operator==(const Tensor& o) const = default;

  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  void check_rank() const {
    if (shape_.empty() || shape_.size() > 3) {
      throw ShapeError("tensor rank must be 1..3, got shape " + shape_str(shape_));
    }
  }
  void require_matrix(const char* what) const {
    if (rank() != 1 && rank() != 2) {
      throw ShapeError(std::string(what) + "() needs rank 1 or 2, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
inline void require_rank2(const Tensor& t, std::string_view op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
  }
}
}  // namespace detail

// c[i][j] accumulates a[i][k]*b[k][j] for k = 0..K-1 in order, so results are
// reproducible bit-for-bit regardless of call site.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor c({m, n});
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  Real* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* ci = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = pa[i * k + p];
      const Real* bp = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* bj = b.data().data() + j * k;
      Real s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  return c;
}

// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_tn");
  detail::require_rank2(b, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul_tn inner dimensions differ: " + shape_str(a.shape()) + "^T x " +
                     shape_str(b.shape()));
  }
  Tensor c({m, n});
  Real* pc = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const Real* ap = a.data().data() + p * m;
    const Real* bp = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real api = ap[i];
      if (api == 0.0) continue;
      Real* ci = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (Tensor::count(shape) != a.size()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), a.values());
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "concat_rows");
  detail::require_rank2(b, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("concat_rows column mismatch: " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<Real> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor({a.dim(0) + b.dim(0), a.dim(1)}, std::move(data));
}

// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_rows");
  if (begin > end || end > a.dim(0)) {
    throw ShapeError("slice_rows range out of bounds for " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(1);
  return Tensor({end - begin, n}, std::vector<Real>(a.values().begin() + begin * n,
                                                   a.values().begin() + end * n));
}

inline Tensor scale(const Tensor& a, Real s) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

// In-place a += s * b.
inline void axpy(Tensor& a, Real s, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

inline Real max_abs(const Tensor& a) {
  Real m = 0.0;
  for (Real v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  Real m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool all_finite(const Tensor& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](Real v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { identity, softmax_rows, relu, elu, silu, silu_positive };

inline constexpr Activation kAllActivations[] = {Activation::identity, Activation::softmax_rows,
                                                 Activation::relu,     Activation::elu,
                                                 Activation::silu,     Activation::silu_positive};

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::softmax_rows: return "softmax";
    case Activation::relu: return "relu";
    case Activation::elu: return "elu";
    case Activation::silu: return "silu";
    case Activation::silu_positive: return "silu-positive";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  for (Activation a : kAllActivations)
    if (to_string(a) == s) return a;
  throw ConfigError("unknown activation '" + std::string(s) +
                    "' (expected identity|softmax|relu|elu|silu|silu-positive)");
}

inline Real sigmoid(Real x) { return 1.0 / (1.0 + std::exp(-x)); }
inline Real silu(Real x) { return x * sigmoid(x); }
inline Real silu_grad(Real x) {
  const Real s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

inline void softmax_inplace(std::span<Real> row) {
  if (row.empty()) return;
  const Real mx = *std::max_element(row.begin(), row.end());
  Real z = 0.0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : row) v /= z;
}

// Index of the global minimum, first occurrence on ties.
inline std::size_t argmin_index(const Tensor& x) {
  return static_cast<std::size_t>(std::min_element(x.data().begin(), x.data().end()) -
                                  x.data().begin());
}

inline Tensor activation(const Tensor& x, Activation kind) {
  Tensor y = x;
  switch (kind) {
    case Activation::identity:
      break;
    case Activation::softmax_rows:
      detail::require_rank2(x, "softmax-rows");
      for (std::size_t i = 0; i < y.dim(0); ++i) softmax_inplace(y.row(i));
      break;
    case Activation::relu:
      for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::elu:
      for (auto& v : y.data()) v = v > 0.0 ? v : std::expm1(v);
      break;
    case Activation::silu:
      for (auto& v : y.data()) v = silu(v);
      break;
    case Activation::silu_positive: {
      if (x.size() == 0) break;
      const Real mn = x[argmin_index(x)];
      for (auto& v : y.data()) v = silu(v) - mn;
      break;
    }
  }
  return y;
}

// Vector-Jacobian product of activation() at x.
inline Tensor activation_backward(const Tensor& x, Activation kind, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "activation_backward");
  Tensor g = grad_out;
  switch (kind) {
    case Activation::identity:
      break;
    case Activation::softmax_rows: {
      const Tensor s = activation(x, Activation::softmax_rows);
      for (std::size_t i = 0; i < g.dim(0); ++i) {
        auto gr = g.row(i);
        auto sr = s.row(i);
        Real dot = 0.0;
        for (std::size_t j = 0; j < gr.size(); ++j) dot += gr[j] * sr[j];
        for (std::size_t j = 0; j < gr.size(); ++j) gr[j] = sr[j] * (gr[j] - dot);
      }
      break;
    }
    case Activation::relu:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > 0.0 ? g[i] : 0.0;
      break;
    case Activation::elu:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= x[i] > 0.0 ? 1.0 : std::exp(x[i]);
      break;
    case Activation::silu:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= silu_grad(x[i]);
      break;
    case Activation::silu_positive: {
      if (x.size() == 0) break;
      Real total = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        total += g[i];
        g[i] *= silu_grad(x[i]);
      }
      g[argmin_index(x)] -= total;
      break;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling over an h x w x c grid with a k x k window and stride k.

namespace detail {
template <typename Reduce>
Tensor pool2d(const Tensor& grid, std::size_t k, std::string_view op, Reduce reduce) {
  if (grid.rank() != 3) {
    throw ShapeError(std::string(op) + " expects h x w x c, got " + shape_str(grid.shape()));
  }
  const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw ShapeError(std::string(op) + " kernel " + std::to_string(k) + " does not divide grid " +
                     shape_str(grid.shape()));
  }
  const std::size_t oh = h / k, ow = w / k;
  Tensor out({oh, ow, c});
  std::vector<Real> window(k * k);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t n = 0;
        for (std::size_t di = 0; di < k; ++di)
          for (std::size_t dj = 0; dj < k; ++dj) window[n++] = grid(i * k + di, j * k + dj, ch);
        out(i, j, ch) = reduce(window);
      }
  return out;
}
}  // namespace detail

inline Tensor avg_pool2d(const Tensor& grid, std::size_t k) {
  return detail::pool2d(grid, k, "avg_pool2d", [](const std::vector<Real>& w) {
    Real s = 0.0;
    for (Real v : w) s += v;
    return s / static_cast<Real>(w.size());
  });
}

inline Tensor max_pool2d(const Tensor& grid, std::size_t k) {
  return detail::pool2d(grid, k, "max_pool2d", [](const std::vector<Real>& w) {
    return *std::max_element(w.begin(), w.end());
  });
}

}  // namespace ademvl
