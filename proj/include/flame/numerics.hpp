#pragma once

// Dense row-major linear algebra on doubles: products, reductions, a one-sided
// Jacobi SVD with rank truncation, and a functional Adam step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flame/errors.hpp"

namespace flame {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) + " does not match " + shape_string(rows_, cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  static Matrix column(std::span<const double> v) { return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end())); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::string shape() const { return shape_string(rows_, cols_); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) { return "(" + std::to_string(r) + "x" + std::to_string(c) + ")"; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void require_finite(const Matrix& m, const char* op) {
  if (!m.all_finite()) throw NumericError(std::string(op) + ": result contains non-finite values");
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
}

}  // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + a.shape() + " x " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      auto b_row = b.row(p);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aip * b_row[j];
    }
  }
  detail::require_finite(out, "matmul");
  return out;
}

/// y = m * x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw DimensionError("matvec: " + m.shape() + " x vector(" + std::to_string(x.size()) + ")");
  }
  Vector y(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * x[j];
    y[i] = acc;
  }
  return y;
}

/// y = m^T * x
inline Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
  if (m.rows() != x.size()) {
    throw DimensionError("matvec_transposed: " + m.shape() + "^T x vector(" + std::to_string(x.size()) + ")");
  }
  Vector y(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) y[j] += r[j] * xi;
  }
  return y;
}

/// m += scale * u v^T
inline void add_outer(Matrix& m, double scale, std::span<const double> u, std::span<const double> v) {
  if (m.rows() != u.size() || m.cols() != v.size()) {
    throw DimensionError("add_outer: target " + m.shape() + " vs outer " + Matrix::shape_string(u.size(), v.size()));
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double su = scale * u[i];
    if (su == 0.0) continue;
    auto r = m.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) r[j] += su * v[j];
  }
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double v : m.data()) acc += v * v;
  return std::sqrt(acc);
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) { return frobenius_norm(subtract(a, b)); }

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline Vector softmax(std::span<const double> v) {
  if (v.empty()) throw DomainError("softmax: empty input");
  const double peak = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(peak)) throw DomainError("softmax: non-finite input");
  Vector out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw DomainError("softmax: non-finite input");
    out[i] = std::exp(v[i] - peak);
    total += out[i];
  }
  for (auto& x : out) x /= total;
  return out;
}

/// log(sum(exp(v))) with max subtraction.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw DomainError("log_sum_exp: empty input");
  const double peak = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - peak);
  return peak + std::log(total);
}

/// Indices of the k largest entries, ties to the lower index, returned ascending.
inline std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
  if (k < 1 || k > v.size()) {
    throw DomainError("topk_indices: k=" + std::to_string(k) + " outside [1, " + std::to_string(v.size()) + "]");
  }
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// SVD

struct SvdResult {
  Matrix u;                       // m x q, orthonormal columns
  std::vector<double> singular_values;  // length q, non-increasing
  Matrix vt;                      // q x n, orthonormal rows
};

struct SvdOptions {
  double tolerance = 1e-10;
  int max_sweeps = 100;
};

namespace detail {

// Fill the unset columns of `q` (m x k, k <= m) with unit vectors orthogonal
// to every other column so the column set is orthonormal.
inline void complete_orthonormal_columns(Matrix& q, std::vector<bool> filled) {
  const std::size_t m = q.rows();
  std::size_t basis = 0;
  for (std::size_t c = 0; c < q.cols(); ++c) {
    if (filled[c]) continue;
    for (; basis < m; ++basis) {
      std::vector<double> cand(m, 0.0);
      cand[basis] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < q.cols(); ++o) {
          if (!filled[o]) continue;
          double proj = 0.0;
          for (std::size_t i = 0; i < m; ++i) proj += q(i, o) * cand[i];
          for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * q(i, o);
        }
      }
      double norm = 0.0;
      for (double x : cand) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (std::size_t i = 0; i < m; ++i) q(i, c) = cand[i] / norm;
        filled[c] = true;
        ++basis;
        break;
      }
    }
  }
}

// One-sided Jacobi on a tall matrix (rows >= cols).
inline SvdResult jacobi_svd_tall(const Matrix& a, const SvdOptions& opt) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix work = a;
  Matrix v = Matrix::identity(n);

  bool converged = (n < 2);
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          alpha += wp * wp;
          beta += wq * wq;
          gamma += wp * wq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          work(i, p) = c * wp - s * wq;
          work(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw NumericError("svd: one-sided Jacobi did not converge within " + std::to_string(opt.max_sweeps) + " sweeps");
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += work(i, j) * work(i, j);
    sigma[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double largest = n == 0 ? 0.0 : sigma[order[0]];
  const double negligible = std::max(largest, 1.0) * 1e-14;

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  std::vector<bool> filled(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    const double s = sigma[j];
    out.singular_values[k] = s;
    if (s > negligible) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = work(i, j) / s;
      filled[k] = true;
    }
    for (std::size_t i = 0; i < n; ++i) out.vt(k, i) = v(i, j);
  }
  complete_orthonormal_columns(out.u, filled);
  return out;
}

}  // namespace detail

/// Thin SVD: m = u * diag(s) * vt with q = min(rows, cols).
inline SvdResult svd(const Matrix& m, const SvdOptions& opt = {}) {
  if (m.size() == 0) throw DomainError("svd: empty matrix");
  if (!m.all_finite()) throw DomainError("svd: input contains non-finite values");
  if (m.rows() >= m.cols()) return detail::jacobi_svd_tall(m, opt);
  SvdResult t = detail::jacobi_svd_tall(transpose(m), opt);
  return SvdResult{transpose(t.vt), std::move(t.singular_values), transpose(t.u)};
}

struct LowRankFactors {
  Matrix left;   // rows x rank, U_r * diag(s_r)
  Matrix right;  // rank x cols, V_r^T
};

/// Best rank-`rank` Frobenius approximation of m as a product left * right.
inline LowRankFactors svd_truncate(const Matrix& m, std::size_t rank, const SvdOptions& opt = {}) {
  const std::size_t q = std::min(m.rows(), m.cols());
  if (rank < 1 || rank > q) {
    throw DomainError("svd_truncate: rank " + std::to_string(rank) + " outside [1, " + std::to_string(q) + "]");
  }
  const SvdResult s = svd(m, opt);
  LowRankFactors f{Matrix(m.rows(), rank), Matrix(rank, m.cols())};
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t k = 0; k < rank; ++k) f.left(i, k) = s.u(i, k) * s.singular_values[k];
  for (std::size_t k = 0; k < rank; ++k)
    for (std::size_t j = 0; j < m.cols(); ++j) f.right(k, j) = s.vt(k, j);
  return f;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  std::size_t step_count = 0;
  double lr = 1.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_param(const Matrix& param, double lr = 1.5e-4) {
    AdamState s;
    s.first_moment = Matrix(param.rows(), param.cols());
    s.second_moment = Matrix(param.rows(), param.cols());
    s.lr = lr;
    return s;
  }
};

struct AdamStep {
  Matrix param;
  AdamState state;
};

/// One bias-corrected Adam update. Inputs are left untouched.
inline AdamStep adam_step(const Matrix& param, const Matrix& grad, const AdamState& state) {
  detail::require_same_shape(param, grad, "adam_step(param, grad)");
  detail::require_same_shape(param, state.first_moment, "adam_step(param, first_moment)");
  detail::require_same_shape(param, state.second_moment, "adam_step(param, second_moment)");

  AdamStep out{param, state};
  out.state.step_count = state.step_count + 1;
  const double t = static_cast<double>(out.state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);

  auto p = out.param.data();
  auto g = grad.data();
  auto m1 = out.state.first_moment.data();
  auto m2 = out.state.second_moment.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m1[i] = state.beta1 * m1[i] + (1.0 - state.beta1) * g[i];
    m2[i] = state.beta2 * m2[i] + (1.0 - state.beta2) * g[i] * g[i];
    const double m_hat = m1[i] / bc1;
    const double v_hat = m2[i] / bc2;
    p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
  detail::require_finite(out.param, "adam_step");
  return out;
}

}  // namespace flame
