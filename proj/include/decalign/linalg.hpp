#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "decalign/errors.hpp"

namespace decalign::linalg {

/// Dense row-major matrix of doubles. The one numeric container shared by
/// the GMM, transport and moment code; deliberately minimal.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {}
  Matrix(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != static_cast<size_t>(rows_) * cols_)
      throw DimensionMismatch("Matrix: data length does not match rows*cols");
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  Matrix operator*(const Matrix& rhs) const {
    if (cols_ != rhs.rows_) {
      std::ostringstream os;
      os << "Matrix multiply: (" << rows_ << "x" << cols_ << ") * (" << rhs.rows_ << "x"
         << rhs.cols_ << ")";
      throw DimensionMismatch(os.str());
    }
    Matrix out(rows_, rhs.cols_);
    for (int i = 0; i < rows_; ++i)
      for (int k = 0; k < cols_; ++k) {
        double a = (*this)(i, k);
        if (a == 0.0) continue;
        for (int j = 0; j < rhs.cols_; ++j) out(i, j) += a * rhs(k, j);
      }
    return out;
  }

  Matrix operator+(const Matrix& rhs) const {
    check_same_shape(rhs);
    Matrix out = *this;
    for (size_t i = 0; i < data_.size(); ++i) out.data_[i] += rhs.data_[i];
    return out;
  }

  Matrix operator-(const Matrix& rhs) const {
    check_same_shape(rhs);
    Matrix out = *this;
    for (size_t i = 0; i < data_.size(); ++i) out.data_[i] -= rhs.data_[i];
    return out;
  }

  Matrix scaled(double s) const {
    Matrix out = *this;
    for (auto& v : out.data_) v *= s;
    return out;
  }

  double trace() const {
    double t = 0.0;
    for (int i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
    return t;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  double max_asymmetry() const {
    double a = 0.0;
    for (int i = 0; i < rows_; ++i)
      for (int j = i + 1; j < cols_; ++j)
        a = std::max(a, std::abs((*this)(i, j) - (*this)(j, i)));
    return a;
  }

 private:
  void check_same_shape(const Matrix& rhs) const {
    if (rows_ != rhs.rows_ || cols_ != rhs.cols_)
      throw DimensionMismatch("Matrix: shape mismatch in elementwise op");
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

struct SymEig {
  std::vector<double> eigenvalues;  // descending
  Matrix eigenvectors;              // orthonormal columns, A = V diag(l) V^T
};

namespace detail {
inline void require_square_symmetric(const Matrix& a, const char* who, double tol = 1e-10) {
  if (a.rows() != a.cols())
    throw NonSymmetric(std::string(who) + ": matrix is not square");
  if (a.max_asymmetry() > tol) {
    std::ostringstream os;
    os << who << ": asymmetry " << a.max_asymmetry() << " exceeds " << tol;
    throw NonSymmetric(os.str());
  }
}
}  // namespace detail

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Fine for the
/// matrix sizes this project sees (covariances up to a few dozen dims).
inline SymEig sym_eig(const Matrix& a) {
  detail::require_square_symmetric(a, "sym_eig");
  const int n = a.rows();
  Matrix d = a;
  Matrix v = Matrix::identity(n);

  const int max_sweeps = 100;
  double scale = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) scale = std::max(scale, std::abs(d(i, j)));
  if (scale == 0.0) scale = 1.0;

  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off = std::max(off, std::abs(d(p, q)));
    if (off <= 1e-15 * scale) break;

    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = d(p, q);
        if (std::abs(apq) <= 1e-18 * scale) continue;
        double theta = (d(q, q) - d(p, p)) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;

        for (int i = 0; i < n; ++i) {
          double dip = d(i, p), diq = d(i, q);
          d(i, p) = c * dip - s * diq;
          d(i, q) = s * dip + c * diq;
        }
        for (int i = 0; i < n; ++i) {
          double dpi = d(p, i), dqi = d(q, i);
          d(p, i) = c * dpi - s * dqi;
          d(q, i) = s * dpi + c * dqi;
        }
        for (int i = 0; i < n; ++i) {
          double vip = v(i, p), viq = v(i, q);
          v(i, p) = c * vip - s * viq;
          v(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  if (sweep == max_sweeps)
    throw NoConvergenceError("sym_eig: Jacobi sweeps exhausted");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int i, int j) { return d(i, i) > d(j, j); });

  SymEig out;
  out.eigenvalues.resize(n);
  out.eigenvectors = Matrix(n, n);
  for (int j = 0; j < n; ++j) {
    out.eigenvalues[j] = d(order[j], order[j]);
    for (int i = 0; i < n; ++i) out.eigenvectors(i, j) = v(i, order[j]);
  }
  return out;
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues in [-1e-10, 0] are treated as round-off and clamped to zero.
inline Matrix sqrtm_psd(const Matrix& a) {
  detail::require_square_symmetric(a, "sqrtm_psd");
  SymEig eig = sym_eig(a);
  const int n = a.rows();
  double min_eig = eig.eigenvalues.empty() ? 0.0 : eig.eigenvalues.back();
  if (min_eig < -1e-6) {
    std::ostringstream os;
    os << "sqrtm_psd: matrix is indefinite (min eigenvalue " << min_eig << ")";
    throw IndefiniteInput(os.str());
  }
  Matrix out(n, n);
  for (int k = 0; k < n; ++k) {
    double lam = std::max(eig.eigenvalues[k], 0.0);
    double r = std::sqrt(lam);
    for (int i = 0; i < n; ++i) {
      double vr = eig.eigenvectors(i, k) * r;
      if (vr == 0.0) continue;
      for (int j = 0; j < n; ++j) out(i, j) += vr * eig.eigenvectors(j, k);
    }
  }
  return out;
}

struct Cholesky {
  Matrix lower;
  double log_det;    // of the (possibly jittered) input
  double jitter;     // epsilon actually added to the diagonal, 0 if none
};

/// Lower Cholesky factor of a symmetric PD matrix. Near-singular inputs get
/// a small diagonal jitter before we give up; tight GMM clusters produce
/// such covariances routinely.
inline Cholesky cholesky(const Matrix& a) {
  detail::require_square_symmetric(a, "cholesky");
  const int n = a.rows();
  static constexpr double kJitters[] = {0.0, 1e-9, 1e-7, 1e-5};
  for (double eps : kJitters) {
    Matrix l(n, n);
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      for (int j = 0; j <= i; ++j) {
        double s = a(i, j) + (i == j ? eps : 0.0);
        for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
        if (i == j) {
          if (s <= 0.0) {
            ok = false;
            break;
          }
          l(i, i) = std::sqrt(s);
        } else {
          l(i, j) = s / l(j, j);
        }
      }
    }
    if (ok) {
      double log_det = 0.0;
      for (int i = 0; i < n; ++i) log_det += std::log(l(i, i));
      return Cholesky{std::move(l), 2.0 * log_det, eps};
    }
  }
  throw NotPositiveDefinite("cholesky: non-positive pivot after jitter ladder");
}

/// Solve L y = b with L lower triangular.
inline std::vector<double> forward_solve(const Matrix& l, const std::vector<double>& b) {
  const int n = l.rows();
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  return y;
}

/// Solve L^T x = y with L lower triangular.
inline std::vector<double> backward_solve(const Matrix& l, const std::vector<double>& y) {
  const int n = l.rows();
  std::vector<double> x(n);
  for (int i = n - 1; i >= 0; --i) {
    double s = y[i];
    for (int k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

/// Inverse of a symmetric PD matrix through its Cholesky factor.
inline Matrix spd_inverse(const Matrix& a) {
  Cholesky ch = cholesky(a);
  const int n = a.rows();
  Matrix inv(n, n);
  std::vector<double> e(n, 0.0);
  for (int j = 0; j < n; ++j) {
    e[j] = 1.0;
    auto col = backward_solve(ch.lower, forward_solve(ch.lower, e));
    for (int i = 0; i < n; ++i) inv(i, j) = col[i];
    e[j] = 0.0;
  }
  // symmetrize away the last bits of round-off
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double v = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = inv(j, i) = v;
    }
  return inv;
}

/// log(sum(exp(v))) with the max-shift trick. All-(-inf) input gives -inf.
inline double logsumexp(const std::vector<double>& v) {
  if (v.empty()) throw EmptyInput("logsumexp: empty input");
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (std::isinf(m) && m < 0) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace decalign::linalg
