#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace osm {

// Rejected input: shape/field mismatch, out-of-vocabulary ids, malformed files.
struct InvalidInputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Numeric failure: overflow past the scaling budget, singular solves,
// rank-deficient projections, non-finite values.
struct NumericRangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Field { Real, Complex };

// Dense row-major matrix over R or C. Complex values are stored as separate
// real/imaginary planes so every kernel runs on plain doubles and Re-trace
// inner products fall out of elementwise sums.
//
// Values are immutable in practice once built by an operation; all free
// functions below are pure and safe to call from multiple threads.
class Matrix {
 public:
  Matrix(int rows, int cols, Field field)
      : rows_(rows), cols_(cols), field_(field) {
    if (rows <= 0 || cols <= 0) {
      throw InvalidInputError("Matrix: dimensions must be positive, got " +
                              std::to_string(rows) + "x" + std::to_string(cols));
    }
    re_.assign(static_cast<size_t>(rows) * cols, 0.0);
    if (field_ == Field::Complex) {
      im_.assign(static_cast<size_t>(rows) * cols, 0.0);
    }
  }

  static Matrix identity(int d, Field field = Field::Real) {
    Matrix m(d, d, field);
    for (int i = 0; i < d; ++i) m.re(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  Field field() const { return field_; }
  bool is_complex() const { return field_ == Field::Complex; }
  bool is_square() const { return rows_ == cols_; }
  size_t size() const { return re_.size(); }

  double& re(int i, int j) { return re_[idx(i, j)]; }
  double re(int i, int j) const { return re_[idx(i, j)]; }

  double& im(int i, int j) {
    assert(is_complex());
    return im_[idx(i, j)];
  }
  // Imaginary part, defined as 0 for real matrices.
  double im(int i, int j) const { return is_complex() ? im_[idx(i, j)] : 0.0; }

  std::vector<double>& re_data() { return re_; }
  const std::vector<double>& re_data() const { return re_; }
  std::vector<double>& im_data() { return im_; }
  const std::vector<double>& im_data() const { return im_; }

  bool same_shape(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && field_ == o.field_;
  }

 private:
  size_t idx(int i, int j) const {
    assert(i >= 0 && i < rows_ && j >= 0 && j < cols_);
    return static_cast<size_t>(i) * cols_ + j;
  }

  int rows_;
  int cols_;
  Field field_;
  std::vector<double> re_;
  std::vector<double> im_;  // empty for Field::Real
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw InvalidInputError(std::string(op) + ": shape/field mismatch (" +
                            std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                            " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
  }
}

inline void require_square(const Matrix& a, const char* op) {
  if (!a.is_square()) {
    throw InvalidInputError(std::string(op) + ": matrix must be square, got " +
                            std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
  }
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix c = a;
  for (size_t k = 0; k < c.re_data().size(); ++k) c.re_data()[k] += b.re_data()[k];
  for (size_t k = 0; k < c.im_data().size(); ++k) c.im_data()[k] += b.im_data()[k];
  return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix c = a;
  for (size_t k = 0; k < c.re_data().size(); ++k) c.re_data()[k] -= b.re_data()[k];
  for (size_t k = 0; k < c.im_data().size(); ++k) c.im_data()[k] -= b.im_data()[k];
  return c;
}

inline Matrix scale(const Matrix& a, double c) {
  Matrix out = a;
  for (double& v : out.re_data()) v *= c;
  for (double& v : out.im_data()) v *= c;
  return out;
}

// In-place y += alpha * x.
inline void axpy(Matrix& y, double alpha, const Matrix& x) {
  require_same_shape(y, x, "axpy");
  for (size_t k = 0; k < y.re_data().size(); ++k) y.re_data()[k] += alpha * x.re_data()[k];
  for (size_t k = 0; k < y.im_data().size(); ++k) y.im_data()[k] += alpha * x.im_data()[k];
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows() || a.field() != b.field()) {
    throw InvalidInputError("matmul: inner dimensions/field mismatch (" +
                            std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                            " * " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
  }
  const int m = a.rows(), n = b.cols(), kk = a.cols();
  Matrix c(m, n, a.field());
  if (!a.is_complex()) {
    const double* ap = a.re_data().data();
    const double* bp = b.re_data().data();
    double* cp = c.re_data().data();
    for (int i = 0; i < m; ++i) {
      for (int k = 0; k < kk; ++k) {
        const double aik = ap[static_cast<size_t>(i) * kk + k];
        if (aik == 0.0) continue;
        const double* brow = bp + static_cast<size_t>(k) * n;
        double* crow = cp + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      for (int k = 0; k < kk; ++k) {
        const double ar = a.re(i, k), ai = a.im(i, k);
        if (ar == 0.0 && ai == 0.0) continue;
        for (int j = 0; j < n; ++j) {
          const double br = b.re(k, j), bi = b.im(k, j);
          c.re(i, j) += ar * br - ai * bi;
          c.im(i, j) += ar * bi + ai * br;
        }
      }
    }
  }
  return c;
}

// Conjugate transpose (plain transpose over R).
inline Matrix adjoint(const Matrix& a) {
  Matrix c(a.cols(), a.rows(), a.field());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < a.cols(); ++j) {
      c.re(j, i) = a.re(i, j);
      if (a.is_complex()) c.im(j, i) = -a.im(i, j);
    }
  }
  return c;
}

inline double trace_re(const Matrix& a) {
  require_square(a, "trace_re");
  double t = 0.0;
  for (int i = 0; i < a.rows(); ++i) t += a.re(i, i);
  return t;
}

// Re tr(a* b) without forming the product. Unchecked shape-agnostic kernel;
// the public entry point below enforces the square/equal-shape contract.
inline double re_inner_unchecked(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (size_t k = 0; k < a.re_data().size(); ++k) s += a.re_data()[k] * b.re_data()[k];
  for (size_t k = 0; k < a.im_data().size(); ++k) s += a.im_data()[k] * b.im_data()[k];
  return s;
}

inline double trace_re_inner(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "trace_re_inner");
  require_square(a, "trace_re_inner");
  return re_inner_unchecked(a, b);
}

inline double fro_norm(const Matrix& a) {
  return std::sqrt(re_inner_unchecked(a, a));
}

// Induced 1-norm: max column sum of entry moduli.
inline double one_norm(const Matrix& a) {
  double best = 0.0;
  for (int j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (int i = 0; i < a.rows(); ++i) {
      s += a.is_complex() ? std::hypot(a.re(i, j), a.im(i, j)) : std::fabs(a.re(i, j));
    }
    best = std::max(best, s);
  }
  return best;
}

inline double max_abs(const Matrix& a) {
  double best = 0.0;
  for (double v : a.re_data()) best = std::max(best, std::fabs(v));
  for (double v : a.im_data()) best = std::max(best, std::fabs(v));
  return best;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double best = 0.0;
  for (size_t k = 0; k < a.re_data().size(); ++k)
    best = std::max(best, std::fabs(a.re_data()[k] - b.re_data()[k]));
  for (size_t k = 0; k < a.im_data().size(); ++k)
    best = std::max(best, std::fabs(a.im_data()[k] - b.im_data()[k]));
  return best;
}

inline bool is_finite(const Matrix& a) {
  for (double v : a.re_data())
    if (!std::isfinite(v)) return false;
  for (double v : a.im_data())
    if (!std::isfinite(v)) return false;
  return true;
}

inline void require_finite(const Matrix& a, const char* what) {
  if (!is_finite(a)) {
    throw NumericRangeError(std::string(what) + ": non-finite entries");
  }
}

// (x - x^T)/2. The result satisfies S^T = -S exactly by construction.
inline Matrix skew_real(const Matrix& x) {
  require_square(x, "skew_real");
  if (x.is_complex()) throw InvalidInputError("skew_real: expects a real matrix");
  const int d = x.rows();
  Matrix s(d, d, Field::Real);
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      const double v = 0.5 * (x.re(i, j) - x.re(j, i));
      s.re(i, j) = v;
      s.re(j, i) = -v;
    }
  }
  return s;
}

// (x - x*)/2. The result satisfies A* = -A exactly.
inline Matrix skew_hermitian(const Matrix& x) {
  require_square(x, "skew_hermitian");
  if (!x.is_complex()) throw InvalidInputError("skew_hermitian: expects a complex matrix");
  const int d = x.rows();
  Matrix s(d, d, Field::Complex);
  for (int i = 0; i < d; ++i) {
    s.im(i, i) = x.im(i, i);  // real diagonal part drops out
    for (int j = i + 1; j < d; ++j) {
      const double vr = 0.5 * (x.re(i, j) - x.re(j, i));
      const double vi = 0.5 * (x.im(i, j) + x.im(j, i));
      s.re(i, j) = vr;
      s.im(i, j) = vi;
      s.re(j, i) = -vr;
      s.im(j, i) = vi;
    }
  }
  return s;
}

// x - tr(x)/d * I.
inline Matrix traceless(const Matrix& x) {
  require_square(x, "traceless");
  const int d = x.rows();
  Matrix c = x;
  double tr_re = 0.0, tr_im = 0.0;
  for (int i = 0; i < d; ++i) {
    tr_re += x.re(i, i);
    tr_im += x.im(i, i);
  }
  for (int i = 0; i < d; ++i) {
    c.re(i, i) -= tr_re / d;
    if (c.is_complex()) c.im(i, i) -= tr_im / d;
  }
  return c;
}

// Elementwise product. Real matrices only; used on coordinate vectors.
inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  if (a.is_complex()) throw InvalidInputError("hadamard: real matrices only");
  Matrix c = a;
  for (size_t k = 0; k < c.re_data().size(); ++k) c.re_data()[k] *= b.re_data()[k];
  return c;
}

inline void require_real_column(const Matrix& v, const char* what) {
  if (v.cols() != 1 || v.is_complex()) {
    throw InvalidInputError(std::string(what) + ": needs a real column vector");
  }
}

// Max-shifted softmax of a real column. Shared by the graph engine and the
// plain rollout path so the two stay bit-identical.
inline Matrix softmax_column(const Matrix& v) {
  require_real_column(v, "softmax_column");
  Matrix out(v.rows(), 1, Field::Real);
  double m = v.re(0, 0);
  for (int i = 1; i < v.rows(); ++i) m = std::max(m, v.re(i, 0));
  double z = 0.0;
  for (int i = 0; i < v.rows(); ++i) {
    const double e = std::exp(v.re(i, 0) - m);
    out.re(i, 0) = e;
    z += e;
  }
  for (int i = 0; i < v.rows(); ++i) out.re(i, 0) /= z;
  return out;
}

// Max-shifted log(sum(exp(v_i))) of a real column.
inline double log_sum_exp_column(const Matrix& v) {
  require_real_column(v, "log_sum_exp_column");
  double m = v.re(0, 0);
  for (int i = 1; i < v.rows(); ++i) m = std::max(m, v.re(i, 0));
  double z = 0.0;
  for (int i = 0; i < v.rows(); ++i) z += std::exp(v.re(i, 0) - m);
  return m + std::log(z);
}

// w-weighted sum of equally shaped matrices, accumulated in index order.
inline Matrix weighted_sum(const Matrix& w, const std::vector<const Matrix*>& mats) {
  require_real_column(w, "weighted_sum");
  if (mats.empty() || static_cast<size_t>(w.rows()) != mats.size()) {
    throw InvalidInputError("weighted_sum: weight count must match matrix count");
  }
  Matrix acc = scale(*mats[0], w.re(0, 0));
  for (size_t k = 1; k < mats.size(); ++k) {
    require_same_shape(acc, *mats[k], "weighted_sum");
    axpy(acc, w.re(static_cast<int>(k), 0), *mats[k]);
  }
  return acc;
}

}  // namespace osm
