#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "osm/matrix.hpp"

namespace osm {

namespace detail {

// LU factorization with partial pivoting, in place over (re, im) planes.
// Returns pivot permutation and sign; throws NumericRangeError on a
// numerically singular pivot.
struct Lu {
  Matrix lu;
  std::vector<int> perm;
  int sign = 1;
};

inline Lu lu_factor(const Matrix& a) {
  require_square(a, "lu_factor");
  const int n = a.rows();
  Lu f{a, std::vector<int>(n), 1};
  std::iota(f.perm.begin(), f.perm.end(), 0);
  Matrix& m = f.lu;
  double scale_ref = one_norm(a);
  if (scale_ref == 0.0) throw NumericRangeError("lu_factor: zero matrix");
  for (int k = 0; k < n; ++k) {
    int piv = k;
    double best = 0.0;
    for (int i = k; i < n; ++i) {
      const double mag = m.is_complex() ? std::hypot(m.re(i, k), m.im(i, k))
                                        : std::fabs(m.re(i, k));
      if (mag > best) {
        best = mag;
        piv = i;
      }
    }
    if (best <= 1e-300 || best < 1e-14 * scale_ref) {
      throw NumericRangeError("lu_factor: matrix is numerically singular");
    }
    if (piv != k) {
      for (int j = 0; j < n; ++j) {
        std::swap(m.re(k, j), m.re(piv, j));
        if (m.is_complex()) std::swap(m.im(k, j), m.im(piv, j));
      }
      std::swap(f.perm[k], f.perm[piv]);
      f.sign = -f.sign;
    }
    const Matrix& mc = m;  // const view: im() reads are 0 on real matrices
    const double pr = mc.re(k, k), pi = mc.im(k, k);
    const double pmag2 = pr * pr + pi * pi;
    for (int i = k + 1; i < n; ++i) {
      // multiplier = m[i][k] / pivot
      double lr, li = 0.0;
      if (m.is_complex()) {
        lr = (m.re(i, k) * pr + m.im(i, k) * pi) / pmag2;
        li = (m.im(i, k) * pr - m.re(i, k) * pi) / pmag2;
        m.re(i, k) = lr;
        m.im(i, k) = li;
      } else {
        lr = m.re(i, k) / pr;
        m.re(i, k) = lr;
      }
      for (int j = k + 1; j < n; ++j) {
        if (m.is_complex()) {
          m.re(i, j) -= lr * m.re(k, j) - li * m.im(k, j);
          m.im(i, j) -= lr * m.im(k, j) + li * m.re(k, j);
        } else {
          m.re(i, j) -= lr * m.re(k, j);
        }
      }
    }
  }
  return f;
}

}  // namespace detail

// Solves a x = b for x (b may have multiple columns).
inline Matrix solve(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.field() != b.field()) {
    throw InvalidInputError("solve: shape/field mismatch");
  }
  detail::Lu f = detail::lu_factor(a);
  const int n = a.rows(), nrhs = b.cols();
  Matrix x(n, nrhs, a.field());
  // apply permutation
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < nrhs; ++j) {
      x.re(i, j) = b.re(f.perm[i], j);
      if (x.is_complex()) x.im(i, j) = b.im(f.perm[i], j);
    }
  }
  const Matrix& m = f.lu;
  const Matrix& xc = x;  // const view for imaginary reads on real matrices
  // forward substitution with unit lower triangle
  for (int i = 1; i < n; ++i) {
    for (int k = 0; k < i; ++k) {
      const double lr = m.re(i, k), li = m.im(i, k);
      if (lr == 0.0 && li == 0.0) continue;
      for (int j = 0; j < nrhs; ++j) {
        const double xr = xc.re(k, j), xi = xc.im(k, j);
        x.re(i, j) -= lr * xr - li * xi;
        if (x.is_complex()) x.im(i, j) -= lr * xi + li * xr;
      }
    }
  }
  // back substitution
  for (int i = n - 1; i >= 0; --i) {
    for (int k = i + 1; k < n; ++k) {
      const double ur = m.re(i, k), ui = m.im(i, k);
      if (ur == 0.0 && ui == 0.0) continue;
      for (int j = 0; j < nrhs; ++j) {
        const double xr = xc.re(k, j), xi = xc.im(k, j);
        x.re(i, j) -= ur * xr - ui * xi;
        if (x.is_complex()) x.im(i, j) -= ur * xi + ui * xr;
      }
    }
    const double pr = m.re(i, i), pi = m.im(i, i);
    const double pmag2 = pr * pr + pi * pi;
    for (int j = 0; j < nrhs; ++j) {
      if (x.is_complex()) {
        const double xr = x.re(i, j), xi = x.im(i, j);
        x.re(i, j) = (xr * pr + xi * pi) / pmag2;
        x.im(i, j) = (xi * pr - xr * pi) / pmag2;
      } else {
        x.re(i, j) /= pr;
      }
    }
  }
  return x;
}

// Determinant of a real matrix via LU. Throws on singular input.
inline double det_real(const Matrix& a) {
  if (a.is_complex()) throw InvalidInputError("det_real: real matrices only");
  detail::Lu f = detail::lu_factor(a);
  double d = f.sign;
  for (int i = 0; i < a.rows(); ++i) d *= f.lu.re(i, i);
  return d;
}

struct Svd {
  Matrix u;                    // m x n, columns orthonormal where sigma > 0
  std::vector<double> sigma;   // descending
  Matrix v;                    // n x n orthogonal
};

// One-sided Jacobi SVD of a real matrix with rows >= cols. Columns of the
// working copy are orthogonalized pairwise; sweeps repeat until every pair is
// numerically orthogonal. Left vectors for zero singular values are left as
// zero columns; callers that need a full U must check sigma first.
inline Svd jacobi_svd_tall(const Matrix& a) {
  if (a.is_complex()) throw InvalidInputError("jacobi_svd_tall: real input only");
  if (a.rows() < a.cols()) throw InvalidInputError("jacobi_svd_tall: needs rows >= cols");
  const int m = a.rows(), n = a.cols();
  Matrix w = a;
  Matrix v = Matrix::identity(n, Field::Real);
  const double eps = 1e-15;
  const int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool converged = true;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int i = 0; i < m; ++i) {
          const double wp = w.re(i, p), wq = w.re(i, q);
          alpha += wp * wp;
          beta += wq * wq;
          gamma += wp * wq;
        }
        if (std::fabs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int i = 0; i < m; ++i) {
          const double wp = w.re(i, p), wq = w.re(i, q);
          w.re(i, p) = c * wp - s * wq;
          w.re(i, q) = s * wp + c * wq;
        }
        for (int i = 0; i < n; ++i) {
          const double vp = v.re(i, p), vq = v.re(i, q);
          v.re(i, p) = c * vp - s * vq;
          v.re(i, q) = s * vp + c * vq;
        }
      }
    }
    if (converged) break;
    if (sweep == max_sweeps - 1) {
      throw NumericRangeError("jacobi_svd_tall: no convergence");
    }
  }
  Svd out{Matrix(m, n, Field::Real), std::vector<double>(n, 0.0),
          Matrix::identity(n, Field::Real)};
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> norms(n);
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += w.re(i, j) * w.re(i, j);
    norms[j] = std::sqrt(s);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return norms[x] > norms[y]; });
  for (int j = 0; j < n; ++j) {
    const int src = order[j];
    out.sigma[j] = norms[src];
    if (norms[src] > 0.0) {
      for (int i = 0; i < m; ++i) out.u.re(i, j) = w.re(i, src) / norms[src];
    }
    for (int i = 0; i < n; ++i) out.v.re(i, j) = v.re(i, src);
  }
  return out;
}

// SVD of an arbitrary real matrix; transposes internally when rows < cols.
inline Svd svd(const Matrix& a) {
  if (a.rows() >= a.cols()) return jacobi_svd_tall(a);
  Svd t = jacobi_svd_tall(adjoint(a));  // a^T = U S V^T  =>  a = V S U^T
  return Svd{t.v, t.sigma, t.u};
}

namespace detail {

// [[re, -im], [im, re]] block embedding; commutes with products and adjoints.
inline Matrix embed_complex(const Matrix& a) {
  const int m = a.rows(), n = a.cols();
  Matrix e(2 * m, 2 * n, Field::Real);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      e.re(i, j) = a.re(i, j);
      e.re(i + m, j + n) = a.re(i, j);
      e.re(i, j + n) = -a.im(i, j);
      e.re(i + m, j) = a.im(i, j);
    }
  }
  return e;
}

inline Matrix unembed_complex(const Matrix& e) {
  const int m = e.rows() / 2, n = e.cols() / 2;
  Matrix a(m, n, Field::Complex);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      a.re(i, j) = 0.5 * (e.re(i, j) + e.re(i + m, j + n));
      a.im(i, j) = 0.5 * (e.re(i + m, j) - e.re(i, j + n));
    }
  }
  return a;
}

}  // namespace detail

// Nearest orthogonal/unitary matrix: the polar factor U V^T from the SVD.
// Complex inputs go through the 2d x 2d real embedding, whose polar factor is
// the embedding of the complex polar factor. Throws on rank-deficient input.
inline Matrix reproject_orthogonal(const Matrix& x) {
  require_square(x, "reproject_orthogonal");
  require_finite(x, "reproject_orthogonal");
  if (x.is_complex()) {
    return detail::unembed_complex(reproject_orthogonal(detail::embed_complex(x)));
  }
  Svd f = jacobi_svd_tall(x);
  const double smax = f.sigma.front();
  const double smin = f.sigma.back();
  if (smax <= 0.0 || smin < 1e-13 * smax) {
    throw NumericRangeError("reproject_orthogonal: rank-deficient input");
  }
  return matmul(f.u, adjoint(f.v));
}

}  // namespace osm
