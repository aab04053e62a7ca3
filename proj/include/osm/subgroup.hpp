#pragma once

#include <cctype>
#include <string>
#include <vector>

#include "osm/expm.hpp"
#include "osm/matrix.hpp"
#include "osm/rng.hpp"

namespace osm {

enum class SubgroupFamily { U, SU, O, SO, Torus };

inline const char* family_name(SubgroupFamily f) {
  switch (f) {
    case SubgroupFamily::U: return "U";
    case SubgroupFamily::SU: return "SU";
    case SubgroupFamily::O: return "O";
    case SubgroupFamily::SO: return "SO";
    case SubgroupFamily::Torus: return "T";
  }
  return "?";
}

inline SubgroupFamily parse_family(const std::string& s) {
  std::string t;
  for (char c : s) t.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (t == "U") return SubgroupFamily::U;
  if (t == "SU") return SubgroupFamily::SU;
  if (t == "O") return SubgroupFamily::O;
  if (t == "SO") return SubgroupFamily::SO;
  if (t == "T" || t == "TORUS") return SubgroupFamily::Torus;
  throw InvalidInputError("unknown subgroup family '" + s + "' (expected U, SU, O, SO, T)");
}

// A concrete subgroup: family plus carrier size d (the torus uses d diagonal
// phases inside U(d)). Group elements are d x d matrices over field().
struct SubgroupSpec {
  SubgroupFamily family = SubgroupFamily::SO;
  int d = 1;

  Field field() const {
    return (family == SubgroupFamily::O || family == SubgroupFamily::SO)
               ? Field::Real
               : Field::Complex;
  }

  // Dimension of the tangent space at the identity; equals the length of
  // vec_g coordinates.
  int algebra_dim() const {
    switch (family) {
      case SubgroupFamily::U: return d * d;
      case SubgroupFamily::SU: return d * d - 1;
      case SubgroupFamily::O:
      case SubgroupFamily::SO: return d * (d - 1) / 2;
      case SubgroupFamily::Torus: return d;
    }
    return 0;
  }

  std::string name() const { return std::string(family_name(family)) + "(" + std::to_string(d) + ")"; }

  bool operator==(const SubgroupSpec& o) const { return family == o.family && d == o.d; }

  void validate() const {
    if (d < 1) throw InvalidInputError("subgroup carrier size must be >= 1");
  }
};

// Orthogonal projection of an arbitrary square matrix onto the tangent space
// (Lie algebra) of the subgroup, w.r.t. the Re-trace inner product:
//   U(d):  (y - y*)/2          SU(d): traceless((y - y*)/2)
//   O/SO:  (y - y^T)/2         T^k:   imaginary diagonal part
inline Matrix project_tangent(const SubgroupSpec& g, const Matrix& y) {
  require_square(y, "project_tangent");
  if (y.rows() != g.d) {
    throw InvalidInputError("project_tangent: expected " + std::to_string(g.d) +
                            "x" + std::to_string(g.d) + " input");
  }
  if (y.field() != g.field()) {
    throw InvalidInputError("project_tangent: field mismatch for " + g.name());
  }
  switch (g.family) {
    case SubgroupFamily::U: return skew_hermitian(y);
    case SubgroupFamily::SU: return traceless(skew_hermitian(y));
    case SubgroupFamily::O:
    case SubgroupFamily::SO: return skew_real(y);
    case SubgroupFamily::Torus: {
      Matrix a(g.d, g.d, Field::Complex);
      for (int t = 0; t < g.d; ++t) a.im(t, t) = y.im(t, t);
      return a;
    }
  }
  throw InvalidInputError("project_tangent: bad family");
}

inline bool is_tangent(const SubgroupSpec& g, const Matrix& y, double rel_tol = 1e-9) {
  const Matrix p = project_tangent(g, y);
  const double ref = fro_norm(y);
  return fro_norm(sub(p, y)) <= rel_tol * (ref > 1.0 ? ref : 1.0);
}

// Deviation from the group: ||M* M - I||_F. Zero (to roundoff) on elements.
inline double group_defect(const Matrix& m) {
  require_square(m, "group_defect");
  return fro_norm(sub(matmul(adjoint(m), m), Matrix::identity(m.rows(), m.field())));
}

struct TangentCoords {
  SubgroupSpec spec;
  std::vector<double> values;
};

// Coordinates of a tangent matrix in the fixed basis below. Layouts:
//   so(d):  strictly upper triangle, row-major: c_k = A[i][j] for i < j
//   u(d):   d diagonal imaginary parts, then row-major (re, im) pairs of the
//           strictly upper triangle
//   su(d):  first d-1 diagonal imaginary parts (the last is -sum of the rest),
//           then the same off-diagonal pairs as u(d)
//   t^k:    the k diagonal imaginary parts
// Rejects inputs that are not tangent within a 1e-9 relative tolerance.
inline TangentCoords vec_g(const SubgroupSpec& g, const Matrix& a) {
  if (!is_tangent(g, a)) {
    throw InvalidInputError("vec_g: input is not in the tangent space of " + g.name());
  }
  TangentCoords out{g, std::vector<double>()};
  out.values.reserve(g.algebra_dim());
  const int d = g.d;
  switch (g.family) {
    case SubgroupFamily::O:
    case SubgroupFamily::SO:
      for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) out.values.push_back(a.re(i, j));
      break;
    case SubgroupFamily::U:
    case SubgroupFamily::SU: {
      const int ndiag = (g.family == SubgroupFamily::U) ? d : d - 1;
      for (int t = 0; t < ndiag; ++t) out.values.push_back(a.im(t, t));
      for (int i = 0; i < d; ++i) {
        for (int j = i + 1; j < d; ++j) {
          out.values.push_back(a.re(i, j));
          out.values.push_back(a.im(i, j));
        }
      }
      break;
    }
    case SubgroupFamily::Torus:
      for (int t = 0; t < d; ++t) out.values.push_back(a.im(t, t));
      break;
  }
  return out;
}

// Inverse of vec_g: rebuilds the tangent matrix from coordinates. Exactly
// tangent by construction.
inline Matrix vec_g_inv(const SubgroupSpec& g, const std::vector<double>& c) {
  if (static_cast<int>(c.size()) != g.algebra_dim()) {
    throw InvalidInputError("vec_g_inv: expected " + std::to_string(g.algebra_dim()) +
                            " coordinates for " + g.name() + ", got " +
                            std::to_string(c.size()));
  }
  const int d = g.d;
  Matrix a(d, d, g.field());
  size_t k = 0;
  switch (g.family) {
    case SubgroupFamily::O:
    case SubgroupFamily::SO:
      for (int i = 0; i < d; ++i) {
        for (int j = i + 1; j < d; ++j) {
          a.re(i, j) = c[k];
          a.re(j, i) = -c[k];
          ++k;
        }
      }
      break;
    case SubgroupFamily::U:
    case SubgroupFamily::SU: {
      const int ndiag = (g.family == SubgroupFamily::U) ? d : d - 1;
      double diag_sum = 0.0;
      for (int t = 0; t < ndiag; ++t) {
        a.im(t, t) = c[k];
        diag_sum += c[k];
        ++k;
      }
      if (g.family == SubgroupFamily::SU) a.im(d - 1, d - 1) = -diag_sum;
      for (int i = 0; i < d; ++i) {
        for (int j = i + 1; j < d; ++j) {
          const double x = c[k++];
          const double y = c[k++];
          a.re(i, j) = x;
          a.im(i, j) = y;
          a.re(j, i) = -x;
          a.im(j, i) = y;
        }
      }
      break;
    }
    case SubgroupFamily::Torus:
      for (int t = 0; t < d; ++t) a.im(t, t) = c[k++];
      break;
  }
  return a;
}

inline Matrix vec_g_inv(const TangentCoords& tc) { return vec_g_inv(tc.spec, tc.values); }

// Basis element e_k of the tangent space (unit coordinate vector through
// vec_g_inv). Used to assemble readout differentials column by column.
inline Matrix algebra_basis_element(const SubgroupSpec& g, int k) {
  std::vector<double> c(static_cast<size_t>(g.algebra_dim()), 0.0);
  if (k < 0 || k >= g.algebra_dim()) throw InvalidInputError("algebra_basis_element: index out of range");
  c[static_cast<size_t>(k)] = 1.0;
  return vec_g_inv(g, c);
}

// Raw per-token parameters. B generates the update/embedding element, C the
// readout prototype. For matrix families both are d x d over the carrier
// field; for the torus they are length-d real coordinate vectors. eta and xi
// select the reflected component for O(d) (left-multiply by diag(-1,1,...,1));
// both stay 0 by default.
struct TokenParams {
  Matrix B;
  Matrix C;
  int eta = 0;
  int xi = 0;
};

enum class TokenSlot { Embedding, Prototype };

inline Matrix reflection_factor(int d) {
  Matrix f = Matrix::identity(d, Field::Real);
  f.re(0, 0) = -1.0;
  return f;
}

// Draws B then C i.i.d. Gaussian with std 0.2/sqrt(d).
inline TokenParams make_token_params(const SubgroupSpec& g, Rng& rng) {
  g.validate();
  const double stddev = 0.2 / std::sqrt(static_cast<double>(g.d));
  if (g.family == SubgroupFamily::Torus) {
    Matrix b = random_gaussian(g.d, 1, Field::Real, rng, stddev);
    Matrix c = random_gaussian(g.d, 1, Field::Real, rng, stddev);
    return TokenParams{std::move(b), std::move(c), 0, 0};
  }
  Matrix b = random_gaussian(g.d, g.d, g.field(), rng, stddev);
  Matrix c = random_gaussian(g.d, g.d, g.field(), rng, stddev);
  return TokenParams{std::move(b), std::move(c), 0, 0};
}

// Materializes the group element for one slot: Exp of the projected raw
// parameter, optionally hit with the O(d) reflection factor.
inline Matrix token_to_group(const SubgroupSpec& g, const TokenParams& tp, TokenSlot slot) {
  const Matrix& raw = (slot == TokenSlot::Embedding) ? tp.B : tp.C;
  const int flip = (slot == TokenSlot::Embedding) ? tp.eta : tp.xi;
  Matrix m = (g.family == SubgroupFamily::Torus)
                 ? expm(vec_g_inv(g, raw.re_data()))
                 : expm(project_tangent(g, raw));
  if (flip != 0) {
    if (g.family != SubgroupFamily::O) {
      throw InvalidInputError("token_to_group: reflection exponents only apply to O(d)");
    }
    m = matmul(reflection_factor(g.d), m);
  }
  return m;
}

}  // namespace osm
