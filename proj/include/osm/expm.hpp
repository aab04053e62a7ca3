#pragma once

#include <cmath>

#include "osm/linalg.hpp"
#include "osm/matrix.hpp"

namespace osm {

namespace detail {

// Squaring count so that the scaled argument has 1-norm <= 1/2, where the
// order-12 Taylor tail is below 3e-14.
inline int expm_squarings(double nrm) {
  if (nrm == 0.0) return 0;
  const int s = static_cast<int>(std::ceil(std::log2(nrm))) + 1;
  return s < 0 ? 0 : s;
}

constexpr int kExpmTaylorOrder = 12;
constexpr int kExpmMaxSquarings = 64;

}  // namespace detail

// Matrix exponential by scaling and squaring with an order-12 Taylor
// polynomial evaluated in Horner form: P = I + (X P)/k for k = 12..1.
// Built entirely from add/scale/matmul so the same recipe can be replayed
// node-by-node on an autodiff tape.
inline Matrix expm(const Matrix& a) {
  require_square(a, "expm");
  require_finite(a, "expm");
  const double nrm = one_norm(a);
  if (!std::isfinite(nrm)) throw NumericRangeError("expm: non-finite norm");
  const int s = detail::expm_squarings(nrm);
  if (s > detail::kExpmMaxSquarings) {
    throw NumericRangeError("expm: argument norm too large to scale down");
  }
  const Matrix x = scale(a, std::ldexp(1.0, -s));
  const Matrix eye = Matrix::identity(a.rows(), a.field());
  Matrix p = eye;
  for (int k = detail::kExpmTaylorOrder; k >= 1; --k) {
    p = add(eye, scale(matmul(x, p), 1.0 / k));
  }
  for (int i = 0; i < s; ++i) p = matmul(p, p);
  return p;
}

// Cayley transform (I - a/2)^{-1} (I + a/2); maps tangents into the group
// without any series truncation. Throws when I - a/2 is singular.
inline Matrix cayley(const Matrix& a) {
  require_square(a, "cayley");
  require_finite(a, "cayley");
  const Matrix eye = Matrix::identity(a.rows(), a.field());
  const Matrix half = scale(a, 0.5);
  return solve(sub(eye, half), add(eye, half));
}

}  // namespace osm
