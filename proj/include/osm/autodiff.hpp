#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "osm/expm.hpp"
#include "osm/linalg.hpp"
#include "osm/matrix.hpp"
#include "osm/rng.hpp"
#include "osm/subgroup.hpp"

namespace osm {

// Reverse-mode autodiff on an append-only, single-use tape. Nodes hold
// Matrix values; scalars are 1x1 real matrices and coordinate vectors are
// n x 1. Gradients of complex tensors follow the convention
//   grad(X) = dL/dRe(X) + i * dL/dIm(X),
// i.e. accumulation happens against the Re-trace inner product
// <G, dX> = sum(G_re * dX_re + G_im * dX_im), so finite differences on a
// single real coordinate match the corresponding plane of the gradient.
//
// backward() walks node ids in descending order and accumulates input
// gradients in operand order, so gradient bytes are a pure function of the
// recorded graph.

enum class Op : int {
  Leaf = 0,
  Add,             // n-ary elementwise sum
  Scale,           // by a compile-time constant (aux.scalar)
  Matmul,
  Adjoint,
  TraceReInner,    // Re tr(a* b) -> 1x1
  Hadamard,        // real elementwise product
  ProjectTangent,  // aux.spec
  VecG,            // tangent matrix -> n_g x 1 coords (aux.spec)
  VecGInv,         // n_g x 1 coords -> tangent matrix (aux.spec)
  Softmax,         // real n x 1 -> simplex weights
  LogSumExp,       // real n x 1 -> 1x1
  Gather,          // pick one entry of a real n x 1 (aux.index) -> 1x1
  Stack,           // n scalars -> n x 1
  ScaleByScalar,   // (1x1 real s, M) -> s * M
  ExpScalar,       // 1x1 real -> 1x1, e^s
  ConvexCombine,   // (n x 1 real weights, M_1..M_n) -> sum w_j M_j
  Solve,           // (A, B) -> A^{-1} B
  Reproject,       // nearest group element; gradient passes through
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

using GradMap = std::map<int, Matrix>;

class Tape {
 public:
  struct NodeAux {
    double scalar = 0.0;
    int index = -1;
    SubgroupSpec spec{};
    bool has_spec = false;
  };

  struct Node {
    Op op;
    std::vector<int> inputs;
    Matrix value;
    NodeAux aux;
  };

  // Raw entry point: validates operands, runs the forward kernel, appends the
  // node. Unknown op ids are rejected here.
  Var record(Op op, const std::vector<Var>& inputs) { return record(op, inputs, NodeAux{}); }

  Var record(Op op, const std::vector<Var>& inputs, NodeAux aux) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
        throw InvalidInputError("Tape::record: input var is not on this tape");
      }
      ids.push_back(v.id);
    }
    Matrix value = forward(op, ids, aux);
    nodes_.push_back(Node{op, std::move(ids), std::move(value), aux});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Tracked input: receives a gradient entry from backward().
  Var leaf(const Matrix& v) {
    Var out = record_leaf(v);
    leaf_ids_.push_back(out.id);
    return out;
  }

  // Untracked input (no gradient reported).
  Var constant(const Matrix& v) { return record_leaf(v); }

  Var identity_const(int d, Field f) {
    const auto key = std::make_pair(d, f == Field::Complex ? 1 : 0);
    auto it = identity_cache_.find(key);
    if (it != identity_cache_.end()) return Var{it->second};
    Var v = constant(Matrix::identity(d, f));
    identity_cache_.emplace(key, v.id);
    return v;
  }

  Var scalar_const(double x) {
    Matrix m(1, 1, Field::Real);
    m.re(0, 0) = x;
    return constant(m);
  }

  Var add(const std::vector<Var>& xs) { return record(Op::Add, xs); }
  Var add(Var a, Var b) { return record(Op::Add, {a, b}); }
  Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }
  Var scale(Var a, double c) {
    NodeAux aux;
    aux.scalar = c;
    return record(Op::Scale, {a}, aux);
  }
  Var matmul(Var a, Var b) { return record(Op::Matmul, {a, b}); }
  Var adjoint(Var a) { return record(Op::Adjoint, {a}); }
  Var trace_re_inner(Var a, Var b) { return record(Op::TraceReInner, {a, b}); }
  Var hadamard(Var a, Var b) { return record(Op::Hadamard, {a, b}); }
  Var project_tangent(const SubgroupSpec& g, Var a) {
    NodeAux aux;
    aux.spec = g;
    aux.has_spec = true;
    return record(Op::ProjectTangent, {a}, aux);
  }
  Var vec_g(const SubgroupSpec& g, Var a) {
    NodeAux aux;
    aux.spec = g;
    aux.has_spec = true;
    return record(Op::VecG, {a}, aux);
  }
  Var vec_g_inv(const SubgroupSpec& g, Var a) {
    NodeAux aux;
    aux.spec = g;
    aux.has_spec = true;
    return record(Op::VecGInv, {a}, aux);
  }
  Var softmax(Var a) { return record(Op::Softmax, {a}); }
  Var log_sum_exp(Var a) { return record(Op::LogSumExp, {a}); }
  Var gather(Var a, int index) {
    NodeAux aux;
    aux.index = index;
    return record(Op::Gather, {a}, aux);
  }
  Var stack(const std::vector<Var>& scalars) { return record(Op::Stack, scalars); }
  Var scale_by_scalar(Var s, Var m) { return record(Op::ScaleByScalar, {s, m}); }
  Var exp_scalar(Var s) { return record(Op::ExpScalar, {s}); }
  Var convex_combine(Var weights, const std::vector<Var>& mats) {
    std::vector<Var> in;
    in.reserve(mats.size() + 1);
    in.push_back(weights);
    for (Var m : mats) in.push_back(m);
    return record(Op::ConvexCombine, in);
  }
  Var solve(Var a, Var b) { return record(Op::Solve, {a, b}); }
  Var reproject(Var a) { return record(Op::Reproject, {a}); }

  // Matrix exponential as a subgraph: the same scaling/squaring + order-12
  // Horner recipe as osm::expm, replayed through differentiable primitives.
  // The squaring count is fixed from the input value at record time.
  Var expm(Var a) {
    const Matrix& av = value(a);
    require_square(av, "Tape::expm");
    const double nrm = one_norm(av);
    if (!std::isfinite(nrm)) throw NumericRangeError("Tape::expm: non-finite norm");
    const int s = detail::expm_squarings(nrm);
    if (s > detail::kExpmMaxSquarings) {
      throw NumericRangeError("Tape::expm: argument norm too large to scale down");
    }
    Var x = scale(a, std::ldexp(1.0, -s));
    Var eye = identity_const(av.rows(), av.field());
    Var p = eye;
    for (int k = detail::kExpmTaylorOrder; k >= 1; --k) {
      p = add(eye, scale(matmul(x, p), 1.0 / k));
    }
    for (int i = 0; i < s; ++i) p = matmul(p, p);
    return p;
  }

  // Cayley transform as a subgraph, differentiable through the solve node.
  Var cayley(Var a) {
    const Matrix& av = value(a);
    require_square(av, "Tape::cayley");
    Var eye = identity_const(av.rows(), av.field());
    Var half = scale(a, 0.5);
    return solve(sub(eye, half), add(eye, half));
  }

  const Matrix& value(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
      throw InvalidInputError("Tape::value: var is not on this tape");
    }
    return nodes_[static_cast<size_t>(v.id)].value;
  }

  size_t size() const { return nodes_.size(); }
  const std::vector<int>& leaf_ids() const { return leaf_ids_; }

  // Reverse sweep from a real scalar loss. Returns one gradient per tracked
  // leaf (zeros for leaves the loss does not depend on), keyed by leaf id in
  // ascending order.
  GradMap backward(Var loss) const {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1 || lv.is_complex()) {
      throw InvalidInputError("Tape::backward: loss must be a real scalar node");
    }
    std::vector<std::optional<Matrix>> g(nodes_.size());
    Matrix seed(1, 1, Field::Real);
    seed.re(0, 0) = 1.0;
    g[static_cast<size_t>(loss.id)] = std::move(seed);
    for (int id = loss.id; id >= 0; --id) {
      if (!g[static_cast<size_t>(id)]) continue;
      pull_back(nodes_[static_cast<size_t>(id)], *g[static_cast<size_t>(id)], g);
    }
    GradMap out;
    for (int lid : leaf_ids_) {
      auto& slot = g[static_cast<size_t>(lid)];
      if (slot) {
        out.emplace(lid, std::move(*slot));
      } else {
        const Matrix& v = nodes_[static_cast<size_t>(lid)].value;
        out.emplace(lid, Matrix(v.rows(), v.cols(), v.field()));
      }
    }
    return out;
  }

 private:
  Var record_leaf(const Matrix& v) {
    nodes_.push_back(Node{Op::Leaf, {}, v, NodeAux{}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  static void require_real_vector(const Matrix& m, const char* op) {
    if (m.cols() != 1 || m.is_complex()) {
      throw InvalidInputError(std::string(op) + ": expects a real column vector");
    }
  }

  Matrix forward(Op op, const std::vector<int>& in, const NodeAux& aux) const {
    switch (op) {
      case Op::Leaf:
        throw InvalidInputError("Tape::record: leaves are created via leaf()/constant()");
      case Op::Add: {
        if (in.empty()) throw InvalidInputError("add: needs at least one operand");
        Matrix acc = val(in[0]);
        for (size_t k = 1; k < in.size(); ++k) acc = osm::add(acc, val(in[k]));
        return acc;
      }
      case Op::Scale:
        return osm::scale(val(in[0]), aux.scalar);
      case Op::Matmul:
        return osm::matmul(val(in[0]), val(in[1]));
      case Op::Adjoint:
        return osm::adjoint(val(in[0]));
      case Op::TraceReInner: {
        Matrix out(1, 1, Field::Real);
        out.re(0, 0) = osm::trace_re_inner(val(in[0]), val(in[1]));
        return out;
      }
      case Op::Hadamard:
        return osm::hadamard(val(in[0]), val(in[1]));
      case Op::ProjectTangent:
        if (!aux.has_spec) throw InvalidInputError("project_tangent: missing subgroup spec");
        return osm::project_tangent(aux.spec, val(in[0]));
      case Op::VecG: {
        if (!aux.has_spec) throw InvalidInputError("vec_g: missing subgroup spec");
        const TangentCoords c = osm::vec_g(aux.spec, val(in[0]));
        if (c.values.empty()) throw InvalidInputError("vec_g: empty tangent space");
        Matrix out(static_cast<int>(c.values.size()), 1, Field::Real);
        for (size_t k = 0; k < c.values.size(); ++k) out.re(static_cast<int>(k), 0) = c.values[k];
        return out;
      }
      case Op::VecGInv: {
        if (!aux.has_spec) throw InvalidInputError("vec_g_inv: missing subgroup spec");
        const Matrix& cv = val(in[0]);
        require_real_vector(cv, "vec_g_inv");
        return osm::vec_g_inv(aux.spec, cv.re_data());
      }
      case Op::Softmax: {
        const Matrix& v = val(in[0]);
        require_real_vector(v, "softmax");
        return softmax_column(v);
      }
      case Op::LogSumExp: {
        const Matrix& v = val(in[0]);
        require_real_vector(v, "log_sum_exp");
        Matrix out(1, 1, Field::Real);
        out.re(0, 0) = log_sum_exp_column(v);
        return out;
      }
      case Op::Gather: {
        const Matrix& v = val(in[0]);
        require_real_vector(v, "gather");
        if (aux.index < 0 || aux.index >= v.rows()) {
          throw InvalidInputError("gather: index out of range");
        }
        Matrix out(1, 1, Field::Real);
        out.re(0, 0) = v.re(aux.index, 0);
        return out;
      }
      case Op::Stack: {
        if (in.empty()) throw InvalidInputError("stack: needs at least one scalar");
        Matrix out(static_cast<int>(in.size()), 1, Field::Real);
        for (size_t k = 0; k < in.size(); ++k) {
          const Matrix& s = val(in[k]);
          if (s.rows() != 1 || s.cols() != 1 || s.is_complex()) {
            throw InvalidInputError("stack: operands must be real scalars");
          }
          out.re(static_cast<int>(k), 0) = s.re(0, 0);
        }
        return out;
      }
      case Op::ScaleByScalar: {
        const Matrix& s = val(in[0]);
        if (s.rows() != 1 || s.cols() != 1 || s.is_complex()) {
          throw InvalidInputError("scale_by_scalar: first operand must be a real scalar");
        }
        return osm::scale(val(in[1]), s.re(0, 0));
      }
      case Op::ExpScalar: {
        const Matrix& s = val(in[0]);
        if (s.rows() != 1 || s.cols() != 1 || s.is_complex()) {
          throw InvalidInputError("exp_scalar: operand must be a real scalar");
        }
        Matrix out(1, 1, Field::Real);
        out.re(0, 0) = std::exp(s.re(0, 0));
        return out;
      }
      case Op::ConvexCombine: {
        if (in.size() < 2) throw InvalidInputError("convex_combine: needs weights and matrices");
        const Matrix& w = val(in[0]);
        require_real_vector(w, "convex_combine");
        if (static_cast<size_t>(w.rows()) != in.size() - 1) {
          throw InvalidInputError("convex_combine: weight count must match matrix count");
        }
        std::vector<const Matrix*> mats;
        mats.reserve(in.size() - 1);
        for (size_t k = 1; k < in.size(); ++k) mats.push_back(&val(in[k]));
        return weighted_sum(w, mats);
      }
      case Op::Solve:
        return osm::solve(val(in[0]), val(in[1]));
      case Op::Reproject:
        return osm::reproject_orthogonal(val(in[0]));
    }
    throw InvalidInputError("Tape::record: unknown primitive id " +
                            std::to_string(static_cast<int>(op)));
  }

  static void acc_grad(std::vector<std::optional<Matrix>>& g, int id, const Matrix& delta) {
    auto& slot = g[static_cast<size_t>(id)];
    if (!slot) {
      slot = delta;
      return;
    }
    Matrix& dst = *slot;
    for (size_t k = 0; k < dst.re_data().size(); ++k) dst.re_data()[k] += delta.re_data()[k];
    for (size_t k = 0; k < dst.im_data().size(); ++k) dst.im_data()[k] += delta.im_data()[k];
  }

  void pull_back(const Node& n, const Matrix& G,
                 std::vector<std::optional<Matrix>>& g) const {
    const std::vector<int>& in = n.inputs;
    switch (n.op) {
      case Op::Leaf:
        return;
      case Op::Add:
        for (int id : in) acc_grad(g, id, G);
        return;
      case Op::Scale:
        acc_grad(g, in[0], osm::scale(G, n.aux.scalar));
        return;
      case Op::Matmul:
        acc_grad(g, in[0], osm::matmul(G, osm::adjoint(val(in[1]))));
        acc_grad(g, in[1], osm::matmul(osm::adjoint(val(in[0])), G));
        return;
      case Op::Adjoint:
        acc_grad(g, in[0], osm::adjoint(G));
        return;
      case Op::TraceReInner: {
        const double gs = G.re(0, 0);
        acc_grad(g, in[0], osm::scale(val(in[1]), gs));
        acc_grad(g, in[1], osm::scale(val(in[0]), gs));
        return;
      }
      case Op::Hadamard:
        acc_grad(g, in[0], osm::hadamard(G, val(in[1])));
        acc_grad(g, in[1], osm::hadamard(G, val(in[0])));
        return;
      case Op::ProjectTangent:
        acc_grad(g, in[0], osm::project_tangent(n.aux.spec, G));
        return;
      case Op::VecG: {
        const SubgroupSpec& spec = n.aux.spec;
        const int d = spec.d;
        Matrix da(d, d, spec.field());
        int k = 0;
        switch (spec.family) {
          case SubgroupFamily::O:
          case SubgroupFamily::SO:
            for (int i = 0; i < d; ++i)
              for (int j = i + 1; j < d; ++j) da.re(i, j) = G.re(k++, 0);
            break;
          case SubgroupFamily::U:
          case SubgroupFamily::SU: {
            const int ndiag = (spec.family == SubgroupFamily::U) ? d : d - 1;
            for (int t = 0; t < ndiag; ++t) da.im(t, t) = G.re(k++, 0);
            for (int i = 0; i < d; ++i) {
              for (int j = i + 1; j < d; ++j) {
                da.re(i, j) = G.re(k++, 0);
                da.im(i, j) = G.re(k++, 0);
              }
            }
            break;
          }
          case SubgroupFamily::Torus:
            for (int t = 0; t < d; ++t) da.im(t, t) = G.re(k++, 0);
            break;
        }
        acc_grad(g, in[0], da);
        return;
      }
      case Op::VecGInv: {
        const SubgroupSpec& spec = n.aux.spec;
        const int d = spec.d;
        Matrix dc(spec.algebra_dim(), 1, Field::Real);
        int k = 0;
        switch (spec.family) {
          case SubgroupFamily::O:
          case SubgroupFamily::SO:
            for (int i = 0; i < d; ++i)
              for (int j = i + 1; j < d; ++j) dc.re(k++, 0) = G.re(i, j) - G.re(j, i);
            break;
          case SubgroupFamily::U:
          case SubgroupFamily::SU: {
            const int ndiag = (spec.family == SubgroupFamily::U) ? d : d - 1;
            for (int t = 0; t < ndiag; ++t) {
              double v = G.im(t, t);
              if (spec.family == SubgroupFamily::SU) v -= G.im(d - 1, d - 1);
              dc.re(k++, 0) = v;
            }
            for (int i = 0; i < d; ++i) {
              for (int j = i + 1; j < d; ++j) {
                dc.re(k++, 0) = G.re(i, j) - G.re(j, i);
                dc.re(k++, 0) = G.im(i, j) + G.im(j, i);
              }
            }
            break;
          }
          case SubgroupFamily::Torus:
            for (int t = 0; t < d; ++t) dc.re(k++, 0) = G.im(t, t);
            break;
        }
        acc_grad(g, in[0], dc);
        return;
      }
      case Op::Softmax: {
        const Matrix& alpha = n.value;
        double dot = 0.0;
        for (int i = 0; i < alpha.rows(); ++i) dot += alpha.re(i, 0) * G.re(i, 0);
        Matrix dv(alpha.rows(), 1, Field::Real);
        for (int i = 0; i < alpha.rows(); ++i) {
          dv.re(i, 0) = alpha.re(i, 0) * (G.re(i, 0) - dot);
        }
        acc_grad(g, in[0], dv);
        return;
      }
      case Op::LogSumExp: {
        const Matrix& v = val(in[0]);
        double m = v.re(0, 0);
        for (int i = 1; i < v.rows(); ++i) m = std::max(m, v.re(i, 0));
        double z = 0.0;
        for (int i = 0; i < v.rows(); ++i) z += std::exp(v.re(i, 0) - m);
        Matrix dv(v.rows(), 1, Field::Real);
        const double gs = G.re(0, 0);
        for (int i = 0; i < v.rows(); ++i) {
          dv.re(i, 0) = gs * std::exp(v.re(i, 0) - m) / z;
        }
        acc_grad(g, in[0], dv);
        return;
      }
      case Op::Gather: {
        const Matrix& v = val(in[0]);
        Matrix dv(v.rows(), 1, Field::Real);
        dv.re(n.aux.index, 0) = G.re(0, 0);
        acc_grad(g, in[0], dv);
        return;
      }
      case Op::Stack:
        for (size_t k = 0; k < in.size(); ++k) {
          Matrix ds(1, 1, Field::Real);
          ds.re(0, 0) = G.re(static_cast<int>(k), 0);
          acc_grad(g, in[k], ds);
        }
        return;
      case Op::ScaleByScalar: {
        Matrix ds(1, 1, Field::Real);
        ds.re(0, 0) = re_inner_unchecked(val(in[1]), G);
        acc_grad(g, in[0], ds);
        acc_grad(g, in[1], osm::scale(G, val(in[0]).re(0, 0)));
        return;
      }
      case Op::ExpScalar: {
        Matrix ds(1, 1, Field::Real);
        ds.re(0, 0) = G.re(0, 0) * n.value.re(0, 0);
        acc_grad(g, in[0], ds);
        return;
      }
      case Op::ConvexCombine: {
        const Matrix& w = val(in[0]);
        Matrix dw(w.rows(), 1, Field::Real);
        for (size_t k = 1; k < in.size(); ++k) {
          dw.re(static_cast<int>(k) - 1, 0) = re_inner_unchecked(val(in[k]), G);
        }
        acc_grad(g, in[0], dw);
        for (size_t k = 1; k < in.size(); ++k) {
          acc_grad(g, in[k], osm::scale(G, w.re(static_cast<int>(k) - 1, 0)));
        }
        return;
      }
      case Op::Solve: {
        // X = A^{-1} B:  dB <- A^{-H} G,  dA <- -dB X^H
        const Matrix gb = osm::solve(osm::adjoint(val(in[0])), G);
        acc_grad(g, in[1], gb);
        acc_grad(g, in[0], osm::scale(osm::matmul(gb, osm::adjoint(n.value)), -1.0));
        return;
      }
      case Op::Reproject:
        // Treated as identity in the backward pass; the forward snap stays
        // within O(drift) of the identity map on group-adjacent inputs.
        acc_grad(g, in[0], G);
        return;
    }
  }

  std::vector<Node> nodes_;
  std::vector<int> leaf_ids_;
  std::map<std::pair<int, int>, int> identity_cache_;
};

// Ordered, named tensor collection. The enumeration order is the canonical
// parameter order used by the optimizer, checkpoints and gradient maps.
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Matrix> values;
  std::vector<bool> decay;  // weight-decay mask

  int add(const std::string& name, Matrix value, bool decay_flag = true) {
    for (const std::string& n : names) {
      if (n == name) throw InvalidInputError("ParamStore: duplicate name '" + name + "'");
    }
    names.push_back(name);
    values.push_back(std::move(value));
    decay.push_back(decay_flag);
    return static_cast<int>(values.size()) - 1;
  }

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<int>(i);
    }
    return -1;
  }

  size_t count() const { return values.size(); }

  // Total trainable scalar coordinates (complex entries count twice).
  size_t scalar_count() const {
    size_t n = 0;
    for (const Matrix& m : values) {
      n += m.re_data().size() + m.im_data().size();
    }
    return n;
  }
};

struct FdReport {
  double max_rel_err = 0.0;
  size_t coords_checked = 0;
  std::string worst_coord;
};

// Central-difference check of analytic gradients. Evaluates f at params with
// single coordinates nudged by +/-step and compares against analytic_grads
// (aligned with params order). Checks a seeded random subsample of
// round(fraction * N) coordinates, at least one. Relative error uses
// max(|analytic|, |fd|, denom_floor) in the denominator so coordinates with
// true gradient zero are judged on an absolute scale.
template <class LossFn>
FdReport finite_diff_check(LossFn&& f, const ParamStore& params,
                           const std::vector<Matrix>& analytic_grads, double step,
                           double fraction = 0.05, uint64_t seed = 0x5eed,
                           double denom_floor = 1e-3) {
  if (analytic_grads.size() != params.values.size()) {
    throw InvalidInputError("finite_diff_check: gradient/parameter count mismatch");
  }
  struct Coord {
    int tensor;
    bool imag;
    size_t offset;
  };
  std::vector<Coord> coords;
  for (size_t t = 0; t < params.values.size(); ++t) {
    const Matrix& m = params.values[t];
    if (!m.same_shape(analytic_grads[t])) {
      throw InvalidInputError("finite_diff_check: gradient shape mismatch at '" +
                              params.names[t] + "'");
    }
    for (size_t k = 0; k < m.re_data().size(); ++k)
      coords.push_back({static_cast<int>(t), false, k});
    for (size_t k = 0; k < m.im_data().size(); ++k)
      coords.push_back({static_cast<int>(t), true, k});
  }
  if (coords.empty()) throw InvalidInputError("finite_diff_check: no coordinates");
  size_t want = static_cast<size_t>(std::llround(fraction * static_cast<double>(coords.size())));
  if (want < 1) want = 1;
  if (want > coords.size()) want = coords.size();
  Rng rng(seed);
  for (size_t i = 0; i < want; ++i) {
    const size_t j = i + static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(coords.size() - i)));
    std::swap(coords[i], coords[j]);
  }

  FdReport report;
  ParamStore work = params;
  for (size_t i = 0; i < want; ++i) {
    const Coord& c = coords[i];
    std::vector<double>& plane =
        c.imag ? work.values[static_cast<size_t>(c.tensor)].im_data()
               : work.values[static_cast<size_t>(c.tensor)].re_data();
    const double saved = plane[c.offset];
    plane[c.offset] = saved + step;
    const double fp = f(static_cast<const ParamStore&>(work));
    plane[c.offset] = saved - step;
    const double fm = f(static_cast<const ParamStore&>(work));
    plane[c.offset] = saved;
    const double fd = (fp - fm) / (2.0 * step);
    const Matrix& gm = analytic_grads[static_cast<size_t>(c.tensor)];
    const double ad = c.imag ? gm.im_data()[c.offset] : gm.re_data()[c.offset];
    double denom = std::max(std::fabs(ad), std::fabs(fd));
    if (denom < denom_floor) denom = denom_floor;
    const double rel = std::fabs(ad - fd) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coord = params.names[static_cast<size_t>(c.tensor)] +
                           (c.imag ? "[im " : "[re ") + std::to_string(c.offset) + "]";
    }
    ++report.coords_checked;
  }
  return report;
}

}  // namespace osm
