#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "osm/autodiff.hpp"
#include "osm/expm.hpp"
#include "osm/linalg.hpp"
#include "osm/matrix.hpp"
#include "osm/rng.hpp"
#include "osm/subgroup.hpp"

// Sequence-model templates over a matrix subgroup: a recurrent template and an
// attention template. Both keep a group-valued state per position and move it
// by right-multiplying exponentials of algebra tangents. Every model has two
// execution paths that must agree bit-for-bit: a plain rollout (rnn_forward,
// former_forward) and a recorded graph (build_* functions) used for training.
// The two paths call the same arithmetic kernels in the same order.

namespace osm {

// States are renormalized onto the group after this many multiplicative
// updates; between renormalizations unitarity drifts only at roundoff rate.
inline constexpr int kReprojectEvery = 64;

// Largest group defect accepted for an externally supplied state.
inline constexpr double kOnGroupTol = 1e-9;

// ---------------------------------------------------------------------------
// Tangent mixing: a learned linear map of algebra coordinates applied between
// the raw tangent and the exponential.
// ---------------------------------------------------------------------------

enum class MixingMode { Identity, PerDirectionScale, LinearMix };

inline const char* mixing_mode_name(MixingMode m) {
  switch (m) {
    case MixingMode::Identity: return "identity";
    case MixingMode::PerDirectionScale: return "scale";
    case MixingMode::LinearMix: return "linear";
  }
  return "?";
}

inline MixingMode parse_mixing_mode(const std::string& s) {
  if (s == "identity") return MixingMode::Identity;
  if (s == "scale" || s == "per-direction") return MixingMode::PerDirectionScale;
  if (s == "linear" || s == "linear-mix") return MixingMode::LinearMix;
  throw InvalidInputError("unknown mixing mode '" + s +
                          "' (expected identity, scale, or linear)");
}

struct MixingSpec {
  MixingMode mode = MixingMode::Identity;
  std::optional<Matrix> s;  // n_g x 1, PerDirectionScale only
  std::optional<Matrix> w;  // n_g x n_g, LinearMix only
};

inline void validate_mixing(const MixingSpec& mix, const SubgroupSpec& g) {
  const int n = g.algebra_dim();
  switch (mix.mode) {
    case MixingMode::Identity:
      if (mix.s || mix.w) throw InvalidInputError("mixing: identity mode carries no parameters");
      return;
    case MixingMode::PerDirectionScale:
      if (!mix.s || mix.w) throw InvalidInputError("mixing: scale mode needs s only");
      if (mix.s->rows() != n || mix.s->cols() != 1 || mix.s->is_complex()) {
        throw InvalidInputError("mixing: s must be a real n_g x 1 column");
      }
      return;
    case MixingMode::LinearMix:
      if (!mix.w || mix.s) throw InvalidInputError("mixing: linear mode needs W only");
      if (mix.w->rows() != n || mix.w->cols() != n || mix.w->is_complex()) {
        throw InvalidInputError("mixing: W must be a real n_g x n_g matrix");
      }
      return;
  }
  throw InvalidInputError("mixing: unknown mode");
}

// s starts at all-ones and W at identity plus small noise, so both learned
// modes start near the intrinsic (identity) map.
inline MixingSpec make_mixing(MixingMode mode, const SubgroupSpec& g, Rng& rng) {
  const int n = g.algebra_dim();
  MixingSpec mix;
  mix.mode = mode;
  if (mode == MixingMode::PerDirectionScale) {
    Matrix s(n, 1, Field::Real);
    for (int i = 0; i < n; ++i) s.re(i, 0) = 1.0;
    mix.s = std::move(s);
  } else if (mode == MixingMode::LinearMix) {
    Matrix w = random_gaussian(n, n, Field::Real, rng, 0.01);
    for (int i = 0; i < n; ++i) w.re(i, i) += 1.0;
    mix.w = std::move(w);
  }
  return mix;
}

namespace detail {
inline Matrix coords_column(const SubgroupSpec& g, const Matrix& a) {
  const TangentCoords tc = vec_g(g, a);
  Matrix col(static_cast<int>(tc.values.size()), 1, Field::Real);
  for (size_t i = 0; i < tc.values.size(); ++i) col.re(static_cast<int>(i), 0) = tc.values[i];
  return col;
}
}  // namespace detail

inline Matrix apply_mixing(const MixingSpec& mix, const SubgroupSpec& g, const Matrix& a) {
  validate_mixing(mix, g);
  switch (mix.mode) {
    case MixingMode::Identity:
      return a;
    case MixingMode::PerDirectionScale: {
      const Matrix scaled = hadamard(*mix.s, detail::coords_column(g, a));
      return vec_g_inv(g, scaled.re_data());
    }
    case MixingMode::LinearMix: {
      const Matrix mixed = matmul(*mix.w, detail::coords_column(g, a));
      return vec_g_inv(g, mixed.re_data());
    }
  }
  throw InvalidInputError("mixing: unknown mode");
}

// ---------------------------------------------------------------------------
// Readout head: similarity against one on-group prototype per token.
// logit_v = tau * Re tr(H^* P_v) + b_v, tau = exp(log_tau).
// ---------------------------------------------------------------------------

struct ReadoutHead {
  Matrix log_tau;  // 1x1; exp keeps the temperature positive
  Matrix bias;     // V x 1
};

inline ReadoutHead make_readout(int vocab) {
  if (vocab < 1) throw InvalidInputError("readout: vocabulary must be nonempty");
  return ReadoutHead{Matrix(1, 1, Field::Real), Matrix(vocab, 1, Field::Real)};
}

enum class UpdateMap { Expm, Cayley };

inline const char* update_map_name(UpdateMap u) {
  return u == UpdateMap::Expm ? "expm" : "cayley";
}

inline UpdateMap parse_update_map(const std::string& s) {
  if (s == "expm") return UpdateMap::Expm;
  if (s == "cayley") return UpdateMap::Cayley;
  throw InvalidInputError("unknown update map '" + s + "' (expected expm or cayley)");
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct RnnParams {
  SubgroupSpec spec;
  std::vector<TokenParams> embeddings;  // B: input embedding tangent, C: readout prototype
  MixingSpec mixing;
  ReadoutHead readout;
  UpdateMap update = UpdateMap::Expm;
  Matrix h0;  // fixed basepoint, not trained
};

struct FormerLayer {
  MixingSpec mixing_attn;
  MixingSpec mixing_ground;
  double alibi_slope = 1.0 / 256.0;  // recency bias per step of distance; not trained
};

struct FormerParams {
  SubgroupSpec spec;
  std::vector<TokenParams> embeddings;
  std::vector<FormerLayer> layers;
  Matrix log_tau_attn;  // 1x1 score temperature, shared across layers
  ReadoutHead readout;
  UpdateMap update = UpdateMap::Expm;
};

inline RnnParams make_rnn(const SubgroupSpec& g, int vocab, MixingMode mode, UpdateMap update,
                          Rng& rng) {
  g.validate();
  RnnParams p{g, {}, make_mixing(mode, g, rng), make_readout(vocab), update,
              Matrix::identity(g.d, g.field())};
  p.embeddings.reserve(static_cast<size_t>(vocab));
  for (int v = 0; v < vocab; ++v) p.embeddings.push_back(make_token_params(g, rng));
  return p;
}

inline FormerParams make_former(const SubgroupSpec& g, int vocab, int num_layers,
                                MixingMode mode_attn, MixingMode mode_ground, UpdateMap update,
                                Rng& rng) {
  g.validate();
  if (num_layers < 1) throw InvalidInputError("former: needs at least one layer");
  FormerParams p{g, {}, {}, Matrix(1, 1, Field::Real), make_readout(vocab), update};
  p.embeddings.reserve(static_cast<size_t>(vocab));
  for (int v = 0; v < vocab; ++v) p.embeddings.push_back(make_token_params(g, rng));
  p.layers.reserve(static_cast<size_t>(num_layers));
  for (int l = 0; l < num_layers; ++l) {
    p.layers.push_back(FormerLayer{make_mixing(mode_attn, g, rng),
                                   make_mixing(mode_ground, g, rng), 1.0 / 256.0});
  }
  // Score temperature starts at 1/sqrt(d): similarity traces grow like d.
  p.log_tau_attn.re(0, 0) = -0.5 * std::log(static_cast<double>(g.d));
  return p;
}

// ---------------------------------------------------------------------------
// Parameter traversal. The visit order below is the canonical parameter order
// everywhere: optimizer state, checkpoints, gradient vectors, leaf binding.
// Temperatures are exempt from weight decay (decaying log-tau toward zero
// pins the temperature at 1 rather than shrinking the parameter).
// ---------------------------------------------------------------------------

namespace detail {
template <class MixT, class Fn>
void visit_mixing(const std::string& prefix, MixT& mix, Fn&& fn) {
  if (mix.s) fn(prefix + ".s", *mix.s, true);
  if (mix.w) fn(prefix + ".W", *mix.w, true);
}
}  // namespace detail

template <class Params, class Fn>
  requires std::same_as<std::remove_const_t<Params>, RnnParams>
void visit_params(Params& p, Fn&& fn) {
  for (size_t v = 0; v < p.embeddings.size(); ++v) {
    fn("emb.B." + std::to_string(v), p.embeddings[v].B, true);
    fn("emb.C." + std::to_string(v), p.embeddings[v].C, true);
  }
  detail::visit_mixing("mix", p.mixing, fn);
  fn("readout.log_tau", p.readout.log_tau, false);
  fn("readout.bias", p.readout.bias, true);
}

template <class Params, class Fn>
  requires std::same_as<std::remove_const_t<Params>, FormerParams>
void visit_params(Params& p, Fn&& fn) {
  for (size_t v = 0; v < p.embeddings.size(); ++v) {
    fn("emb.B." + std::to_string(v), p.embeddings[v].B, true);
    fn("emb.C." + std::to_string(v), p.embeddings[v].C, true);
  }
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const std::string base = "layer" + std::to_string(l);
    detail::visit_mixing(base + ".attn", p.layers[l].mixing_attn, fn);
    detail::visit_mixing(base + ".ground", p.layers[l].mixing_ground, fn);
  }
  fn("attn.log_tau", p.log_tau_attn, false);
  fn("readout.log_tau", p.readout.log_tau, false);
  fn("readout.bias", p.readout.bias, true);
}

template <class ModelParams>
ParamStore to_store(const ModelParams& p) {
  ParamStore ps;
  visit_params(p, [&](const std::string& n, const Matrix& m, bool decay) { ps.add(n, m, decay); });
  return ps;
}

// Copies store values back into the bundle, matching by name and shape.
template <class ModelParams>
void load_from_store(ModelParams& p, const ParamStore& ps) {
  size_t used = 0;
  visit_params(p, [&](const std::string& n, Matrix& m, bool) {
    const int i = ps.index_of(n);
    if (i < 0) throw InvalidInputError("parameter store: missing tensor '" + n + "'");
    const Matrix& src = ps.values[static_cast<size_t>(i)];
    if (!m.same_shape(src)) {
      throw InvalidInputError("parameter store: shape mismatch for tensor '" + n + "'");
    }
    m = src;
    ++used;
  });
  if (used != ps.count()) {
    throw InvalidInputError("parameter store: extra tensors beyond the model's parameters");
  }
}

// ---------------------------------------------------------------------------
// Parameter counting, itemized by component.
// ---------------------------------------------------------------------------

struct ParamCount {
  std::int64_t embeddings = 0;
  std::int64_t prototypes = 0;
  std::int64_t mixing = 0;
  std::int64_t biases = 0;
  std::int64_t temperatures = 0;
  std::int64_t total = 0;
};

template <class ModelParams>
ParamCount count_params(const ModelParams& p) {
  ParamCount c;
  visit_params(p, [&](const std::string& n, const Matrix& m, bool) {
    const std::int64_t scalars =
        static_cast<std::int64_t>(m.re_data().size() + m.im_data().size());
    if (n.rfind("emb.B.", 0) == 0) {
      c.embeddings += scalars;
    } else if (n.rfind("emb.C.", 0) == 0) {
      c.prototypes += scalars;
    } else if (n == "readout.bias") {
      c.biases += scalars;
    } else if (n.size() >= 7 && n.compare(n.size() - 7, 7, "log_tau") == 0) {
      c.temperatures += scalars;
    } else {
      c.mixing += scalars;
    }
    c.total += scalars;
  });
  return c;
}

// ---------------------------------------------------------------------------
// Plain forward path
// ---------------------------------------------------------------------------

struct TokenGroups {
  std::vector<Matrix> emb;    // M_v
  std::vector<Matrix> proto;  // P_v
};

template <class ModelParams>
TokenGroups materialize_token_groups(const ModelParams& p) {
  TokenGroups tg;
  tg.emb.reserve(p.embeddings.size());
  tg.proto.reserve(p.embeddings.size());
  for (const TokenParams& tp : p.embeddings) {
    tg.emb.push_back(token_to_group(p.spec, tp, TokenSlot::Embedding));
    tg.proto.push_back(token_to_group(p.spec, tp, TokenSlot::Prototype));
  }
  return tg;
}

namespace detail {
inline void require_token(size_t vocab, int token, const char* what) {
  if (token < 0 || static_cast<size_t>(token) >= vocab) {
    throw InvalidInputError(std::string(what) + ": token id out of vocabulary");
  }
}

inline void require_on_group(const Matrix& h, const char* what) {
  if (group_defect(h) > kOnGroupTol) {
    throw InvalidInputError(std::string(what) + ": state is off the group");
  }
}
}  // namespace detail

inline Matrix group_step(UpdateMap u, const Matrix& h, const Matrix& tangent) {
  return matmul(h, u == UpdateMap::Expm ? expm(tangent) : cayley(tangent));
}

// Mixed tangent for one recurrent update against an already materialized
// token embedding.
inline Matrix rnn_update_tangent(const RnnParams& p, const Matrix& h, const Matrix& m_token) {
  return apply_mixing(p.mixing, p.spec, project_tangent(p.spec, matmul(adjoint(h), m_token)));
}

inline Matrix rnn_step_with(const RnnParams& p, const TokenGroups& tg, const Matrix& h,
                            int token) {
  detail::require_token(tg.emb.size(), token, "rnn_step");
  return group_step(p.update, h, rnn_update_tangent(p, h, tg.emb[static_cast<size_t>(token)]));
}

// Single-step form; materializes the token embedding on the fly and validates
// the incoming state. Rolled loops use rnn_step_with instead.
inline Matrix rnn_step(const RnnParams& p, const Matrix& h, int token) {
  detail::require_token(p.embeddings.size(), token, "rnn_step");
  detail::require_on_group(h, "rnn_step");
  const Matrix m = token_to_group(p.spec, p.embeddings[static_cast<size_t>(token)],
                                  TokenSlot::Embedding);
  return group_step(p.update, h, rnn_update_tangent(p, h, m));
}

inline Matrix readout_logits(const ReadoutHead& head, const std::vector<Matrix>& protos,
                             const Matrix& h) {
  if (protos.empty() || static_cast<size_t>(head.bias.rows()) != protos.size()) {
    throw InvalidInputError("readout: prototype count must match bias length");
  }
  Matrix traces(static_cast<int>(protos.size()), 1, Field::Real);
  for (size_t v = 0; v < protos.size(); ++v) {
    traces.re(static_cast<int>(v), 0) = trace_re_inner(h, protos[v]);
  }
  const double tau = std::exp(head.log_tau.re(0, 0));
  return add(scale(traces, tau), head.bias);
}

struct ForwardResult {
  std::vector<Matrix> states;  // final state per position
  std::vector<Matrix> logits;  // V x 1 per position
};

// Recurrent rollout. logits[t] are computed from the state after consuming
// tokens[0..t], so they are trained against tokens[t+1]. When `tangents` is
// given it receives the mixed update tangent of every step.
inline ForwardResult rnn_forward(const RnnParams& p, const TokenGroups& tg,
                                 const std::vector<int>& tokens,
                                 std::vector<Matrix>* tangents = nullptr) {
  if (tokens.empty()) throw InvalidInputError("rnn_forward: empty sequence");
  ForwardResult out;
  out.states.reserve(tokens.size());
  out.logits.reserve(tokens.size());
  Matrix h = p.h0;
  int steps = 0;
  for (int tok : tokens) {
    detail::require_token(tg.emb.size(), tok, "rnn_forward");
    const Matrix u = rnn_update_tangent(p, h, tg.emb[static_cast<size_t>(tok)]);
    if (tangents) tangents->push_back(u);
    h = group_step(p.update, h, u);
    ++steps;
    if (steps % kReprojectEvery == 0) h = reproject_orthogonal(h);
    out.states.push_back(h);
    out.logits.push_back(readout_logits(p.readout, tg.proto, h));
  }
  return out;
}

inline ForwardResult rnn_forward(const RnnParams& p, const std::vector<int>& tokens) {
  const TokenGroups tg = materialize_token_groups(p);
  return rnn_forward(p, tg, tokens);
}

// Causal attention rows: row i is the softmax over j <= i of
// tau * Re tr(H_i^* H_j) - slope * (i - j). The trace term is invariant under
// a global basis change H -> Q H Q^*.
inline std::vector<Matrix> attention_weights(const SubgroupSpec& g, double tau_attn,
                                             const std::vector<Matrix>& states,
                                             double alibi_slope) {
  if (states.empty()) throw InvalidInputError("attention_weights: empty state list");
  if (!(tau_attn > 0.0)) throw InvalidInputError("attention_weights: temperature must be positive");
  for (const Matrix& h : states) {
    if (h.rows() != g.d || h.cols() != g.d || h.field() != g.field()) {
      throw InvalidInputError("attention_weights: state shape does not match the subgroup");
    }
  }
  std::vector<Matrix> rows;
  rows.reserve(states.size());
  for (size_t i = 0; i < states.size(); ++i) {
    Matrix scores(static_cast<int>(i) + 1, 1, Field::Real);
    for (size_t j = 0; j <= i; ++j) {
      scores.re(static_cast<int>(j), 0) = trace_re_inner(states[i], states[j]);
    }
    Matrix biased = scale(scores, tau_attn);
    Matrix recency(static_cast<int>(i) + 1, 1, Field::Real);
    for (size_t j = 0; j <= i; ++j) {
      recency.re(static_cast<int>(j), 0) = -alibi_slope * static_cast<double>(i - j);
    }
    rows.push_back(softmax_column(add(biased, recency)));
  }
  return rows;
}

// Tangents recorded by one attention layer: z moves the state toward the
// attention-weighted context, g grounds it at the current token's embedding.
struct LayerTangents {
  std::vector<Matrix> z;
  std::vector<Matrix> g;
};

inline std::vector<Matrix> former_layer(const FormerParams& p, int layer, const TokenGroups& tg,
                                        const std::vector<Matrix>& states,
                                        const std::vector<int>& tokens,
                                        LayerTangents* tangents = nullptr) {
  if (layer < 0 || static_cast<size_t>(layer) >= p.layers.size()) {
    throw InvalidInputError("former_layer: layer index out of range");
  }
  if (states.empty() || states.size() != tokens.size()) {
    throw InvalidInputError("former_layer: states and tokens must align and be nonempty");
  }
  for (const Matrix& h : states) detail::require_on_group(h, "former_layer");
  const FormerLayer& lay = p.layers[static_cast<size_t>(layer)];
  const double tau = std::exp(p.log_tau_attn.re(0, 0));
  const std::vector<Matrix> alpha = attention_weights(p.spec, tau, states, lay.alibi_slope);
  std::vector<Matrix> out;
  out.reserve(states.size());
  for (size_t i = 0; i < states.size(); ++i) {
    detail::require_token(tg.emb.size(), tokens[i], "former_layer");
    std::vector<const Matrix*> context;
    context.reserve(i + 1);
    for (size_t j = 0; j <= i; ++j) context.push_back(&states[j]);
    const Matrix v = weighted_sum(alpha[i], context);
    const Matrix z = apply_mixing(lay.mixing_attn, p.spec,
                                  project_tangent(p.spec, matmul(adjoint(states[i]), v)));
    const Matrix htil = group_step(p.update, states[i], z);
    const Matrix gt = apply_mixing(
        lay.mixing_ground, p.spec,
        project_tangent(p.spec,
                        matmul(adjoint(htil), tg.emb[static_cast<size_t>(tokens[i])])));
    if (tangents) {
      tangents->z.push_back(z);
      tangents->g.push_back(gt);
    }
    out.push_back(group_step(p.update, htil, gt));
  }
  return out;
}

// Attention rollout. States start at the token embeddings and pass through
// every layer; logits per position come from the last layer's state.
inline ForwardResult former_forward(const FormerParams& p, const TokenGroups& tg,
                                    const std::vector<int>& tokens,
                                    std::vector<LayerTangents>* tangents = nullptr) {
  if (tokens.empty()) throw InvalidInputError("former_forward: empty sequence");
  std::vector<Matrix> states;
  states.reserve(tokens.size());
  for (int tok : tokens) {
    detail::require_token(tg.emb.size(), tok, "former_forward");
    states.push_back(tg.emb[static_cast<size_t>(tok)]);
  }
  for (size_t l = 0; l < p.layers.size(); ++l) {
    LayerTangents lt;
    states = former_layer(p, static_cast<int>(l), tg, states, tokens, tangents ? &lt : nullptr);
    if (tangents) tangents->push_back(std::move(lt));
    // Each layer multiplies every state twice; renormalize on the same
    // schedule as the recurrent rollout.
    if ((2 * (static_cast<int>(l) + 1)) % kReprojectEvery == 0) {
      for (Matrix& h : states) h = reproject_orthogonal(h);
    }
  }
  ForwardResult out;
  out.states = std::move(states);
  out.logits.reserve(tokens.size());
  for (const Matrix& h : out.states) out.logits.push_back(readout_logits(p.readout, tg.proto, h));
  return out;
}

inline ForwardResult former_forward(const FormerParams& p, const std::vector<int>& tokens) {
  const TokenGroups tg = materialize_token_groups(p);
  return former_forward(p, tg, tokens);
}

// Differential of the readout at H in algebra coordinates: entry (v, k) is
// the derivative of logit_v along basis direction k of a right-multiplied
// exponential perturbation, tau * Re tr((H E_k)^* P_v).
inline Matrix readout_differential(const ReadoutHead& head, const SubgroupSpec& g,
                                   const std::vector<Matrix>& protos, const Matrix& h) {
  if (protos.empty() || static_cast<size_t>(head.bias.rows()) != protos.size()) {
    throw InvalidInputError("readout_differential: prototype count must match bias length");
  }
  detail::require_on_group(h, "readout_differential");
  const double tau = std::exp(head.log_tau.re(0, 0));
  const int n = g.algebra_dim();
  const int vocab = static_cast<int>(protos.size());
  const Matrix ha = adjoint(h);
  std::vector<Matrix> s;
  s.reserve(protos.size());
  for (const Matrix& pv : protos) s.push_back(matmul(ha, pv));
  Matrix out(vocab, n, Field::Real);
  for (int k = 0; k < n; ++k) {
    const Matrix ek = algebra_basis_element(g, k);
    for (int v = 0; v < vocab; ++v) {
      out.re(v, k) = tau * trace_re_inner(ek, s[static_cast<size_t>(v)]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recorded-graph builders. Leaf creation order equals visit_params order, so
// gradients read back in binding order line up with the parameter store.
// ---------------------------------------------------------------------------

struct TapeBinding {
  std::vector<std::string> names;
  std::vector<Var> vars;

  Var at(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return vars[i];
    }
    throw InvalidInputError("tape binding: unbound parameter '" + name + "'");
  }
};

template <class ModelParams>
TapeBinding bind_params(Tape& t, const ModelParams& p) {
  TapeBinding b;
  visit_params(p, [&](const std::string& n, const Matrix& m, bool) {
    b.names.push_back(n);
    b.vars.push_back(t.leaf(m));
  });
  return b;
}

struct TokenGroupVars {
  std::vector<Var> emb;
  std::vector<Var> proto;
};

namespace detail {
inline Var build_token_group(Tape& t, const SubgroupSpec& g, const TokenParams& tp,
                             TokenSlot slot, Var raw) {
  const Var tangent = (g.family == SubgroupFamily::Torus) ? t.vec_g_inv(g, raw)
                                                          : t.project_tangent(g, raw);
  Var m = t.expm(tangent);
  const int flip = (slot == TokenSlot::Embedding) ? tp.eta : tp.xi;
  if (flip != 0) {
    if (g.family != SubgroupFamily::O) {
      throw InvalidInputError("token group: reflection exponents only apply to O(d)");
    }
    m = t.matmul(t.constant(reflection_factor(g.d)), m);
  }
  return m;
}
}  // namespace detail

// Materializes every token's embedding and prototype once per graph.
template <class ModelParams>
TokenGroupVars build_token_groups(Tape& t, const ModelParams& p, const TapeBinding& b) {
  TokenGroupVars tg;
  tg.emb.reserve(p.embeddings.size());
  tg.proto.reserve(p.embeddings.size());
  for (size_t v = 0; v < p.embeddings.size(); ++v) {
    tg.emb.push_back(detail::build_token_group(t, p.spec, p.embeddings[v], TokenSlot::Embedding,
                                               b.at("emb.B." + std::to_string(v))));
    tg.proto.push_back(detail::build_token_group(t, p.spec, p.embeddings[v],
                                                 TokenSlot::Prototype,
                                                 b.at("emb.C." + std::to_string(v))));
  }
  return tg;
}

inline Var build_mixing(Tape& t, const MixingSpec& mix, const SubgroupSpec& g,
                        const TapeBinding& b, const std::string& prefix, Var a) {
  switch (mix.mode) {
    case MixingMode::Identity:
      return a;
    case MixingMode::PerDirectionScale:
      return t.vec_g_inv(g, t.hadamard(b.at(prefix + ".s"), t.vec_g(g, a)));
    case MixingMode::LinearMix:
      return t.vec_g_inv(g, t.matmul(b.at(prefix + ".W"), t.vec_g(g, a)));
  }
  throw InvalidInputError("mixing: unknown mode");
}

inline Var build_group_step(Tape& t, UpdateMap u, Var h, Var tangent) {
  return t.matmul(h, u == UpdateMap::Expm ? t.expm(tangent) : t.cayley(tangent));
}

inline Var build_readout(Tape& t, const TapeBinding& b, const std::vector<Var>& protos,
                         Var tau, Var h) {
  std::vector<Var> traces;
  traces.reserve(protos.size());
  for (Var pv : protos) traces.push_back(t.trace_re_inner(h, pv));
  return t.add(t.scale_by_scalar(tau, t.stack(traces)), b.at("readout.bias"));
}

struct SequenceVars {
  std::vector<Var> states;
  std::vector<Var> logits;
};

inline SequenceVars build_rnn_forward(Tape& t, const RnnParams& p, const TapeBinding& b,
                                      const TokenGroupVars& tg,
                                      const std::vector<int>& tokens) {
  if (tokens.empty()) throw InvalidInputError("rnn_forward: empty sequence");
  SequenceVars out;
  out.states.reserve(tokens.size());
  out.logits.reserve(tokens.size());
  const Var tau = t.exp_scalar(b.at("readout.log_tau"));
  Var h = t.constant(p.h0);
  int steps = 0;
  for (int tok : tokens) {
    detail::require_token(tg.emb.size(), tok, "rnn_forward");
    const Var raw = t.project_tangent(p.spec,
                                      t.matmul(t.adjoint(h), tg.emb[static_cast<size_t>(tok)]));
    const Var u = build_mixing(t, p.mixing, p.spec, b, "mix", raw);
    h = build_group_step(t, p.update, h, u);
    ++steps;
    if (steps % kReprojectEvery == 0) h = t.reproject(h);
    out.states.push_back(h);
    out.logits.push_back(build_readout(t, b, tg.proto, tau, h));
  }
  return out;
}

inline std::vector<Var> build_former_layer(Tape& t, const FormerParams& p, const TapeBinding& b,
                                           int layer, const TokenGroupVars& tg, Var tau_attn,
                                           const std::vector<Var>& states,
                                           const std::vector<int>& tokens) {
  const FormerLayer& lay = p.layers[static_cast<size_t>(layer)];
  const std::string base = "layer" + std::to_string(layer);
  std::vector<Var> out;
  out.reserve(states.size());
  for (size_t i = 0; i < states.size(); ++i) {
    detail::require_token(tg.emb.size(), tokens[i], "former_layer");
    std::vector<Var> traces;
    traces.reserve(i + 1);
    for (size_t j = 0; j <= i; ++j) traces.push_back(t.trace_re_inner(states[i], states[j]));
    Matrix recency(static_cast<int>(i) + 1, 1, Field::Real);
    for (size_t j = 0; j <= i; ++j) {
      recency.re(static_cast<int>(j), 0) = -lay.alibi_slope * static_cast<double>(i - j);
    }
    const Var scores = t.add(t.scale_by_scalar(tau_attn, t.stack(traces)), t.constant(recency));
    const Var alpha = t.softmax(scores);
    const std::vector<Var> context(states.begin(), states.begin() + static_cast<long>(i) + 1);
    const Var v = t.convex_combine(alpha, context);
    const Var zraw = t.project_tangent(p.spec, t.matmul(t.adjoint(states[i]), v));
    const Var z = build_mixing(t, lay.mixing_attn, p.spec, b, base + ".attn", zraw);
    const Var htil = build_group_step(t, p.update, states[i], z);
    const Var graw = t.project_tangent(
        p.spec, t.matmul(t.adjoint(htil), tg.emb[static_cast<size_t>(tokens[i])]));
    const Var g = build_mixing(t, lay.mixing_ground, p.spec, b, base + ".ground", graw);
    out.push_back(build_group_step(t, p.update, htil, g));
  }
  return out;
}

inline SequenceVars build_former_forward(Tape& t, const FormerParams& p, const TapeBinding& b,
                                         const TokenGroupVars& tg,
                                         const std::vector<int>& tokens) {
  if (tokens.empty()) throw InvalidInputError("former_forward: empty sequence");
  std::vector<Var> states;
  states.reserve(tokens.size());
  for (int tok : tokens) {
    detail::require_token(tg.emb.size(), tok, "former_forward");
    states.push_back(tg.emb[static_cast<size_t>(tok)]);
  }
  const Var tau_attn = t.exp_scalar(b.at("attn.log_tau"));
  for (size_t l = 0; l < p.layers.size(); ++l) {
    states = build_former_layer(t, p, b, static_cast<int>(l), tg, tau_attn, states, tokens);
    if ((2 * (static_cast<int>(l) + 1)) % kReprojectEvery == 0) {
      for (Var& h : states) h = t.reproject(h);
    }
  }
  SequenceVars out;
  out.states = std::move(states);
  out.logits.reserve(tokens.size());
  const Var tau = t.exp_scalar(b.at("readout.log_tau"));
  for (Var h : out.states) out.logits.push_back(build_readout(t, b, tg.proto, tau, h));
  return out;
}

// Mean cross-entropy in nats over one sequence of logit rows.
inline Var build_mean_ce(Tape& t, const std::vector<Var>& logits,
                         const std::vector<int>& targets) {
  if (logits.empty() || logits.size() != targets.size()) {
    throw InvalidInputError("mean_ce: logits and targets must align and be nonempty");
  }
  std::vector<Var> ces;
  ces.reserve(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) {
    ces.push_back(t.sub(t.log_sum_exp(logits[i]), t.gather(logits[i], targets[i])));
  }
  return t.scale(t.add(ces), 1.0 / static_cast<double>(ces.size()));
}

struct LossGraph {
  TapeBinding binding;
  Var loss;
};

inline LossGraph build_rnn_loss(Tape& t, const RnnParams& p, const std::vector<int>& tokens,
                                const std::vector<int>& targets) {
  LossGraph g{bind_params(t, p), Var{}};
  const TokenGroupVars tg = build_token_groups(t, p, g.binding);
  const SequenceVars seq = build_rnn_forward(t, p, g.binding, tg, tokens);
  g.loss = build_mean_ce(t, seq.logits, targets);
  return g;
}

inline LossGraph build_former_loss(Tape& t, const FormerParams& p,
                                   const std::vector<int>& tokens,
                                   const std::vector<int>& targets) {
  LossGraph g{bind_params(t, p), Var{}};
  const TokenGroupVars tg = build_token_groups(t, p, g.binding);
  const SequenceVars seq = build_former_forward(t, p, g.binding, tg, tokens);
  g.loss = build_mean_ce(t, seq.logits, targets);
  return g;
}

}  // namespace osm
