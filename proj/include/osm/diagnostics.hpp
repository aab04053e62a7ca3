#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "osm/linalg.hpp"
#include "osm/models.hpp"

// Geometry instrumentation: group-constraint drift, per-step tangent activity
// traces, and the split of the tangent space into readout-visible and
// readout-null directions.

namespace osm {

// Deviation of a square matrix from the group constraint, ||H* H - I||_F.
inline double drift(const Matrix& h) { return group_defect(h); }

// ---------------------------------------------------------------------------
// Predictive/memory channel decomposition. The readout differential D maps
// algebra coordinates to logit changes; its row space is what the readout can
// see. Directions below the singular-value cutoff count as memory.
// ---------------------------------------------------------------------------

inline constexpr double kChannelCutoffRel = 1e-10;

struct ChannelSplit {
  int predictive_dim;
  int memory_dim;
  Matrix p_pred;              // orthogonal projector onto readout-visible directions
  Matrix p_mem;               // complement projector, exactly I - p_pred
  std::vector<double> sigma;  // singular values of the differential, descending
};

inline ChannelSplit channel_split(const ReadoutHead& head, const SubgroupSpec& g,
                                  const std::vector<Matrix>& protos, const Matrix& h) {
  detail::require_on_group(h, "channel_split");
  const Matrix d = readout_differential(head, g, protos, h);
  const int n = g.algebra_dim();
  const Svd f = svd(d);
  const double smax = f.sigma.empty() ? 0.0 : f.sigma.front();
  const double cutoff = kChannelCutoffRel * smax;
  int rank = 0;
  for (double s : f.sigma) {
    if (s > cutoff && s > 0.0) ++rank;
  }
  Matrix p_pred(n, n, Field::Real);
  for (int k = 0; k < rank; ++k) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        p_pred.re(i, j) += f.v.re(i, k) * f.v.re(j, k);
      }
    }
  }
  Matrix p_mem = sub(Matrix::identity(n, Field::Real), p_pred);
  return ChannelSplit{rank, n - rank, std::move(p_pred), std::move(p_mem), f.sigma};
}

template <class ModelParams>
ChannelSplit channel_split(const ModelParams& p, const Matrix& h) {
  const TokenGroups tg = materialize_token_groups(p);
  return channel_split(p.readout, p.spec, tg.proto, h);
}

// ---------------------------------------------------------------------------
// Per-step tangent traces. Records observe a forward pass without changing
// it: the traced run returns bit-identical states and logits.
// ---------------------------------------------------------------------------

// Default step sampling period when traces are emitted during training.
inline constexpr int kDefaultTraceStride = 100;

struct StepTrace {
  int pos = 0;
  int layer = 0;               // always 0 for the recurrent template
  double u_norm = 0.0;         // total tangent magnitude of this record's update
  double attn_norm = 0.0;      // ||Z||_F, attention layers only
  double ground_norm = 0.0;    // ||G||_F, attention layers only
  std::vector<double> coord_abs;  // per-coordinate |vec_g| activity
  double coord_abs_max = 0.0;
  double coord_abs_mean = 0.0;
  double drift = 0.0;  // group defect of the state this record produced
};

struct TraceRun {
  std::vector<StepTrace> records;
  ForwardResult forward;
};

namespace detail {

inline void finish_coord_stats(StepTrace& r) {
  double mx = 0.0, sum = 0.0;
  for (double a : r.coord_abs) {
    mx = std::max(mx, a);
    sum += a;
  }
  r.coord_abs_max = mx;
  r.coord_abs_mean = r.coord_abs.empty() ? 0.0 : sum / static_cast<double>(r.coord_abs.size());
}

}  // namespace detail

// Trace of a recurrent rollout: one record per sampled position.
inline TraceRun trace_run(const RnnParams& p, const std::vector<int>& tokens, int stride = 1) {
  if (stride < 1) throw InvalidInputError("trace_run: stride must be positive");
  const TokenGroups tg = materialize_token_groups(p);
  std::vector<Matrix> tangents;
  TraceRun out;
  out.forward = rnn_forward(p, tg, tokens, &tangents);
  for (size_t t = 0; t < tokens.size(); t += static_cast<size_t>(stride)) {
    StepTrace r;
    r.pos = static_cast<int>(t);
    r.layer = 0;
    r.u_norm = fro_norm(tangents[t]);
    const TangentCoords c = vec_g(p.spec, tangents[t]);
    r.coord_abs.reserve(c.values.size());
    for (double x : c.values) r.coord_abs.push_back(std::fabs(x));
    detail::finish_coord_stats(r);
    r.drift = drift(out.forward.states[t]);
    out.records.push_back(std::move(r));
  }
  return out;
}

// Trace of an attention rollout: one record per sampled position per layer,
// splitting the update into its attention and grounding parts. Mirrors
// former_forward exactly, including the re-projection schedule.
inline TraceRun trace_run(const FormerParams& p, const std::vector<int>& tokens, int stride = 1) {
  if (stride < 1) throw InvalidInputError("trace_run: stride must be positive");
  if (tokens.empty()) throw InvalidInputError("trace_run: empty sequence");
  const TokenGroups tg = materialize_token_groups(p);
  std::vector<Matrix> states;
  states.reserve(tokens.size());
  for (int tok : tokens) {
    detail::require_token(tg.emb.size(), tok, "trace_run");
    states.push_back(tg.emb[static_cast<size_t>(tok)]);
  }
  TraceRun out;
  for (size_t l = 0; l < p.layers.size(); ++l) {
    LayerTangents lt;
    states = former_layer(p, static_cast<int>(l), tg, states, tokens, &lt);
    for (size_t t = 0; t < tokens.size(); t += static_cast<size_t>(stride)) {
      StepTrace r;
      r.pos = static_cast<int>(t);
      r.layer = static_cast<int>(l);
      r.attn_norm = fro_norm(lt.z[t]);
      r.ground_norm = fro_norm(lt.g[t]);
      r.u_norm = std::sqrt(r.attn_norm * r.attn_norm + r.ground_norm * r.ground_norm);
      const TangentCoords cz = vec_g(p.spec, lt.z[t]);
      const TangentCoords cg = vec_g(p.spec, lt.g[t]);
      r.coord_abs.reserve(cz.values.size());
      for (size_t k = 0; k < cz.values.size(); ++k) {
        r.coord_abs.push_back(std::fabs(cz.values[k]) + std::fabs(cg.values[k]));
      }
      detail::finish_coord_stats(r);
      r.drift = drift(states[t]);
      out.records.push_back(std::move(r));
    }
    if ((2 * (static_cast<int>(l) + 1)) % kReprojectEvery == 0) {
      for (Matrix& h : states) h = reproject_orthogonal(h);
    }
  }
  out.forward.states = std::move(states);
  out.forward.logits.reserve(tokens.size());
  for (const Matrix& h : out.forward.states) {
    out.forward.logits.push_back(readout_logits(p.readout, tg.proto, h));
  }
  return out;
}

// One line-delimited record, matching the metrics stream style.
inline std::string trace_line_json(const StepTrace& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"pos\":%d,\"layer\":%d,\"u_norm\":%.17g,\"attn_norm\":%.17g,"
                "\"ground_norm\":%.17g,\"coord_abs_max\":%.17g,\"coord_abs_mean\":%.17g,"
                "\"drift\":%.17g}",
                r.pos, r.layer, r.u_norm, r.attn_norm, r.ground_norm, r.coord_abs_max,
                r.coord_abs_mean, r.drift);
  return std::string(buf);
}

}  // namespace osm
