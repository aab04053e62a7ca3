// Acceptance harness: ten gating checks over the whole stack, one line of
// output per criterion. Each line carries the measured extremes next to the
// pinned tolerances so a reader can judge the margin, not just the verdict.
// Exit code 0 only if every gating criterion holds.
//
// Criterion 8 (corpus stretch targets) is reporting-only by design: it needs
// an externally supplied corpus and a long schedule, so it logs instead of
// gating. Supply the corpus through OSM_TS_PATH or argv[1] to exercise it.

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "osm/autodiff.hpp"
#include "osm/config.hpp"
#include "osm/diagnostics.hpp"
#include "osm/expm.hpp"
#include "osm/linalg.hpp"
#include "osm/models.hpp"
#include "osm/rng.hpp"
#include "osm/subgroup.hpp"
#include "osm/training.hpp"

using namespace osm;

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return std::string(buf);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

bool bits_equal(const Matrix& a, const Matrix& b) {
  return a.re_data() == b.re_data() && a.im_data() == b.im_data();
}

// ---------------------------------------------------------------------------
// Self-contained complex dense helpers: the straight-line oracle for the
// attention template is written against these, not against the library's
// matrix type, so the two paths share no kernel code.
// ---------------------------------------------------------------------------

using cplx = std::complex<double>;

struct CMat {
  int n = 0;
  std::vector<cplx> a;

  explicit CMat(int dim) : n(dim), a(static_cast<size_t>(dim) * dim) {}
  cplx& at(int r, int c) { return a[static_cast<size_t>(r) * n + c]; }
  const cplx& at(int r, int c) const { return a[static_cast<size_t>(r) * n + c]; }
};

CMat to_c(const Matrix& m) {
  CMat out(m.rows());
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      out.at(r, c) = cplx(m.re(r, c), m.is_complex() ? m.im(r, c) : 0.0);
    }
  }
  return out;
}

CMat c_eye(int n) {
  CMat e(n);
  for (int i = 0; i < n; ++i) e.at(i, i) = 1.0;
  return e;
}

CMat c_mul(const CMat& x, const CMat& y) {
  CMat out(x.n);
  for (int r = 0; r < x.n; ++r) {
    for (int k = 0; k < x.n; ++k) {
      const cplx v = x.at(r, k);
      for (int c = 0; c < x.n; ++c) out.at(r, c) += v * y.at(k, c);
    }
  }
  return out;
}

CMat c_skewh(const CMat& x) {
  CMat out(x.n);
  for (int r = 0; r < x.n; ++r) {
    for (int c = 0; c < x.n; ++c) out.at(r, c) = 0.5 * (x.at(r, c) - std::conj(x.at(c, r)));
  }
  return out;
}

CMat c_adjoint(const CMat& x) {
  CMat out(x.n);
  for (int r = 0; r < x.n; ++r) {
    for (int c = 0; c < x.n; ++c) out.at(r, c) = std::conj(x.at(c, r));
  }
  return out;
}

double c_re_tr_adj(const CMat& x, const CMat& y) {
  double s = 0.0;
  for (size_t k = 0; k < x.a.size(); ++k) {
    s += x.a[k].real() * y.a[k].real() + x.a[k].imag() * y.a[k].imag();
  }
  return s;
}

// Reference exponential: explicit term-by-term Taylor sum after scaling the
// one-norm below 1/16, then repeated squaring. Deliberately a different
// evaluation order and scaling policy than the library kernel.
CMat c_exp_ref(const CMat& x) {
  double nrm = 0.0;
  for (int c = 0; c < x.n; ++c) {
    double col = 0.0;
    for (int r = 0; r < x.n; ++r) col += std::abs(x.at(r, c));
    nrm = std::max(nrm, col);
  }
  int s = 0;
  while (nrm > 1.0 / 16.0 && s < 64) {
    nrm *= 0.5;
    ++s;
  }
  CMat scaled(x.n);
  const double f = std::ldexp(1.0, -s);
  for (size_t k = 0; k < x.a.size(); ++k) scaled.a[k] = x.a[k] * f;
  CMat sum = c_eye(x.n);
  CMat term = c_eye(x.n);
  for (int k = 1; k <= 24; ++k) {
    term = c_mul(term, scaled);
    for (size_t j = 0; j < term.a.size(); ++j) {
      term.a[j] /= static_cast<double>(k);
      sum.a[j] += term.a[j];
    }
  }
  for (int i = 0; i < s; ++i) sum = c_mul(sum, sum);
  return sum;
}

double c_diff(const CMat& x, const Matrix& m) {
  double worst = 0.0;
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      worst = std::max(worst, std::abs(x.at(r, c).real() - m.re(r, c)));
      if (m.is_complex()) worst = std::max(worst, std::abs(x.at(r, c).imag() - m.im(r, c)));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// 1. Group-map correctness with a spectral oracle.
// ---------------------------------------------------------------------------
//
// For real skew-symmetric A of even dimension the singular values pair up as
// {theta_j, theta_j} and the eigenvalues of Exp(A) are exp(+-i theta_j), so
// tr Exp(A) = 2 sum_j cos theta_j. The trace of the library's Taylor-based
// exponential is checked against that sum computed from an SVD, a code path
// that shares nothing with the exponential. Every output must also be
// orthogonal to roundoff, have determinant +1, and have unit singular values.

Outcome criterion_group_maps() {
  const double t0 = now_s();
  Rng rng(20260818);
  double worst_defect = 0.0, worst_det = 0.0, worst_spec = 0.0;
  for (const int d : {2, 4, 8, 16}) {
    const SubgroupSpec g{SubgroupFamily::SO, d};
    for (int k = 0; k < 1000; ++k) {
      const Matrix a = project_tangent(g, random_gaussian(d, d, Field::Real, rng));
      const Matrix q = expm(a);
      worst_defect = std::max(worst_defect, group_defect(q));
      worst_det = std::max(worst_det, std::fabs(det_real(q) - 1.0));

      const Svd sa = svd(a);
      double trace_want = 0.0;
      for (int j = 0; j + 1 < d; j += 2) {
        trace_want += 2.0 * std::cos(0.5 * (sa.sigma[static_cast<size_t>(j)] +
                                            sa.sigma[static_cast<size_t>(j) + 1]));
      }
      double trace_got = 0.0;
      for (int i = 0; i < d; ++i) trace_got += q.re(i, i);
      worst_spec = std::max(worst_spec, std::fabs(trace_got - trace_want));

      for (const double s : svd(q).sigma) {
        worst_spec = std::max(worst_spec, std::fabs(s - 1.0));
      }
    }
  }
  const double dt = now_s() - t0;
  const bool ok = worst_defect < 1e-12 && worst_det < 1e-10 && worst_spec < 1e-10 && dt < 30.0;
  return {ok, fmt("1000 maps per d in {2,4,8,16}: defect %.1e (tol 1e-12), det %.1e (tol 1e-10), "
                  "spectral %.1e (tol 1e-10), %.1fs (cap 30s)",
                  worst_defect, worst_det, worst_spec, dt)};
}

// ---------------------------------------------------------------------------
// 2. Subgroup drop-in table.
// ---------------------------------------------------------------------------

int projection_rank(const SubgroupSpec& g) {
  const bool cx = g.field() == Field::Complex;
  const int ambient = (cx ? 2 : 1) * g.d * g.d;
  Matrix cols(ambient, ambient, Field::Real);
  int col = 0;
  for (int part = 0; part < (cx ? 2 : 1); ++part) {
    for (int r = 0; r < g.d; ++r) {
      for (int c = 0; c < g.d; ++c) {
        Matrix e(g.d, g.d, g.field());
        if (part == 0) {
          e.re(r, c) = 1.0;
        } else {
          e.im(r, c) = 1.0;
        }
        const Matrix pe = project_tangent(g, e);
        int row = 0;
        for (int rr = 0; rr < g.d; ++rr) {
          for (int cc = 0; cc < g.d; ++cc) cols.re(row++, col) = pe.re(rr, cc);
        }
        if (cx) {
          for (int rr = 0; rr < g.d; ++rr) {
            for (int cc = 0; cc < g.d; ++cc) cols.re(row++, col) = pe.im(rr, cc);
          }
        }
        ++col;
      }
    }
  }
  const Svd f = svd(cols);
  const double smax = f.sigma.empty() ? 0.0 : f.sigma.front();
  int rank = 0;
  for (const double s : f.sigma) {
    if (s > 1e-9 * smax) ++rank;
  }
  return rank;
}

Outcome criterion_subgroup_table() {
  const double t0 = now_s();
  Rng rng(77);
  const std::vector<SubgroupSpec> specs = {
      {SubgroupFamily::U, 3},  {SubgroupFamily::SU, 3},   {SubgroupFamily::O, 4},
      {SubgroupFamily::SO, 4}, {SubgroupFamily::Torus, 4}};
  double worst_idem = 0.0, worst_token = 0.0;
  std::string rank_note;
  bool ranks_ok = true;
  for (const SubgroupSpec& g : specs) {
    for (int k = 0; k < 8; ++k) {
      const Matrix x = random_gaussian(g.d, g.d, g.field(), rng);
      const Matrix p1 = project_tangent(g, x);
      worst_idem = std::max(worst_idem, max_abs_diff(project_tangent(g, p1), p1));
    }
    const int rank = projection_rank(g);
    if (rank != g.algebra_dim()) {
      ranks_ok = false;
      rank_note += fmt(" %s rank %d != %d;", g.name().c_str(), rank, g.algebra_dim());
    }
    const RnnParams model = make_rnn(g, 6, MixingMode::LinearMix, UpdateMap::Expm, rng);
    const TokenGroups tg = materialize_token_groups(model);
    for (const Matrix& m : tg.emb) worst_token = std::max(worst_token, group_defect(m));
    for (const Matrix& m : tg.proto) worst_token = std::max(worst_token, group_defect(m));
  }
  const double dt = now_s() - t0;
  const bool ok = worst_idem < 1e-12 && ranks_ok && worst_token < 1e-12 && dt < 30.0;
  return {ok, fmt("five families: idempotence %.1e (tol 1e-12), projection ranks %s%s, "
                  "token defect %.1e (tol 1e-12), %.1fs (cap 30s)",
                  worst_idem, ranks_ok ? "all exact" : "MISMATCH", rank_note.c_str(), worst_token,
                  dt)};
}

// ---------------------------------------------------------------------------
// 3. Attention template vs straight-line transcription.
// ---------------------------------------------------------------------------

Outcome criterion_transcription() {
  const double t0 = now_s();
  Rng rng(41);
  const SubgroupSpec g{SubgroupFamily::U, 4};
  const int vocab = 5, layers = 2;
  const FormerParams p =
      make_former(g, vocab, layers, MixingMode::Identity, MixingMode::Identity, UpdateMap::Expm,
                  rng);
  const std::vector<int> tokens{2, 0, 4};
  const ForwardResult got = former_forward(p, tokens);

  // Oracle: complex arithmetic end to end, reference exponential, naive
  // softmax. State update per layer: attention average V_i, relative tangent
  // z_i = skewh(H_i^* V_i), half-step H~_i = H_i Exp(z_i), grounding tangent
  // g_i = skewh(H~_i^* M_{x_i}), next state H~_i Exp(g_i).
  std::vector<CMat> emb, proto;
  for (const TokenParams& tp : p.embeddings) {
    emb.push_back(c_exp_ref(c_skewh(to_c(tp.B))));
    proto.push_back(c_exp_ref(c_skewh(to_c(tp.C))));
  }
  const double tau_attn = std::exp(p.log_tau_attn.re(0, 0));
  const double tau = std::exp(p.readout.log_tau.re(0, 0));

  std::vector<CMat> states;
  for (const int tok : tokens) states.push_back(emb[static_cast<size_t>(tok)]);
  for (int l = 0; l < layers; ++l) {
    const double slope = p.layers[static_cast<size_t>(l)].alibi_slope;
    std::vector<CMat> next;
    for (size_t i = 0; i < states.size(); ++i) {
      std::vector<double> score(i + 1);
      double mx = -1e300;
      for (size_t j = 0; j <= i; ++j) {
        score[j] = tau_attn * c_re_tr_adj(states[i], states[j]) -
                   slope * static_cast<double>(i - j);
        mx = std::max(mx, score[j]);
      }
      double z = 0.0;
      for (size_t j = 0; j <= i; ++j) {
        score[j] = std::exp(score[j] - mx);
        z += score[j];
      }
      CMat v(g.d);
      for (size_t j = 0; j <= i; ++j) {
        for (size_t k = 0; k < v.a.size(); ++k) v.a[k] += (score[j] / z) * states[j].a[k];
      }
      const CMat zt = c_skewh(c_mul(c_adjoint(states[i]), v));
      const CMat htil = c_mul(states[i], c_exp_ref(zt));
      const CMat gt =
          c_skewh(c_mul(c_adjoint(htil), emb[static_cast<size_t>(tokens[i])]));
      next.push_back(c_mul(htil, c_exp_ref(gt)));
    }
    states = next;
  }

  double worst = 0.0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    worst = std::max(worst, c_diff(states[i], got.states[i]));
    for (int v = 0; v < vocab; ++v) {
      const double want =
          tau * c_re_tr_adj(states[i], proto[static_cast<size_t>(v)]) + p.readout.bias.re(v, 0);
      worst = std::max(worst, std::fabs(got.logits[i].re(v, 0) - want));
    }
  }
  const double dt = now_s() - t0;
  const bool ok = worst < 1e-12 && dt < 5.0;
  return {ok, fmt("d=4 T=3 L=2 states+logits vs independent transcription: %.1e (tol 1e-12), "
                  "%.1fs (cap 5s)",
                  worst, dt)};
}

// ---------------------------------------------------------------------------
// 4. Gradients vs central finite differences, every coordinate.
// ---------------------------------------------------------------------------

template <class P>
double fd_max_rel_err(const P& base, const std::vector<int>& toks, const std::vector<int>& tgts) {
  const ParamStore ps = to_store(base);
  Tape t;
  const LossGraph lg = build_loss(t, base, toks, tgts);
  const GradMap gm = t.backward(lg.loss);
  std::vector<Matrix> grads;
  grads.reserve(lg.binding.vars.size());
  for (const Var v : lg.binding.vars) grads.push_back(gm.at(v.id));
  auto f = [&](const ParamStore& q) {
    P m = base;
    load_from_store(m, q);
    Tape tt;
    const LossGraph g2 = build_loss(tt, m, toks, tgts);
    return tt.value(g2.loss).re(0, 0);
  };
  return finite_diff_check(f, ps, grads, 1e-4, 1.0).max_rel_err;
}

Outcome criterion_gradients() {
  const double t0 = now_s();
  Rng rng(1303);
  const std::vector<int> toks{0, 2, 1, 4, 3, 0};
  const std::vector<int> tgts{2, 1, 4, 3, 0, 2};
  const RnnParams rnn =
      make_rnn(SubgroupSpec{SubgroupFamily::SO, 4}, 5, MixingMode::LinearMix, UpdateMap::Expm,
               rng);
  const double err_rnn = fd_max_rel_err(rnn, toks, tgts);
  const FormerParams former =
      make_former(SubgroupSpec{SubgroupFamily::U, 4}, 5, 1, MixingMode::LinearMix,
                  MixingMode::LinearMix, UpdateMap::Expm, rng);
  const double err_former = fd_max_rel_err(former, toks, tgts);
  const double dt = now_s() - t0;
  const bool ok = err_rnn < 1e-6 && err_former < 1e-6 && dt < 120.0;
  return {ok, fmt("all coordinates, d=4 V=5 T=6: rnn %.1e, 1-layer attention %.1e "
                  "(tol 1e-6), %.1fs (cap 120s)",
                  err_rnn, err_former, dt)};
}

// ---------------------------------------------------------------------------
// 5. Structural axioms: causality, long-run closure, local-update factoring.
// ---------------------------------------------------------------------------

Outcome criterion_axioms() {
  const double t0 = now_s();
  Rng rng(555);
  std::string fail;

  // Causality: flipping a token must leave every earlier logit bit-identical
  // and must change the logit at the flip.
  {
    const RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::SO, 4}, 5, MixingMode::LinearMix,
                                 UpdateMap::Expm, rng);
    const TokenGroups tg = materialize_token_groups(p);
    std::vector<int> toks{0, 1, 2, 3, 4, 0, 1, 2, 3};
    const ForwardResult a = rnn_forward(p, tg, toks);
    toks[5] = 4;
    const ForwardResult b = rnn_forward(p, tg, toks);
    for (size_t i = 0; i < 5; ++i) {
      if (!bits_equal(a.logits[i], b.logits[i])) fail += " rnn prefix logit changed;";
    }
    if (bits_equal(a.logits[5], b.logits[5])) fail += " rnn flip had no effect;";
  }
  {
    const FormerParams p = make_former(SubgroupSpec{SubgroupFamily::U, 3}, 4, 2,
                                       MixingMode::LinearMix, MixingMode::PerDirectionScale,
                                       UpdateMap::Expm, rng);
    const TokenGroups tg = materialize_token_groups(p);
    std::vector<int> toks{0, 1, 2, 3, 1};
    const ForwardResult a = former_forward(p, tg, toks);
    toks[4] = 0;
    const ForwardResult b = former_forward(p, tg, toks);
    for (size_t i = 0; i < 4; ++i) {
      if (!bits_equal(a.logits[i], b.logits[i])) fail += " attention prefix logit changed;";
    }
    if (bits_equal(a.logits[4], b.logits[4])) fail += " attention flip had no effect;";
  }

  // Closure: 10^4 recurrent steps under the reprojection schedule.
  double worst_drift = 0.0;
  {
    const RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::SO, 4}, 3, MixingMode::LinearMix,
                                 UpdateMap::Expm, rng);
    std::vector<int> toks(10000);
    for (size_t t = 0; t < toks.size(); ++t) toks[t] = static_cast<int>((t * 7 + t / 13) % 3);
    const TraceRun tr = trace_run(p, toks, 1);
    for (const StepTrace& s : tr.records) worst_drift = std::max(worst_drift, s.drift);
    if (worst_drift >= 1e-8) fail += fmt(" drift %.1e over 10^4 steps;", worst_drift);
  }

  // Local updates: every transition replays bit-for-bit as H * Exp(A) with A
  // the recorded tangent, including the scheduled reprojections, and every A
  // lies in the tangent space.
  {
    const RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::SU, 3}, 4, MixingMode::LinearMix,
                                 UpdateMap::Expm, rng);
    const TokenGroups tg = materialize_token_groups(p);
    std::vector<int> toks(200);
    for (size_t t = 0; t < toks.size(); ++t) toks[t] = static_cast<int>((t * 5 + 1) % 4);
    std::vector<Matrix> tangents;
    const ForwardResult fr = rnn_forward(p, tg, toks, &tangents);
    Matrix h = p.h0;
    for (size_t t = 0; t < toks.size(); ++t) {
      if (!is_tangent(p.spec, tangents[t])) fail += " recovered update left the algebra;";
      h = matmul(h, expm(tangents[t]));
      if ((static_cast<int>(t) + 1) % kReprojectEvery == 0) h = reproject_orthogonal(h);
      if (!bits_equal(h, fr.states[t])) {
        fail += fmt(" factoring replay diverged at step %zu;", t);
        break;
      }
    }
  }

  const double dt = now_s() - t0;
  const bool ok = fail.empty();
  return {ok, fmt("causality bit-exact, 10^4-step drift %.1e (tol 1e-8), 200-step H*Exp(A) "
                  "replay bit-exact%s, %.1fs",
                  worst_drift, ok ? "" : fail.c_str(), dt)};
}

// ---------------------------------------------------------------------------
// 6. Attention weights are invariant under global conjugation.
// ---------------------------------------------------------------------------

Outcome criterion_conjugation() {
  const double t0 = now_s();
  Rng rng(606);
  double worst = 0.0;
  for (const SubgroupSpec g : {SubgroupSpec{SubgroupFamily::U, 3},
                               SubgroupSpec{SubgroupFamily::SO, 4}}) {
    std::vector<Matrix> states;
    for (int i = 0; i < 7; ++i) {
      states.push_back(expm(project_tangent(g, random_gaussian(g.d, g.d, g.field(), rng))));
    }
    const Matrix q = expm(project_tangent(g, random_gaussian(g.d, g.d, g.field(), rng)));
    std::vector<Matrix> conj;
    for (const Matrix& h : states) conj.push_back(matmul(matmul(q, h), adjoint(q)));
    const double tau = 0.9, slope = 1.0 / 256.0;
    const std::vector<Matrix> a = attention_weights(g, tau, states, slope);
    const std::vector<Matrix> b = attention_weights(g, tau, conj, slope);
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, max_abs_diff(a[i], b[i]));
  }
  const double dt = now_s() - t0;
  const bool ok = worst < 1e-12;
  return {ok, fmt("weights under H -> QHQ^* on U(3) and SO(4): %.1e (tol 1e-12), %.1fs", worst,
                  dt)};
}

// ---------------------------------------------------------------------------
// 7. Learning smoke test on a zero-entropy corpus.
// ---------------------------------------------------------------------------

Outcome criterion_smoke() {
  std::string text;
  for (int i = 0; i < 5000; ++i) text += "ab";
  const Corpus corpus = make_corpus(text, 0.8, 0.1);
  TrainConfig tc;
  tc.batch_size = 16;
  tc.seq_len = 32;
  tc.max_steps = 200;
  tc.max_epochs = 100;
  tc.seed = 99;
  const SubgroupSpec g{SubgroupFamily::SO, 6};

  std::string detail;
  bool ok = true;
  const auto judge = [&](const char* name, const TrainRun& run, double dt) {
    const bool good = run.best_val_bpc < 0.2 && dt < 60.0;
    ok = ok && good;
    detail += fmt(" %s %.3f/%.0fs%s", name, run.best_val_bpc, dt, good ? "" : " FAIL");
  };
  for (const MixingMode mm : {MixingMode::Identity, MixingMode::LinearMix}) {
    Rng rng(7);
    RnnParams p = make_rnn(g, corpus.vocab_size(), mm, UpdateMap::Expm, rng);
    const double t0 = now_s();
    const TrainRun run = train_model(p, corpus, tc);
    judge(mm == MixingMode::Identity ? "rnn/identity" : "rnn/linear", run, now_s() - t0);
  }
  for (const MixingMode mm : {MixingMode::Identity, MixingMode::LinearMix}) {
    Rng rng(7);
    FormerParams p = make_former(g, corpus.vocab_size(), 1, mm, mm, UpdateMap::Expm, rng);
    const double t0 = now_s();
    const TrainRun run = train_model(p, corpus, tc);
    judge(mm == MixingMode::Identity ? "attn/identity" : "attn/linear", run, now_s() - t0);
  }
  return {ok, fmt("val BPC within 200 steps (tol < 0.2, cap 60s each):%s", detail.c_str())};
}

// ---------------------------------------------------------------------------
// 8. Corpus stretch targets: reporting only, never gating.
// ---------------------------------------------------------------------------

Outcome criterion_stretch(const char* supplied_path) {
  const char* env = std::getenv("OSM_TS_PATH");
  const std::string path = supplied_path != nullptr && *supplied_path != '\0'
                               ? std::string(supplied_path)
                               : (env != nullptr ? std::string(env) : std::string());
  if (path.empty()) {
    return {true,
            "skipped: needs an externally supplied corpus (set OSM_TS_PATH); targets "
            "val/test 2.254/2.464 +-0.15 BPC and linear-mix <= no-mix ordering; not gating"};
  }

  // Shortened schedule: enough to log the numbers and the mixing ordering,
  // not the paper's full protocol. Outcomes are reported, never gating.
  std::string detail = "corpus " + path + ":";
  try {
    const std::string text = read_text_file(path);
    const Corpus corpus = make_corpus(text, 0.8, 0.1);
    ModelConfig tmpl;
    tmpl.kind = "osmformer";
    tmpl.family = SubgroupFamily::U;
    tmpl.d = 4;
    tmpl.layers = 2;
    tmpl.mixing_attn = MixingMode::LinearMix;
    tmpl.mixing_ground = MixingMode::LinearMix;
    const auto pick = sweep_pick(tmpl, corpus.vocab_size(), 100000, 2, 16);
    if (!pick) return {true, detail + " no carrier size near 100K params; logged, not gating"};
    tmpl.d = pick->d;
    TrainConfig tc;
    tc.batch_size = 16;
    tc.seq_len = 64;
    tc.max_steps = 2000;
    tc.max_epochs = 1000;
    tc.threads = 4;
    tc.seed = 1;

    Rng r1(1);
    FormerParams lin = make_former(SubgroupSpec{tmpl.family, tmpl.d}, corpus.vocab_size(),
                                   tmpl.layers, MixingMode::LinearMix, MixingMode::LinearMix,
                                   UpdateMap::Expm, r1);
    const TrainRun lin_run = train_model(lin, corpus, tc);
    Rng r2(1);
    FormerParams nom = make_former(SubgroupSpec{tmpl.family, tmpl.d}, corpus.vocab_size(),
                                   tmpl.layers, MixingMode::Identity, MixingMode::Identity,
                                   UpdateMap::Expm, r2);
    const TrainRun nom_run = train_model(nom, corpus, tc);

    detail += fmt(" ~%lld params d=%d; linear-mix val/test %.3f/%.3f vs targets 2.254/2.464 "
                  "(+-0.15 on the full protocol); no-mix val %.3f; ordering %s; shortened "
                  "schedule, logged, not gating",
                  static_cast<long long>(pick->params), tmpl.d, lin_run.best_val_bpc,
                  lin_run.test_bpc, nom_run.best_val_bpc,
                  lin_run.best_val_bpc <= nom_run.best_val_bpc ? "holds" : "DID NOT HOLD");
  } catch (const std::exception& e) {
    detail += fmt(" attempt failed (%s); logged, not gating", e.what());
  }
  return {true, detail};
}

// ---------------------------------------------------------------------------
// 9. Readout channel split.
// ---------------------------------------------------------------------------

Outcome criterion_channels() {
  const double t0 = now_s();
  Rng rng(909);
  std::string fail;

  // Dimensions always partition the algebra.
  {
    const SubgroupSpec g{SubgroupFamily::U, 3};
    for (const int vocab : {1, 3, 7, 12}) {
      const RnnParams p = make_rnn(g, vocab, MixingMode::Identity, UpdateMap::Expm, rng);
      const ChannelSplit cs = channel_split(p, Matrix::identity(g.d, g.field()));
      if (cs.predictive_dim + cs.memory_dim != g.algebra_dim()) {
        fail += fmt(" U(3) V=%d dims %d+%d != %d;", vocab, cs.predictive_dim, cs.memory_dim,
                    g.algebra_dim());
      }
    }
  }

  // Zero readout temperature blinds the readout completely.
  {
    const SubgroupSpec g{SubgroupFamily::SO, 3};
    RnnParams p = make_rnn(g, 4, MixingMode::Identity, UpdateMap::Expm, rng);
    p.readout.log_tau.re(0, 0) = -1e308;  // exp underflows to exactly zero
    const ChannelSplit cs = channel_split(p, Matrix::identity(g.d, g.field()));
    if (cs.predictive_dim != 0) fail += fmt(" tau=0 predictive %d != 0;", cs.predictive_dim);
  }

  // Generic prototypes with V >= n_g leave no memory directions.
  for (const SubgroupSpec g : {SubgroupSpec{SubgroupFamily::SO, 3},
                               SubgroupSpec{SubgroupFamily::U, 2},
                               SubgroupSpec{SubgroupFamily::Torus, 4}}) {
    const int vocab = g.algebra_dim() + 3;
    const RnnParams p = make_rnn(g, vocab, MixingMode::Identity, UpdateMap::Expm, rng);
    const ChannelSplit cs = channel_split(p, Matrix::identity(g.d, g.field()));
    if (cs.memory_dim != 0) {
      fail += fmt(" %s V=%d memory %d != 0;", g.name().c_str(), vocab, cs.memory_dim);
    }
  }

  const double dt = now_s() - t0;
  const bool ok = fail.empty() && dt < 10.0;
  return {ok, fmt("dims partition n_g, tau=0 -> predictive 0, generic V >= n_g -> memory 0%s, "
                  "%.1fs (cap 10s)",
                  fail.empty() ? "" : fail.c_str(), dt)};
}

// ---------------------------------------------------------------------------
// 10. Reproducibility of the metrics stream.
// ---------------------------------------------------------------------------

std::string strip_wallclock(const std::string& text) {
  std::istringstream ss(text);
  std::string line, out;
  while (std::getline(ss, line)) {
    const size_t at = line.find("\"wallclock_s\":");
    if (at != std::string::npos) {
      const size_t comma = line.find(',', at);
      line.erase(at, comma == std::string::npos ? std::string::npos : comma - at + 1);
    }
    out += line;
    out += '\n';
  }
  return out;
}

Outcome criterion_reproducibility() {
  const double t0 = now_s();
  std::string text;
  for (int i = 0; i < 5000; ++i) text += "ab";
  const Corpus corpus = make_corpus(text, 0.8, 0.1);
  TrainConfig tc;
  tc.batch_size = 16;
  tc.seq_len = 32;
  tc.max_steps = 60;
  tc.max_epochs = 100;
  tc.seed = 99;

  auto run_once = [&](std::string& metrics, ParamStore& params) {
    Rng rng(7);
    RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::SO, 6}, corpus.vocab_size(),
                           MixingMode::LinearMix, UpdateMap::Expm, rng);
    std::ostringstream os;
    train_model(p, corpus, tc, &os);
    metrics = os.str();
    params = to_store(p);
  };
  std::string m1, m2;
  ParamStore p1, p2;
  run_once(m1, p1);
  run_once(m2, p2);

  bool params_same = p1.values.size() == p2.values.size();
  for (size_t i = 0; params_same && i < p1.values.size(); ++i) {
    params_same = bits_equal(p1.values[i], p2.values[i]);
  }
  const bool streams_same = !m1.empty() && strip_wallclock(m1) == strip_wallclock(m2);
  const double dt = now_s() - t0;
  const bool ok = streams_same && params_same;
  return {ok, fmt("two identical runs: metrics streams byte-identical outside the wall-time "
                  "field (%s, %zu bytes), final parameters bit-identical (%s), %.1fs",
                  streams_same ? "yes" : "NO", m1.size(), params_same ? "yes" : "NO", dt)};
}

}  // namespace

int main(int argc, char** argv) {
  const char* stretch_path = argc > 1 ? argv[1] : "";
  struct Row {
    int id;
    const char* name;
    std::function<Outcome()> fn;
  };
  const std::vector<Row> rows = {
      {1, "group-map correctness", criterion_group_maps},
      {2, "subgroup drop-in table", criterion_subgroup_table},
      {3, "attention-template transcription", criterion_transcription},
      {4, "gradient correctness", criterion_gradients},
      {5, "structural axioms", criterion_axioms},
      {6, "conjugation invariance", criterion_conjugation},
      {7, "learning smoke test", criterion_smoke},
      {8, "corpus stretch targets", [&] { return criterion_stretch(stretch_path); }},
      {9, "readout channel split", criterion_channels},
      {10, "reproducibility", criterion_reproducibility},
  };

  bool all = true;
  for (const Row& row : rows) {
    Outcome o;
    try {
      o = row.fn();
    } catch (const std::exception& e) {
      o = {false, fmt("threw: %s", e.what())};
    }
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", row.id, row.name,
                o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  std::printf("%s\n", all ? "acceptance: 10/10 criteria hold"
                          : "acceptance: FAILURES reported above");
  return all ? 0 : 1;
}
