#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "osm/autodiff.hpp"
#include "osm/checkpoint.hpp"
#include "osm/config.hpp"
#include "osm/diagnostics.hpp"
#include "osm/expm.hpp"
#include "osm/linalg.hpp"
#include "osm/models.hpp"
#include "osm/subgroup.hpp"
#include "osm/training.hpp"

// Self-contained invariant checks, runnable from the CLI without any test
// framework. Fast checks cover structural identities that must hold exactly
// or to roundoff; full checks add the expensive ones (finite differences,
// long rollouts, end-to-end determinism).

namespace osm {

enum class VerifyLevel { Fast, Full };

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_err = 0.0;
  std::string note;
};

struct VerifyOptions {
  VerifyLevel level = VerifyLevel::Fast;
  // Fault-injection hook: perturbs one projected matrix so the idempotence
  // check must report a failure. Used to prove failures are not swallowed.
  bool corrupt_skew = false;
};

namespace detail {

inline std::vector<SubgroupSpec> verify_specs() {
  return {SubgroupSpec{SubgroupFamily::U, 3}, SubgroupSpec{SubgroupFamily::SU, 3},
          SubgroupSpec{SubgroupFamily::O, 4}, SubgroupSpec{SubgroupFamily::SO, 4},
          SubgroupSpec{SubgroupFamily::Torus, 4}};
}

inline CheckResult check_projection_idempotence(bool corrupt) {
  CheckResult r{"projection-idempotence", false, 0.0, ""};
  Rng rng(101);
  for (const SubgroupSpec& g : verify_specs()) {
    for (int trial = 0; trial < 4; ++trial) {
      const Matrix x = random_gaussian(g.d, g.d, g.field(), rng);
      Matrix p1 = project_tangent(g, x);
      if (corrupt) p1.re(0, 1) += 1e-3;
      const Matrix p2 = project_tangent(g, p1);
      r.max_err = std::max(r.max_err, max_abs(sub(p2, p1)));
    }
  }
  r.pass = r.max_err < 1e-12;
  return r;
}

inline CheckResult check_tangent_roundtrip() {
  CheckResult r{"tangent-roundtrip", false, 0.0, ""};
  Rng rng(102);
  for (const SubgroupSpec& g : verify_specs()) {
    const Matrix x = project_tangent(g, random_gaussian(g.d, g.d, g.field(), rng));
    const TangentCoords c = vec_g(g, x);
    if (static_cast<int>(c.values.size()) != g.algebra_dim()) {
      r.note = "coordinate count mismatch for " + g.name();
      return r;
    }
    r.max_err = std::max(r.max_err, max_abs(sub(vec_g_inv(c), x)));
  }
  r.pass = r.max_err < 1e-12;
  return r;
}

inline CheckResult check_exp_on_group() {
  CheckResult r{"exp-on-group", false, 0.0, ""};
  Rng rng(103);
  for (const SubgroupSpec& g : verify_specs()) {
    const Matrix a = project_tangent(g, random_gaussian(g.d, g.d, g.field(), rng));
    r.max_err = std::max(r.max_err, group_defect(expm(a)));
    r.max_err = std::max(r.max_err, group_defect(cayley(a)));
    if (g.family == SubgroupFamily::SO) {
      r.max_err = std::max(r.max_err, std::abs(det_real(expm(a)) - 1.0));
    }
  }
  r.pass = r.max_err < 1e-12;
  return r;
}

inline CheckResult check_embedding_on_group() {
  CheckResult r{"embedding-on-group", false, 0.0, ""};
  Rng rng(104);
  const RnnParams p =
      make_rnn(SubgroupSpec{SubgroupFamily::SO, 4}, 7, MixingMode::LinearMix, UpdateMap::Expm, rng);
  const TokenGroups tg = materialize_token_groups(p);
  for (const Matrix& m : tg.emb) r.max_err = std::max(r.max_err, group_defect(m));
  for (const Matrix& m : tg.proto) r.max_err = std::max(r.max_err, group_defect(m));
  r.pass = r.max_err < 1e-12;
  return r;
}

inline CheckResult check_attention_rows() {
  CheckResult r{"attention-rows", false, 0.0, ""};
  Rng rng(105);
  const SubgroupSpec g{SubgroupFamily::U, 3};
  std::vector<Matrix> states;
  for (int i = 0; i < 6; ++i) {
    states.push_back(expm(project_tangent(g, random_gaussian(g.d, g.d, g.field(), rng))));
  }
  const std::vector<Matrix> alpha = attention_weights(g, 0.7, states, 1.0 / 256.0);
  for (const Matrix& a : alpha) {
    double s = 0.0;
    for (int i = 0; i < a.rows(); ++i) {
      for (int j = 0; j < a.cols(); ++j) s += a.re(i, j);
    }
    r.max_err = std::max(r.max_err, std::abs(s - 1.0));
  }
  r.pass = r.max_err < 1e-12;
  return r;
}

inline CheckResult check_loss_identities() {
  CheckResult r{"loss-identities", false, 0.0, ""};
  {
    const std::vector<Matrix> logits(4, Matrix(65, 1, Field::Real));
    const LossValue lv = loss_bpc(logits, {0, 17, 42, 64});
    r.max_err = std::max(r.max_err, std::abs(lv.bpc - std::log2(65.0)));
  }
  {
    const std::vector<Matrix> logits(3, Matrix(2, 1, Field::Real));
    const LossValue lv = loss_bpc(logits, {0, 1, 0});
    if (lv.bpc != 1.0) {
      r.note = "two-way uniform split must cost exactly one bit";
      r.max_err = std::max(r.max_err, std::abs(lv.bpc - 1.0));
      return r;
    }
  }
  r.pass = r.max_err < 1e-12;
  return r;
}

inline CheckResult check_clip_bound() {
  CheckResult r{"clip-bound", false, 0.0, ""};
  Rng rng(106);
  std::vector<Matrix> grads;
  for (int i = 0; i < 3; ++i) grads.push_back(random_gaussian(4, 4, Field::Complex, rng, 10.0));
  const double pre = clip_gradients(grads, 1.0);
  if (pre <= 1.0) {
    r.note = "test gradients unexpectedly small";
    return r;
  }
  double post_sq = 0.0;
  for (const Matrix& m : grads) {
    for (double v : m.re_data()) post_sq += v * v;
    for (double v : m.im_data()) post_sq += v * v;
  }
  const double post = std::sqrt(post_sq);
  r.max_err = std::max(0.0, post - 1.0);
  r.pass = post <= 1.0 + 1e-12;
  return r;
}

inline CheckResult check_adam_frozen() {
  CheckResult r{"adam-frozen", false, 0.0, ""};
  Rng rng(107);
  RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::SU, 2}, 5, MixingMode::PerDirectionScale,
                         UpdateMap::Expm, rng);
  ParamStore ps = to_store(p);
  const ParamStore before = ps;
  AdamState st = make_adam_state(ps);
  std::vector<Matrix> zeros;
  for (const Matrix& m : ps.values) zeros.push_back(Matrix(m.rows(), m.cols(), m.field()));
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  for (int k = 0; k < 3; ++k) adam_step(ps, zeros, st, cfg);
  for (size_t i = 0; i < ps.values.size(); ++i) {
    r.max_err = std::max(r.max_err, max_abs(sub(ps.values[i], before.values[i])));
  }
  r.pass = r.max_err == 0.0;
  return r;
}

inline CheckResult check_checkpoint_roundtrip() {
  CheckResult r{"checkpoint-roundtrip", false, 0.0, ""};
  Rng rng(108);
  RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::SO, 3}, 4, MixingMode::LinearMix,
                         UpdateMap::Cayley, rng);
  ParamStore ps = to_store(p);
  AdamState st = make_adam_state(ps);
  st.t = 12;
  const Checkpoint ck =
      make_checkpoint(ps, st, 34, 0x1234abcdu, std::vector<uint8_t>{'a', 'b'}, "{\"k\":1}");
  const std::string bytes = serialize_checkpoint(ck);
  const Checkpoint back = parse_checkpoint(bytes);
  if (serialize_checkpoint(back) != bytes) {
    r.note = "reserialization changed bytes";
    return r;
  }
  ParamStore ps2 = ps;
  for (Matrix& m : ps2.values) m = Matrix(m.rows(), m.cols(), m.field());
  AdamState st2 = make_adam_state(ps2);
  restore_training(back, ps2, st2);
  for (size_t i = 0; i < ps.values.size(); ++i) {
    r.max_err = std::max(r.max_err, max_abs(sub(ps.values[i], ps2.values[i])));
  }
  if (st2.t != st.t) {
    r.note = "step counter lost";
    return r;
  }
  r.pass = r.max_err == 0.0;
  return r;
}

template <class P>
CheckResult check_gradient_fd(const std::string& name, const P& p, const std::vector<int>& toks,
                              const std::vector<int>& tgts) {
  CheckResult r{name, false, 0.0, ""};
  const ParamStore ps = to_store(p);
  Tape t;
  const LossGraph lg = build_loss(t, p, toks, tgts);
  const GradMap gm = t.backward(lg.loss);
  std::vector<Matrix> grads;
  grads.reserve(lg.binding.vars.size());
  for (Var v : lg.binding.vars) grads.push_back(gm.at(v.id));
  auto f = [&](const ParamStore& q) {
    P m = p;
    load_from_store(m, q);
    Tape tt;
    const LossGraph g2 = build_loss(tt, m, toks, tgts);
    return tt.value(g2.loss).re(0, 0);
  };
  const FdReport rep = finite_diff_check(f, ps, grads, 1e-4, 0.25, 0xfeed);
  r.max_err = rep.max_rel_err;
  r.note = "worst " + rep.worst_coord;
  r.pass = r.max_err < 1e-6;
  return r;
}

inline CheckResult check_drift_rollout() {
  CheckResult r{"drift-rollout", false, 0.0, ""};
  Rng rng(109);
  const RnnParams p =
      make_rnn(SubgroupSpec{SubgroupFamily::SO, 4}, 3, MixingMode::LinearMix, UpdateMap::Expm, rng);
  const TokenGroups tg = materialize_token_groups(p);
  std::vector<int> toks(10000);
  for (size_t t = 0; t < toks.size(); ++t) {
    toks[t] = static_cast<int>((t * 7 + t / 13) % 3);
  }
  (void)tg;
  const TraceRun tr = trace_run(p, toks, 100);
  for (const StepTrace& s : tr.records) r.max_err = std::max(r.max_err, s.drift);
  r.pass = r.max_err < 1e-8;
  return r;
}

inline CheckResult check_channel_dims() {
  CheckResult r{"channel-dims", false, 0.0, ""};
  Rng rng(110);
  const SubgroupSpec g{SubgroupFamily::U, 3};
  const int n_g = g.algebra_dim();
  for (int vocab : {1, 3, 7, 12}) {
    const RnnParams p = make_rnn(g, vocab, MixingMode::Identity, UpdateMap::Expm, rng);
    const Matrix h = Matrix::identity(g.d, g.field());
    const ChannelSplit cs = channel_split(p, h);
    if (cs.predictive_dim + cs.memory_dim != n_g) {
      r.note = "dimensions do not partition the algebra";
      return r;
    }
    if (cs.predictive_dim > std::min(vocab, n_g)) {
      r.note = "predictive dimension exceeds its bound";
      return r;
    }
    const Matrix p2 = matmul(cs.p_pred, cs.p_pred);
    r.max_err = std::max(r.max_err, max_abs(sub(p2, cs.p_pred)));
  }
  r.pass = r.max_err < 1e-12;
  return r;
}

inline CheckResult check_train_determinism() {
  CheckResult r{"train-determinism", false, 0.0, ""};
  std::string text;
  for (int i = 0; i < 400; ++i) text += "ab";
  const Corpus corpus = make_corpus(text, 0.8, 0.1);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.seq_len = 8;
  cfg.max_epochs = 2;
  cfg.seed = 5;
  auto run_once = [&](std::string& metrics, ParamStore& out) {
    Rng rng(5);
    RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::Torus, 3}, corpus.vocab_size(),
                           MixingMode::PerDirectionScale, UpdateMap::Expm, rng);
    std::ostringstream os;
    train_model(p, corpus, cfg, &os);
    metrics = os.str();
    out = to_store(p);
  };
  std::string m1, m2;
  ParamStore p1, p2;
  run_once(m1, p1);
  run_once(m2, p2);
  for (size_t i = 0; i < p1.values.size(); ++i) {
    r.max_err = std::max(r.max_err, max_abs(sub(p1.values[i], p2.values[i])));
  }
  if (r.max_err != 0.0) {
    r.note = "parameters differ between identical runs";
    return r;
  }
  // Metric lines match except the wallclock field, which measures real time.
  std::istringstream a(m1), b(m2);
  std::string la, lb;
  auto strip_wallclock = [](std::string s) {
    const size_t at = s.find("\"wallclock_s\":");
    if (at == std::string::npos) return s;
    const size_t comma = s.find(',', at);
    s.erase(at, comma == std::string::npos ? std::string::npos : comma - at + 1);
    return s;
  };
  while (true) {
    const bool ga = static_cast<bool>(std::getline(a, la));
    const bool gb = static_cast<bool>(std::getline(b, lb));
    if (ga != gb) {
      r.note = "metric row counts differ";
      return r;
    }
    if (!ga) break;
    if (strip_wallclock(la) != strip_wallclock(lb)) {
      r.note = "metric rows differ";
      return r;
    }
  }
  r.pass = true;
  return r;
}

}  // namespace detail

inline std::vector<CheckResult> run_verify(const VerifyOptions& opt) {
  std::vector<CheckResult> out;
  out.push_back(detail::check_projection_idempotence(opt.corrupt_skew));
  out.push_back(detail::check_tangent_roundtrip());
  out.push_back(detail::check_exp_on_group());
  out.push_back(detail::check_embedding_on_group());
  out.push_back(detail::check_attention_rows());
  out.push_back(detail::check_loss_identities());
  out.push_back(detail::check_clip_bound());
  out.push_back(detail::check_adam_frozen());
  out.push_back(detail::check_checkpoint_roundtrip());
  if (opt.level == VerifyLevel::Full) {
    Rng rng(111);
    {
      const RnnParams p = make_rnn(SubgroupSpec{SubgroupFamily::U, 2}, 5, MixingMode::LinearMix,
                                   UpdateMap::Expm, rng);
      out.push_back(detail::check_gradient_fd("gradient-fd-rnn", p, {0, 2, 1, 4, 3, 0},
                                              {2, 1, 4, 3, 0, 2}));
    }
    {
      const FormerParams p =
          make_former(SubgroupSpec{SubgroupFamily::SO, 3}, 5, 1, MixingMode::LinearMix,
                      MixingMode::PerDirectionScale, UpdateMap::Expm, rng);
      out.push_back(detail::check_gradient_fd("gradient-fd-former", p, {0, 2, 1, 4, 3},
                                              {2, 1, 4, 3, 0}));
    }
    out.push_back(detail::check_drift_rollout());
    out.push_back(detail::check_channel_dims());
    out.push_back(detail::check_train_determinism());
  }
  return out;
}

}  // namespace osm
