#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "osm/autodiff.hpp"
#include "osm/models.hpp"
#include "osm/rng.hpp"

// Character-level autoregressive training: byte corpus with contiguous
// splits, counter-addressed batch sampling (any step's batch can be
// regenerated from the seed alone, which is what makes checkpoint resume
// bit-exact), decoupled-weight-decay Adam, global-norm clipping, and a
// deterministic epoch loop with early stopping on validation BPC.

namespace osm {

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw InvalidInputError("unknown split '" + s + "' (expected train, val, or test)");
}

// Byte-level text with a sorted byte vocabulary and contiguous
// train / val / test spans in that order.
struct Corpus {
  std::vector<uint8_t> text;
  std::vector<uint8_t> vocab;   // sorted unique bytes of the whole text
  std::array<int, 256> id_of{}; // byte -> vocab id, -1 when absent
  size_t train_end = 0;         // [0, train_end)
  size_t val_end = 0;           // [train_end, val_end)

  int vocab_size() const { return static_cast<int>(vocab.size()); }

  int token_at(size_t pos) const { return id_of[text[pos]]; }

  std::pair<size_t, size_t> range(Split s) const {
    switch (s) {
      case Split::Train: return {0, train_end};
      case Split::Val: return {train_end, val_end};
      case Split::Test: return {val_end, text.size()};
    }
    throw InvalidInputError("corpus: unknown split");
  }

  size_t split_len(Split s) const {
    const auto [b, e] = range(s);
    return e - b;
  }
};

inline Corpus make_corpus_offsets(const std::string& text, size_t train_end, size_t val_end) {
  if (text.empty()) throw InvalidInputError("corpus: empty text");
  if (train_end == 0 || train_end > val_end || val_end > text.size()) {
    throw InvalidInputError("corpus: split offsets must satisfy 0 < train <= val <= size");
  }
  Corpus c;
  c.text.assign(text.begin(), text.end());
  c.train_end = train_end;
  c.val_end = val_end;
  std::array<bool, 256> seen{};
  for (uint8_t b : c.text) seen[b] = true;
  c.id_of.fill(-1);
  for (int b = 0; b < 256; ++b) {
    if (seen[static_cast<size_t>(b)]) {
      c.id_of[static_cast<size_t>(b)] = static_cast<int>(c.vocab.size());
      c.vocab.push_back(static_cast<uint8_t>(b));
    }
  }
  return c;
}

inline Corpus make_corpus(const std::string& text, double train_frac = 0.8,
                          double val_frac = 0.1) {
  if (!(train_frac > 0.0) || !(val_frac >= 0.0) || !(train_frac + val_frac <= 1.0)) {
    throw InvalidInputError("corpus: fractions must satisfy 0 < train, 0 <= val, train+val <= 1");
  }
  const size_t n = text.size();
  const size_t train_end = static_cast<size_t>(static_cast<double>(n) * train_frac);
  const size_t val_end =
      static_cast<size_t>(static_cast<double>(n) * (train_frac + val_frac));
  return make_corpus_offsets(text, train_end, val_end);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Batch sampling. Window starts are derived from (seed, step, element), so
// the stream is random-access: step k's batch needs no history.
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<std::vector<int>> inputs;   // B x T
  std::vector<std::vector<int>> targets;  // B x T, shifted one char ahead
};

class BatchStream {
 public:
  BatchStream(const Corpus& corpus, Split split, int seq_len, int batch_size, uint64_t seed)
      : corpus_(&corpus), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (seq_len < 2) throw InvalidInputError("batches: sequence length must be at least 2");
    if (batch_size < 1) throw InvalidInputError("batches: batch size must be positive");
    const auto [b, e] = corpus.range(split);
    begin_ = b;
    // A window consumes seq_len inputs plus one lookahead target.
    const size_t need = static_cast<size_t>(seq_len) + 1;
    if (e - b < need) {
      throw InvalidInputError("batches: split shorter than one window");
    }
    starts_ = e - b - need + 1;
    split_len_ = e - b;
  }

  int64_t batches_per_epoch() const {
    return static_cast<int64_t>(split_len_ /
                                (static_cast<size_t>(seq_len_) * static_cast<size_t>(batch_size_)));
  }

  Batch batch_at(int64_t step) const {
    Batch out;
    out.inputs.resize(static_cast<size_t>(batch_size_));
    out.targets.resize(static_cast<size_t>(batch_size_));
    for (int b = 0; b < batch_size_; ++b) {
      Rng rng(mix_seed(seed_, static_cast<uint64_t>(step), static_cast<uint64_t>(b)));
      const size_t off = begin_ + static_cast<size_t>(rng.uniform_int(
                                      static_cast<int64_t>(starts_)));
      auto& in = out.inputs[static_cast<size_t>(b)];
      auto& tg = out.targets[static_cast<size_t>(b)];
      in.reserve(static_cast<size_t>(seq_len_));
      tg.reserve(static_cast<size_t>(seq_len_));
      for (int t = 0; t < seq_len_; ++t) {
        in.push_back(corpus_->token_at(off + static_cast<size_t>(t)));
        tg.push_back(corpus_->token_at(off + static_cast<size_t>(t) + 1));
      }
    }
    return out;
  }

  int seq_len() const { return seq_len_; }
  int batch_size() const { return batch_size_; }

 private:
  const Corpus* corpus_;
  int seq_len_;
  int batch_size_;
  uint64_t seed_;
  size_t begin_ = 0;
  size_t starts_ = 0;
  size_t split_len_ = 0;
};

// ---------------------------------------------------------------------------
// Loss metric
// ---------------------------------------------------------------------------

inline constexpr double kLn2 = 0.69314718055994530942;

struct LossValue {
  double nats = 0.0;  // mean cross-entropy
  double bpc = 0.0;
};

inline LossValue loss_bpc(const std::vector<Matrix>& logits, const std::vector<int>& targets) {
  if (logits.empty() || logits.size() != targets.size()) {
    throw InvalidInputError("loss: one logit row per target required");
  }
  double nats = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const Matrix& row = logits[i];
    require_finite(row, "loss");
    if (targets[i] < 0 || targets[i] >= row.rows()) {
      throw InvalidInputError("loss: target id out of range");
    }
    nats += log_sum_exp_column(row) - row.re(targets[i], 0);
  }
  nats /= static_cast<double>(logits.size());
  return LossValue{nats, nats / kLn2};
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with decoupled weight decay. Decay is applied to the
// pre-step value, before the moment update, and never to temperatures
// (the decay mask rides on the parameter store).
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  int64_t t = 0;  // applied steps
};

inline AdamState make_adam_state(const ParamStore& ps) {
  AdamState st;
  st.m.reserve(ps.values.size());
  st.v.reserve(ps.values.size());
  for (const Matrix& p : ps.values) {
    st.m.emplace_back(p.rows(), p.cols(), p.field());
    st.v.emplace_back(p.rows(), p.cols(), p.field());
  }
  return st;
}

namespace detail {
inline void adam_plane(std::vector<double>& p, const std::vector<double>& g,
                       std::vector<double>& m, std::vector<double>& v, bool decay,
                       const AdamConfig& cfg, double bc1, double bc2) {
  for (size_t k = 0; k < p.size(); ++k) {
    if (decay) p[k] -= cfg.lr * cfg.weight_decay * p[k];
    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
    const double mhat = m[k] / bc1;
    const double vhat = v[k] / bc2;
    p[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}
}  // namespace detail

inline void adam_step(ParamStore& ps, const std::vector<Matrix>& grads, AdamState& st,
                      const AdamConfig& cfg) {
  if (grads.size() != ps.values.size() || st.m.size() != ps.values.size()) {
    throw InvalidInputError("adam: parameter, gradient and moment counts must match");
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < ps.values.size(); ++i) {
    Matrix& p = ps.values[i];
    const Matrix& g = grads[i];
    if (!p.same_shape(g)) throw InvalidInputError("adam: gradient shape mismatch");
    const bool decay = ps.decay[i] && cfg.weight_decay != 0.0;
    detail::adam_plane(p.re_data(), g.re_data(), st.m[i].re_data(), st.v[i].re_data(), decay,
                       cfg, bc1, bc2);
    detail::adam_plane(p.im_data(), g.im_data(), st.m[i].im_data(), st.v[i].im_data(), decay,
                       cfg, bc1, bc2);
  }
}

// Scales all gradients so the global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_gradients(std::vector<Matrix>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw InvalidInputError("clip: max norm must be positive");
  double sq = 0.0;
  for (const Matrix& g : grads) {
    for (double x : g.re_data()) sq += x * x;
    for (double x : g.im_data()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Matrix& g : grads) {
      for (double& x : g.re_data()) x *= s;
      for (double& x : g.im_data()) x *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Train configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 32;
  double clip_norm = 1.0;
  int patience = 50;  // epochs without strict val improvement before stopping
  int seq_len = 32;
  uint64_t seed = 1;
  int max_epochs = 1000;
  int eval_every = 1;   // epochs between validation passes
  int64_t max_steps = 0;  // optional hard cap on optimizer steps, 0 = none
  int threads = 1;

  void validate() const {
    if (!(lr >= 0.0)) throw InvalidInputError("config: lr must be nonnegative");
    if (!(weight_decay >= 0.0)) throw InvalidInputError("config: weight decay must be nonnegative");
    if (batch_size < 1) throw InvalidInputError("config: batch size must be positive");
    if (!(clip_norm > 0.0)) throw InvalidInputError("config: clip norm must be positive");
    if (patience < 1) throw InvalidInputError("config: patience must be positive");
    if (seq_len < 2) throw InvalidInputError("config: sequence length must be at least 2");
    if (max_epochs < 1) throw InvalidInputError("config: max epochs must be positive");
    if (eval_every < 1) throw InvalidInputError("config: eval cadence must be positive");
    if (max_steps < 0) throw InvalidInputError("config: max steps must be nonnegative");
    if (threads < 1) throw InvalidInputError("config: threads must be positive");
  }
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricRow {
  int64_t epoch = 0;
  int64_t step = 0;
  double train_bpc = 0.0;
  double val_bpc = 0.0;
  double wallclock_s = 0.0;
  double grad_norm = 0.0;
  double drift = 0.0;
};

// One line-delimited record per validation pass. %.17g round-trips doubles,
// so identical runs emit identical bytes except for wallclock_s.
inline std::string metric_row_json(const MetricRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"epoch\":%lld,\"step\":%lld,\"train_bpc\":%.17g,\"val_bpc\":%.17g,"
                "\"wallclock_s\":%.17g,\"grad_norm\":%.17g,\"drift\":%.17g}",
                static_cast<long long>(r.epoch), static_cast<long long>(r.step), r.train_bpc,
                r.val_bpc, r.wallclock_s, r.grad_norm, r.drift);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Forward/loss dispatch over the two templates
// ---------------------------------------------------------------------------

inline LossGraph build_loss(Tape& t, const RnnParams& p, const std::vector<int>& tokens,
                            const std::vector<int>& targets) {
  return build_rnn_loss(t, p, tokens, targets);
}

inline LossGraph build_loss(Tape& t, const FormerParams& p, const std::vector<int>& tokens,
                            const std::vector<int>& targets) {
  return build_former_loss(t, p, tokens, targets);
}

inline ForwardResult model_forward(const RnnParams& p, const TokenGroups& tg,
                                   const std::vector<int>& tokens) {
  return rnn_forward(p, tg, tokens);
}

inline ForwardResult model_forward(const FormerParams& p, const TokenGroups& tg,
                                   const std::vector<int>& tokens) {
  return former_forward(p, tg, tokens);
}

// ---------------------------------------------------------------------------
// Evaluation: contiguous non-overlapping windows covering every predictable
// character of the split exactly once, accumulated in window order so the
// result does not depend on any batching of the pass. Recurrent state resets
// at every window boundary.
// ---------------------------------------------------------------------------

struct EvalResult {
  double nats = 0.0;  // mean per-character cross-entropy
  double bpc = 0.0;
  int64_t chars = 0;
  double max_drift = 0.0;
};

inline std::vector<std::pair<size_t, int>> eval_windows(const Corpus& c, Split s, int seq_len) {
  if (seq_len < 2) throw InvalidInputError("eval: sequence length must be at least 2");
  const auto [b, e] = c.range(s);
  if (e - b < 2) throw InvalidInputError("eval: split too short to evaluate");
  std::vector<std::pair<size_t, int>> out;
  size_t o = b;
  while (o + 1 < e) {
    const int len = static_cast<int>(std::min<size_t>(static_cast<size_t>(seq_len), e - 1 - o));
    out.emplace_back(o, len);
    o += static_cast<size_t>(len);
  }
  return out;
}

template <class ModelParams>
EvalResult evaluate_split(const ModelParams& p, const Corpus& c, Split s, int seq_len) {
  const TokenGroups tg = materialize_token_groups(p);
  EvalResult r;
  double sum_nats = 0.0;
  for (const auto& [off, len] : eval_windows(c, s, seq_len)) {
    std::vector<int> in(static_cast<size_t>(len)), tgt(static_cast<size_t>(len));
    for (int t = 0; t < len; ++t) {
      in[static_cast<size_t>(t)] = c.token_at(off + static_cast<size_t>(t));
      tgt[static_cast<size_t>(t)] = c.token_at(off + static_cast<size_t>(t) + 1);
    }
    const ForwardResult fr = model_forward(p, tg, in);
    for (int t = 0; t < len; ++t) {
      const Matrix& row = fr.logits[static_cast<size_t>(t)];
      require_finite(row, "eval");
      sum_nats += log_sum_exp_column(row) - row.re(tgt[static_cast<size_t>(t)], 0);
      r.chars += 1;
    }
    for (const Matrix& h : fr.states) r.max_drift = std::max(r.max_drift, group_defect(h));
  }
  r.nats = sum_nats / static_cast<double>(r.chars);
  r.bpc = r.nats / kLn2;
  return r;
}

// ---------------------------------------------------------------------------
// Step loop
// ---------------------------------------------------------------------------

namespace detail {
template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int nt = std::min(threads, n);
  std::atomic<int> next{0};
  std::exception_ptr first_error = nullptr;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nt));
  for (int w = 0; w < nt; ++w) {
    pool.emplace_back([&] {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        if (!failed.exchange(true)) first_error = std::current_exception();
      }
    });
  }
  for (std::thread& th : pool) th.join();
  if (failed.load()) std::rethrow_exception(first_error);
}
}  // namespace detail

struct StepReport {
  double loss_nats = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm
  bool skipped = false;    // non-finite loss or gradient anywhere in the batch
};

// One optimizer step over the stream's batch at `step`. Per-element graphs
// evaluate independently (possibly in parallel); the gradient reduction runs
// in element order, so the result is identical for any thread count.
template <class ModelParams>
StepReport train_step(ModelParams& p, ParamStore& ps, AdamState& adam,
                      const BatchStream& stream, int64_t step, const TrainConfig& cfg) {
  const Batch batch = stream.batch_at(step);
  const int bs = static_cast<int>(batch.inputs.size());
  std::vector<std::vector<Matrix>> elem_grads(static_cast<size_t>(bs));
  std::vector<double> elem_loss(static_cast<size_t>(bs), 0.0);
  std::vector<char> elem_bad(static_cast<size_t>(bs), 0);
  detail::parallel_for(bs, cfg.threads, [&](int b) {
    try {
      Tape t;
      const LossGraph lg = build_loss(t, p, batch.inputs[static_cast<size_t>(b)],
                                      batch.targets[static_cast<size_t>(b)]);
      const double nats = t.value(lg.loss).re(0, 0);
      const GradMap gm = t.backward(lg.loss);
      std::vector<Matrix> g;
      g.reserve(lg.binding.vars.size());
      bool ok = std::isfinite(nats);
      for (Var v : lg.binding.vars) {
        g.push_back(gm.at(v.id));
        ok = ok && is_finite(g.back());
      }
      elem_loss[static_cast<size_t>(b)] = nats;
      elem_grads[static_cast<size_t>(b)] = std::move(g);
      if (!ok) elem_bad[static_cast<size_t>(b)] = 1;
    } catch (const NumericRangeError&) {
      elem_bad[static_cast<size_t>(b)] = 1;
    }
  });
  for (char bad : elem_bad) {
    if (bad) return StepReport{0.0, 0.0, true};
  }
  std::vector<Matrix> grads = std::move(elem_grads[0]);
  double nats = elem_loss[0];
  for (int b = 1; b < bs; ++b) {
    for (size_t i = 0; i < grads.size(); ++i) {
      axpy(grads[i], 1.0, elem_grads[static_cast<size_t>(b)][i]);
    }
    nats += elem_loss[static_cast<size_t>(b)];
  }
  const double inv = 1.0 / static_cast<double>(bs);
  for (Matrix& g : grads) {
    for (double& x : g.re_data()) x *= inv;
    for (double& x : g.im_data()) x *= inv;
  }
  nats *= inv;
  const double gn = clip_gradients(grads, cfg.clip_norm);
  adam_step(ps, grads, adam, AdamConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8});
  load_from_store(p, ps);
  return StepReport{nats, gn, false};
}

// ---------------------------------------------------------------------------
// Full training run
// ---------------------------------------------------------------------------

struct TrainRun {
  std::vector<MetricRow> metrics;
  ParamStore best_params;
  AdamState best_moments;
  int64_t best_step = -1;
  double best_val_bpc = std::numeric_limits<double>::infinity();
  double test_bpc = 0.0;
  int64_t steps_attempted = 0;
  int64_t steps_applied = 0;
  int64_t skipped_steps = 0;
  bool aborted_numeric = false;
};

inline constexpr int kMaxConsecutiveSkips = 10;

// Epoch loop: sampled train batches, periodic validation, best-checkpoint
// tracking, early stop after `patience` validation passes without strict
// improvement. The model is left holding the best parameters.
template <class ModelParams>
TrainRun train_model(ModelParams& p, const Corpus& corpus, const TrainConfig& cfg,
                     std::ostream* metrics_out = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainRun run;
  ParamStore ps = to_store(p);
  AdamState adam = make_adam_state(ps);
  const BatchStream stream(corpus, Split::Train, cfg.seq_len, cfg.batch_size, cfg.seed);
  const int64_t spe = stream.batches_per_epoch();
  if (spe < 1) throw InvalidInputError("train: split too short for one batch per epoch");
  int consecutive_skips = 0;
  int epochs_since_improvement = 0;
  bool stop = false;
  for (int64_t epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    double epoch_nats = 0.0;
    double last_grad_norm = 0.0;
    int64_t applied = 0;
    for (int64_t k = 0; k < spe; ++k) {
      if (cfg.max_steps > 0 && run.steps_attempted >= cfg.max_steps) break;
      const StepReport rep = train_step(p, ps, adam, stream, run.steps_attempted, cfg);
      run.steps_attempted += 1;
      if (rep.skipped) {
        run.skipped_steps += 1;
        consecutive_skips += 1;
        if (consecutive_skips >= kMaxConsecutiveSkips) {
          run.aborted_numeric = true;
          stop = true;
          break;
        }
        continue;
      }
      consecutive_skips = 0;
      run.steps_applied += 1;
      epoch_nats += rep.loss_nats;
      last_grad_norm = rep.grad_norm;
      applied += 1;
    }
    if (run.aborted_numeric) break;
    if (applied == 0) {
      if (cfg.max_steps > 0 && run.steps_attempted >= cfg.max_steps) break;
      continue;  // every step this epoch was skipped; nothing to report
    }
    const bool cadence = (epoch % cfg.eval_every) == 0;
    const bool last_epoch = (epoch + 1 == cfg.max_epochs) ||
                            (cfg.max_steps > 0 && run.steps_attempted >= cfg.max_steps);
    if (!cadence && !last_epoch) continue;
    const EvalResult val = evaluate_split(p, corpus, Split::Val, cfg.seq_len);
    MetricRow row;
    row.epoch = epoch;
    row.step = run.steps_attempted;
    row.train_bpc = epoch_nats / static_cast<double>(applied) / kLn2;
    row.val_bpc = val.bpc;
    row.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    row.grad_norm = last_grad_norm;
    row.drift = val.max_drift;
    run.metrics.push_back(row);
    if (metrics_out) *metrics_out << metric_row_json(row) << "\n";
    if (val.bpc < run.best_val_bpc) {
      run.best_val_bpc = val.bpc;
      run.best_params = ps;
      run.best_moments = adam;
      run.best_step = run.steps_attempted;
      epochs_since_improvement = 0;
    } else {
      epochs_since_improvement += 1;
      if (epochs_since_improvement >= cfg.patience) stop = true;
    }
    if (cfg.max_steps > 0 && run.steps_attempted >= cfg.max_steps) stop = true;
  }
  if (run.best_step >= 0) {
    load_from_store(p, run.best_params);
    run.test_bpc = evaluate_split(p, corpus, Split::Test, cfg.seq_len).bpc;
  }
  return run;
}

}  // namespace osm
