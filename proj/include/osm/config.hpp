#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "osm/checkpoint.hpp"
#include "osm/models.hpp"
#include "osm/training.hpp"

// Structured run configuration: a JSON file with nested sections for the
// model, the optimizer, and the data source. Parsing is strict; an unknown
// key anywhere is an error naming the key, so typos cannot silently fall
// back to defaults.

namespace osm {

struct ModelConfig {
  std::string kind = "osm-rnn";  // or "osmformer"
  SubgroupFamily family = SubgroupFamily::SO;
  int d = 4;
  MixingMode mixing = MixingMode::Identity;         // recurrent tangent mix
  MixingMode mixing_attn = MixingMode::Identity;    // attention tangent mix
  MixingMode mixing_ground = MixingMode::Identity;  // grounding tangent mix
  int layers = 1;
  UpdateMap update = UpdateMap::Expm;

  bool is_former() const { return kind == "osmformer"; }
};

struct DataConfig {
  std::string path;
  double train_frac = 0.8;
  double val_frac = 0.1;
  // Explicit byte offsets override the fractions when both are nonnegative.
  int64_t train_end = -1;
  int64_t val_end = -1;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";
  uint64_t seed = 1;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& scope,
                                const std::vector<std::string>& allowed) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const std::string& a : allowed) {
      if (item.key() == a) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw InvalidInputError("config: unknown key '" +
                              (scope.empty() ? item.key() : scope + "." + item.key()) + "'");
    }
  }
}

inline const nlohmann::json* find_key(const nlohmann::json& j, const std::string& key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

inline std::string key_path(const std::string& scope, const std::string& key) {
  return scope.empty() ? key : scope + "." + key;
}

inline double get_number(const nlohmann::json& j, const std::string& scope,
                         const std::string& key, double fallback) {
  const nlohmann::json* v = find_key(j, key);
  if (!v) return fallback;
  if (!v->is_number()) {
    throw InvalidInputError("config: key '" + key_path(scope, key) + "' expects a number");
  }
  return v->get<double>();
}

inline int64_t get_integer(const nlohmann::json& j, const std::string& scope,
                           const std::string& key, int64_t fallback) {
  const nlohmann::json* v = find_key(j, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) {
    throw InvalidInputError("config: key '" + key_path(scope, key) + "' expects an integer");
  }
  return v->get<int64_t>();
}

inline std::string get_string(const nlohmann::json& j, const std::string& scope,
                              const std::string& key, const std::string& fallback) {
  const nlohmann::json* v = find_key(j, key);
  if (!v) return fallback;
  if (!v->is_string()) {
    throw InvalidInputError("config: key '" + key_path(scope, key) + "' expects a string");
  }
  return v->get<std::string>();
}

template <class Parse>
auto parse_enum_key(const nlohmann::json& j, const std::string& scope, const std::string& key,
                    const std::string& fallback, Parse&& parse) {
  const std::string raw = get_string(j, scope, key, fallback);
  try {
    return parse(raw);
  } catch (const InvalidInputError& e) {
    throw InvalidInputError("config: key '" + key_path(scope, key) + "': " + e.what());
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInputError("config: top level must be an object");
  detail::reject_unknown_keys(j, "", {"model", "train", "data", "output_dir", "seed"});
  RunConfig cfg;

  const nlohmann::json* jm = detail::find_key(j, "model");
  if (!jm || !jm->is_object()) throw InvalidInputError("config: missing 'model' section");
  detail::reject_unknown_keys(*jm, "model",
                              {"kind", "family", "d", "mixing", "mixing_attn", "mixing_ground",
                               "layers", "update"});
  cfg.model.kind = detail::get_string(*jm, "model", "kind", "");
  if (cfg.model.kind != "osm-rnn" && cfg.model.kind != "osmformer") {
    throw InvalidInputError("config: key 'model.kind' must be 'osm-rnn' or 'osmformer'");
  }
  cfg.model.family =
      detail::parse_enum_key(*jm, "model", "family", "", [](const std::string& s) {
        if (s.empty()) throw InvalidInputError("missing subgroup family");
        return parse_family(s);
      });
  cfg.model.d = static_cast<int>(detail::get_integer(*jm, "model", "d", 0));
  if (cfg.model.d < 1) throw InvalidInputError("config: key 'model.d' must be a positive integer");
  cfg.model.update = detail::parse_enum_key(*jm, "model", "update", "expm", parse_update_map);
  if (cfg.model.is_former()) {
    if (detail::find_key(*jm, "mixing")) {
      throw InvalidInputError(
          "config: key 'model.mixing' applies to osm-rnn; use mixing_attn/mixing_ground");
    }
    cfg.model.mixing_attn =
        detail::parse_enum_key(*jm, "model", "mixing_attn", "identity", parse_mixing_mode);
    cfg.model.mixing_ground =
        detail::parse_enum_key(*jm, "model", "mixing_ground", "identity", parse_mixing_mode);
    cfg.model.layers = static_cast<int>(detail::get_integer(*jm, "model", "layers", 1));
    if (cfg.model.layers < 1) {
      throw InvalidInputError("config: key 'model.layers' must be a positive integer");
    }
  } else {
    for (const char* k : {"mixing_attn", "mixing_ground", "layers"}) {
      if (detail::find_key(*jm, k)) {
        throw InvalidInputError("config: key 'model." + std::string(k) +
                                "' applies to osmformer only");
      }
    }
    cfg.model.mixing = detail::parse_enum_key(*jm, "model", "mixing", "identity", parse_mixing_mode);
    cfg.model.layers = 1;
  }

  if (const nlohmann::json* jt = detail::find_key(j, "train")) {
    if (!jt->is_object()) throw InvalidInputError("config: 'train' must be an object");
    detail::reject_unknown_keys(
        *jt, "train",
        {"lr", "weight_decay", "batch_size", "clip_norm", "patience", "seq_len", "max_epochs",
         "eval_every", "max_steps", "threads"});
    TrainConfig& t = cfg.train;
    t.lr = detail::get_number(*jt, "train", "lr", t.lr);
    t.weight_decay = detail::get_number(*jt, "train", "weight_decay", t.weight_decay);
    t.batch_size = static_cast<int>(detail::get_integer(*jt, "train", "batch_size", t.batch_size));
    t.clip_norm = detail::get_number(*jt, "train", "clip_norm", t.clip_norm);
    t.patience = static_cast<int>(detail::get_integer(*jt, "train", "patience", t.patience));
    t.seq_len = static_cast<int>(detail::get_integer(*jt, "train", "seq_len", t.seq_len));
    t.max_epochs = static_cast<int>(detail::get_integer(*jt, "train", "max_epochs", t.max_epochs));
    t.eval_every = static_cast<int>(detail::get_integer(*jt, "train", "eval_every", t.eval_every));
    t.max_steps = detail::get_integer(*jt, "train", "max_steps", t.max_steps);
    t.threads = static_cast<int>(detail::get_integer(*jt, "train", "threads", t.threads));
    try {
      t.validate();
    } catch (const InvalidInputError& e) {
      throw InvalidInputError(std::string("config: train section invalid: ") + e.what());
    }
  }

  if (const nlohmann::json* jd = detail::find_key(j, "data")) {
    if (!jd->is_object()) throw InvalidInputError("config: 'data' must be an object");
    detail::reject_unknown_keys(*jd, "data",
                                {"path", "train_frac", "val_frac", "train_end", "val_end"});
    cfg.data.path = detail::get_string(*jd, "data", "path", "");
    cfg.data.train_frac = detail::get_number(*jd, "data", "train_frac", cfg.data.train_frac);
    cfg.data.val_frac = detail::get_number(*jd, "data", "val_frac", cfg.data.val_frac);
    cfg.data.train_end = detail::get_integer(*jd, "data", "train_end", -1);
    cfg.data.val_end = detail::get_integer(*jd, "data", "val_end", -1);
    if ((cfg.data.train_end >= 0) != (cfg.data.val_end >= 0)) {
      throw InvalidInputError(
          "config: keys 'data.train_end' and 'data.val_end' must be given together");
    }
  }

  cfg.output_dir = detail::get_string(j, "", "output_dir", cfg.output_dir);
  const int64_t seed = detail::get_integer(j, "", "seed", 1);
  if (seed < 0) throw InvalidInputError("config: key 'seed' must be nonnegative");
  cfg.seed = static_cast<uint64_t>(seed);
  cfg.train.seed = cfg.seed;  // one seed drives init and batching
  return cfg;
}

inline RunConfig parse_run_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInputError(std::string("config: not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config_text(read_text_file(path));
}

// Canonical serialization: fixed key set, keys sorted by the JSON library.
// Two files that parse to the same configuration produce identical bytes
// here, so the digest identifies the configuration, not the formatting.
inline std::string canonical_dump(const RunConfig& cfg) {
  nlohmann::json j;
  j["model"]["kind"] = cfg.model.kind;
  j["model"]["family"] = family_name(cfg.model.family);
  j["model"]["d"] = cfg.model.d;
  j["model"]["update"] = update_map_name(cfg.model.update);
  if (cfg.model.is_former()) {
    j["model"]["mixing_attn"] = mixing_mode_name(cfg.model.mixing_attn);
    j["model"]["mixing_ground"] = mixing_mode_name(cfg.model.mixing_ground);
    j["model"]["layers"] = cfg.model.layers;
  } else {
    j["model"]["mixing"] = mixing_mode_name(cfg.model.mixing);
  }
  j["train"]["lr"] = cfg.train.lr;
  j["train"]["weight_decay"] = cfg.train.weight_decay;
  j["train"]["batch_size"] = cfg.train.batch_size;
  j["train"]["clip_norm"] = cfg.train.clip_norm;
  j["train"]["patience"] = cfg.train.patience;
  j["train"]["seq_len"] = cfg.train.seq_len;
  j["train"]["max_epochs"] = cfg.train.max_epochs;
  j["train"]["eval_every"] = cfg.train.eval_every;
  j["train"]["max_steps"] = cfg.train.max_steps;
  j["train"]["threads"] = cfg.train.threads;
  j["data"]["path"] = cfg.data.path;
  j["data"]["train_frac"] = cfg.data.train_frac;
  j["data"]["val_frac"] = cfg.data.val_frac;
  j["data"]["train_end"] = cfg.data.train_end;
  j["data"]["val_end"] = cfg.data.val_end;
  j["output_dir"] = cfg.output_dir;
  j["seed"] = cfg.seed;
  return j.dump();
}

inline uint64_t config_digest(const RunConfig& cfg) { return fnv1a64(canonical_dump(cfg)); }

inline Corpus load_corpus(const DataConfig& d) {
  if (d.path.empty()) throw InvalidInputError("data: no corpus path configured");
  const std::string text = read_text_file(d.path);
  if (d.train_end >= 0) {
    return make_corpus_offsets(text, static_cast<size_t>(d.train_end),
                               static_cast<size_t>(d.val_end));
  }
  return make_corpus(text, d.train_frac, d.val_frac);
}

// ---------------------------------------------------------------------------
// Model construction from configuration
// ---------------------------------------------------------------------------

using ModelVariant = std::variant<RnnParams, FormerParams>;

inline ModelVariant build_model(const ModelConfig& m, int vocab, Rng& rng) {
  const SubgroupSpec g{m.family, m.d};
  if (m.is_former()) {
    return make_former(g, vocab, m.layers, m.mixing_attn, m.mixing_ground, m.update, rng);
  }
  return make_rnn(g, vocab, m.mixing, m.update, rng);
}

inline ParamCount model_param_count(const ModelConfig& m, int vocab) {
  Rng rng(1);  // values are irrelevant to the count
  return std::visit([](const auto& p) { return count_params(p); }, build_model(m, vocab, rng));
}

// ---------------------------------------------------------------------------
// Budget sweep: pick the carrier size whose parameter count lands nearest a
// target budget, leaving everything else in the template unchanged.
// ---------------------------------------------------------------------------

struct SweepPick {
  int d = 0;
  int64_t params = 0;
};

inline constexpr double kSweepBudgetSlack = 0.5;  // reject misses beyond 50%

inline std::optional<SweepPick> sweep_pick(const ModelConfig& tmpl, int vocab, int64_t budget,
                                           int d_min = 2, int d_max = 32) {
  if (budget < 1) throw InvalidInputError("sweep: budget must be positive");
  if (d_min < 1 || d_max < d_min) throw InvalidInputError("sweep: bad carrier size range");
  std::optional<SweepPick> best;
  for (int d = d_min; d <= d_max; ++d) {
    ModelConfig m = tmpl;
    m.d = d;
    const int64_t params = static_cast<int64_t>(model_param_count(m, vocab).total);
    if (!best || std::llabs(params - budget) < std::llabs(best->params - budget)) {
      best = SweepPick{d, params};
    }
  }
  if (!best) return std::nullopt;
  const double miss = static_cast<double>(std::llabs(best->params - budget));
  if (miss > kSweepBudgetSlack * static_cast<double>(budget)) return std::nullopt;
  return best;
}

}  // namespace osm
