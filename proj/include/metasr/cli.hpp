#pragma once

// `metasr` command line: generate, pretrain, finetune, evaluate, curve,
// selfcheck. run() is the whole program; tools/metasr_cli.cpp only wraps it.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "metasr/checkpoint.hpp"
#include "metasr/errors.hpp"
#include "metasr/metatrain.hpp"
#include "metasr/model.hpp"
#include "metasr/selfcheck.hpp"
#include "metasr/tasks.hpp"

namespace metasr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

inline constexpr const char* kResolvedConfig = "resolved_config.json";
inline constexpr const char* kLockFile = ".metasr.lock";

/// Maps library errors onto the documented exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GuardError*>(&e)) return kExitConfig;
  if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const LookupError*>(&e) || dynamic_cast<const DimensionError*>(&e))
    return kExitData;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const InfeasibleError*>(&e)) return kExitNumeric;
  return kExitFailure;
}

/// Advisory lock on an output directory, held for the life of the object.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) {
    fs::create_directories(dir);
    const fs::path path = dir / kLockFile;
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("cannot open lock file '" + path.string() + "': " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ConfigError("--out: directory '" + dir.string() + "' is in use by another metasr run");
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;
  ~OutputLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  int fd_ = -1;
};

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
inline std::string file_fingerprint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read '" + path.string() + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

// --- configuration ---------------------------------------------------------------

/// Reads a JSON config object. A resolved_config.json from an earlier run
/// is accepted as long as its command matches.
inline json load_config(const std::string& path, const std::string& command) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("--config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("--config: '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("--config: '" + path + "' must hold a JSON object");
  if (j.contains("schema_version")) {
    if (!j["schema_version"].is_number_integer() || j["schema_version"].get<int>() != kSchemaVersion)
      throw ConfigError("schema_version: expected " + std::to_string(kSchemaVersion));
    j.erase("schema_version");
  }
  if (j.contains("command")) {
    if (j["command"] != command)
      throw ConfigError("command: config was written for '" + j["command"].dump() + "', not '" + command + "'");
    j.erase("command");
  }
  return j;
}

inline void require_known_keys(const json& cfg, const std::set<std::string>& known, const std::string& command) {
  for (const auto& [key, _] : cfg.items())
    if (!known.count(key)) throw ConfigError(key + ": unknown setting for '" + command + "'");
}

template <typename T>
T get_or(const json& cfg, const std::string& key, T fallback) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) return fallback;
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(key + ": wrong type (" + cfg.at(key).dump() + ")");
  }
}

template <typename T>
T require(const json& cfg, const std::string& key, const std::string& flag) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) throw ConfigError(key + ": required (" + flag + ")");
  return get_or<T>(cfg, key, T{});
}

inline void write_resolved_config(const fs::path& dir, const std::string& command, json resolved) {
  resolved["command"] = command;
  resolved["schema_version"] = kSchemaVersion;
  write_text(dir / kResolvedConfig, resolved.dump(2) + "\n");
}

// --- shared loading ---------------------------------------------------------------

inline void require_compatible(const MultiHeadModel& model, const LanguageTask& task, const std::string& ckpt) {
  if (model.config.feature_dim != task.feature_dim)
    throw ValidationError("checkpoint '" + ckpt + "' expects feature_dim " + std::to_string(model.config.feature_dim) +
                          " but corpus '" + task.id + "' has " + std::to_string(task.feature_dim));
  auto it = model.alphabets.find(task.id);
  if (it != model.alphabets.end() && !(it->second == task.alphabet))
    throw ValidationError("checkpoint '" + ckpt + "' has a different alphabet for language '" + task.id + "'");
}

inline MultiHeadModel fresh_model(int feature_dim, int hidden_dim, std::uint64_t seed) {
  if (hidden_dim < 2 || hidden_dim % 2 != 0) throw ConfigError("hidden_dim: must be an even number >= 2");
  return init_model(default_encoder_config(feature_dim, hidden_dim), derive_seed(seed, "no-pretrain"));
}

struct Env {
  std::ostream& out;
  std::ostream& err;
};

// --- commands -----------------------------------------------------------------------

inline json resolve_generate(const json& cfg) {
  std::set<std::string> known;
  const json defaults = to_json(SyntheticFamilyConfig{});
  for (const auto& [k, _] : defaults.items()) known.insert(k);
  require_known_keys(cfg, known, "generate");
  SyntheticFamilyConfig c = family_config_from_json(cfg);
  validate(c);
  return to_json(c);
}

inline int cmd_generate(const json& resolved, const fs::path& out, Env env) {
  SyntheticFamilyConfig c = family_config_from_json(resolved);
  for (const auto& task : generate_family(c)) save_corpus((out / (task.id + ".jsonl")).string(), task);
  env.out << "wrote " << c.n_languages << " corpora (" << c.n_source << " source, " << c.n_languages - c.n_source
          << " target) to " << out.string() << "\n";
  return kExitOk;
}

inline PretrainConfig pretrain_config_from(const json& r) {
  PretrainConfig p;
  p.regime = regime_from_string(r.at("regime").get<std::string>());
  p.total_steps = r.at("steps").get<int>();
  p.checkpoint_every = r.at("checkpoint_every").get<int>();
  p.multi_lr = r.at("multi_lr").get<double>();
  p.episode.inner_lr = r.at("inner_lr").get<double>();
  p.episode.meta_lr = r.at("meta_lr").get<double>();
  p.episode.tasks_per_episode = r.at("tasks_per_episode").get<int>();
  p.episode.n_train = r.at("n_train").get<int>();
  p.episode.n_test = r.at("n_test").get<int>();
  p.episode.inner_steps = r.at("inner_steps").get<int>();
  p.seed = r.at("seed").get<std::uint64_t>();
  p.record_time = r.at("record_time").get<bool>();
  return p;
}

inline json resolve_pretrain(const json& cfg) {
  require_known_keys(cfg,
                     {"regime", "corpora", "steps", "checkpoint_every", "multi_lr", "inner_lr", "meta_lr",
                      "tasks_per_episode", "n_train", "n_test", "inner_steps", "hidden_dim", "seed", "record_time"},
                     "pretrain");
  const PretrainConfig d;
  json r;
  r["regime"] = get_or<std::string>(cfg, "regime", to_string(d.regime));
  r["corpora"] = require<std::vector<std::string>>(cfg, "corpora", "--corpus");
  if (r["corpora"].empty()) throw ConfigError("corpora: at least one source corpus is required");
  r["steps"] = get_or(cfg, "steps", d.total_steps);
  r["checkpoint_every"] = get_or(cfg, "checkpoint_every", d.checkpoint_every);
  r["multi_lr"] = get_or(cfg, "multi_lr", d.multi_lr);
  r["inner_lr"] = get_or(cfg, "inner_lr", d.episode.inner_lr);
  r["meta_lr"] = get_or(cfg, "meta_lr", d.episode.meta_lr);
  r["tasks_per_episode"] = get_or(cfg, "tasks_per_episode", d.episode.tasks_per_episode);
  r["n_train"] = get_or(cfg, "n_train", d.episode.n_train);
  r["n_test"] = get_or(cfg, "n_test", d.episode.n_test);
  r["inner_steps"] = get_or(cfg, "inner_steps", d.episode.inner_steps);
  r["hidden_dim"] = get_or(cfg, "hidden_dim", 64);
  r["seed"] = get_or(cfg, "seed", d.seed);
  r["record_time"] = get_or(cfg, "record_time", d.record_time);
  pretrain_config_from(r).validate();
  return r;
}

inline std::string checkpoint_name(const std::string& regime, int step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s-step%06d", regime.c_str(), step);
  return buf;
}

inline int cmd_pretrain(const json& r, const fs::path& out, Env env) {
  const PretrainConfig cfg = pretrain_config_from(r);
  std::vector<LanguageTask> tasks;
  std::set<std::string> ids;
  for (const auto& path : r.at("corpora").get<std::vector<std::string>>()) {
    tasks.push_back(load_corpus(path));
    if (!ids.insert(tasks.back().id).second)
      throw ValidationError("corpus '" + path + "' repeats language '" + tasks.back().id + "'");
    if (tasks.back().feature_dim != tasks.front().feature_dim)
      throw ValidationError("corpus '" + path + "' has feature_dim " + std::to_string(tasks.back().feature_dim) +
                            ", expected " + std::to_string(tasks.front().feature_dim));
  }
  MultiHeadModel init = init_model(default_encoder_config(tasks.front().feature_dim, r.at("hidden_dim").get<int>()),
                                   derive_seed(cfg.seed, "pretrain-init"));
  const std::string regime = to_string(cfg.regime);
  PretrainResult result = pretrain(init, tasks, cfg, [&](const Checkpoint& c) {
    save_checkpoint((out / checkpoint_name(regime, c.step)).string(), c.model, {c.step, cfg.seed, regime});
  });
  std::ostringstream csv;
  write_train_log_csv(csv, result.log);
  write_text(out / "train_log.csv", csv.str());
  const double first = *result.log.meta_loss_at(1);
  const double last = *result.log.meta_loss_at(cfg.total_steps);
  env.out << regime << " pretraining: " << cfg.total_steps << " steps on " << tasks.size() << " languages, "
          << result.checkpoints.size() << " checkpoints, objective " << format_real(first) << " -> "
          << format_real(last) << "\n";
  return kExitOk;
}

inline json resolve_finetune(const json& cfg) {
  require_known_keys(cfg,
                     {"checkpoint", "no_pretrain", "corpus", "split", "epochs", "lr", "batch_size", "eval_beam",
                      "hidden_dim", "seed"},
                     "finetune");
  const FinetuneConfig d;
  json r;
  const bool no_pretrain = get_or(cfg, "no_pretrain", false);
  const std::string ckpt = get_or<std::string>(cfg, "checkpoint", "");
  if (no_pretrain == !ckpt.empty())
    throw ConfigError("checkpoint: give exactly one of --checkpoint PATH or --no-pretrain");
  r["no_pretrain"] = no_pretrain;
  r["checkpoint"] = no_pretrain ? json(nullptr) : json(ckpt);
  r["corpus"] = require<std::string>(cfg, "corpus", "--corpus");
  const std::string split = get_or<std::string>(cfg, "split", "limited");
  if (split != "full" && split != "limited") throw ConfigError("split: must be 'full' or 'limited'");
  r["split"] = split;
  // Full-pack fine-tuning runs 18 epochs and limited-pack 20 by default.
  r["epochs"] = get_or(cfg, "epochs", split == "full" ? 18 : 20);
  r["lr"] = get_or(cfg, "lr", d.lr);
  r["batch_size"] = get_or(cfg, "batch_size", d.batch_size);
  r["eval_beam"] = get_or(cfg, "eval_beam", d.eval_beam);
  r["hidden_dim"] = get_or(cfg, "hidden_dim", 64);
  r["seed"] = get_or(cfg, "seed", d.seed);
  FinetuneConfig f{r["epochs"].get<int>(), r["batch_size"].get<int>(), r["lr"].get<double>(),
                   r["seed"].get<std::uint64_t>(), r["eval_beam"].get<int>()};
  f.validate();
  return r;
}

inline void write_epoch_csv(const fs::path& path, const std::vector<EpochRecord>& epochs) {
  std::ostringstream os;
  os << "epoch,train_loss,valid_loss,valid_cer\n";
  for (const auto& e : epochs)
    os << e.epoch << ',' << format_real(e.train_loss) << ',' << format_real(e.valid_loss) << ','
       << format_real(e.valid_cer) << '\n';
  write_text(path, os.str());
}

inline int cmd_finetune(const json& r, const fs::path& out, Env env) {
  const FinetuneConfig cfg{r.at("epochs").get<int>(), r.at("batch_size").get<int>(), r.at("lr").get<double>(),
                           r.at("seed").get<std::uint64_t>(), r.at("eval_beam").get<int>()};
  LanguageTask task = load_corpus(r.at("corpus").get<std::string>());
  MultiHeadModel model;
  CheckpointInfo info{0, cfg.seed, "none"};
  if (r.at("no_pretrain").get<bool>()) {
    model = fresh_model(task.feature_dim, r.at("hidden_dim").get<int>(), cfg.seed);
  } else {
    const std::string path = r.at("checkpoint").get<std::string>();
    LoadedCheckpoint ck = load_checkpoint(path);
    require_compatible(ck.model, task, path);
    model = std::move(ck.model);
    info = ck.info;
  }
  FinetuneResult result = finetune(model, task, r.at("split").get<std::string>(), cfg);
  save_checkpoint((out / "finetuned").string(), result.model, info);
  write_epoch_csv(out / "finetune_log.csv", result.epochs);
  env.out << "fine-tuned '" << task.id << "' for " << cfg.epochs << " epochs";
  if (!result.epochs.empty())
    env.out << ", final train loss " << format_real(result.epochs.back().train_loss) << ", valid loss "
            << format_real(result.epochs.back().valid_loss);
  env.out << "\n";
  return kExitOk;
}

inline json resolve_evaluate(const json& cfg) {
  require_known_keys(cfg, {"checkpoint", "corpus", "split", "beam"}, "evaluate");
  json r;
  r["checkpoint"] = require<std::string>(cfg, "checkpoint", "--checkpoint");
  r["corpus"] = require<std::string>(cfg, "corpus", "--corpus");
  const std::string split = get_or<std::string>(cfg, "split", "test");
  if (split != "full" && split != "limited" && split != "test")
    throw ConfigError("split: must be 'full', 'limited' or 'test'");
  r["split"] = split;
  r["beam"] = get_or(cfg, "beam", kDefaultBeam);
  if (r["beam"].get<int>() < 1) throw ConfigError("beam: must be >= 1");
  return r;
}

/// Self-describing evaluation report; CER is recomputable from `utterances`.
inline json eval_report(const EvalResult& res, const LanguageTask& task, const Alphabet& alphabet,
                        const std::string& ckpt_path, const CheckpointInfo& info, const json& resolved) {
  json utts = json::array();
  for (const auto& p : res.pairs)
    utts.push_back({{"uid", p.uid},
                    {"reference", alphabet.to_string(p.ref)},
                    {"hypothesis", alphabet.to_string(p.hyp)},
                    {"reference_length", p.ref.size()},
                    {"edits", p.edits}});
  const std::string stem = checkpoint_stem(ckpt_path);
  return {{"schema_version", kSchemaVersion},
          {"checkpoint",
           {{"path", ckpt_path},
            {"params_fnv1a64", file_fingerprint(stem + ".params")},
            {"pretrain_step", info.pretrain_step},
            {"regime", info.regime},
            {"seed", info.seed}}},
          {"corpus", {{"path", resolved.at("corpus")}, {"language_id", task.id}, {"split", resolved.at("split")}}},
          {"decode", {{"method", "prefix_beam"}, {"beam", resolved.at("beam")}}},
          {"cer", res.cer},
          {"total_edits", res.total_edits},
          {"total_reference_length", res.total_ref_len},
          {"utterances", utts}};
}

inline int cmd_evaluate(const json& r, const fs::path& out, Env env) {
  const std::string path = r.at("checkpoint").get<std::string>();
  LoadedCheckpoint ck = load_checkpoint(path);
  LanguageTask task = load_corpus(r.at("corpus").get<std::string>());
  if (!ck.model.has_language(task.id))
    throw LookupError("checkpoint '" + path + "' has no head for language '" + task.id +
                      "'; fine-tune on this language first (metasr finetune --checkpoint " + path + " --corpus " +
                      r.at("corpus").get<std::string>() + ")");
  require_compatible(ck.model, task, path);
  const auto& data = task.split(r.at("split").get<std::string>());
  if (data.empty()) throw ValidationError("split '" + r.at("split").get<std::string>() + "' of '" + task.id + "' is empty");
  EvalResult res = evaluate(ck.model, task.id, data, r.at("beam").get<int>());
  write_text(out / "eval_report.json", eval_report(res, task, task.alphabet, path, ck.info, r).dump(2) + "\n");
  env.out << "CER " << format_real(res.cer) << " on " << data.size() << " utterances of '" << task.id << "' ("
          << r.at("split").get<std::string>() << ", beam " << r.at("beam").get<int>() << ")\n";
  return kExitOk;
}

inline json resolve_curve(const json& cfg) {
  require_known_keys(cfg, {"checkpoints", "corpus", "split", "epochs", "lr", "batch_size", "beam", "seed"}, "curve");
  const FinetuneConfig d;
  json r;
  r["checkpoints"] = require<std::string>(cfg, "checkpoints", "--checkpoints");
  r["corpus"] = require<std::string>(cfg, "corpus", "--corpus");
  const std::string split = get_or<std::string>(cfg, "split", "limited");
  if (split != "full" && split != "limited") throw ConfigError("split: must be 'full' or 'limited'");
  r["split"] = split;
  r["epochs"] = get_or(cfg, "epochs", 20);
  r["lr"] = get_or(cfg, "lr", d.lr);
  r["batch_size"] = get_or(cfg, "batch_size", d.batch_size);
  r["beam"] = get_or(cfg, "beam", kDefaultBeam);
  r["seed"] = get_or(cfg, "seed", d.seed);
  FinetuneConfig f{r["epochs"].get<int>(), r["batch_size"].get<int>(), r["lr"].get<double>(),
                   r["seed"].get<std::uint64_t>(), r["beam"].get<int>()};
  f.validate();
  if (f.eval_beam < 1) throw ConfigError("beam: must be >= 1");
  if (f.epochs < 1) throw ConfigError("epochs: must be >= 1");
  return r;
}

struct CurveRow {
  int pretrain_step = 0;
  std::string regime;
  std::string checkpoint;
  double best_valid_cer = 0.0;
};

inline std::string curve_csv(const std::vector<CurveRow>& rows) {
  std::ostringstream os;
  os << "pretrain_step,regime,checkpoint,best_valid_cer\n";
  for (const auto& row : rows)
    os << row.pretrain_step << ',' << row.regime << ',' << row.checkpoint << ',' << format_real(row.best_valid_cer)
       << '\n';
  return os.str();
}

/// One fine-tune per checkpoint plus a from-scratch baseline; each row is
/// the lowest validation CER seen over the fine-tuning epochs.
inline int cmd_curve(const json& r, const fs::path& out, Env env) {
  const FinetuneConfig cfg{r.at("epochs").get<int>(), r.at("batch_size").get<int>(), r.at("lr").get<double>(),
                           r.at("seed").get<std::uint64_t>(), r.at("beam").get<int>()};
  const fs::path dir = r.at("checkpoints").get<std::string>();
  if (!fs::is_directory(dir)) throw ValidationError("checkpoint directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".params") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.size() < 2)
    throw ValidationError("curve needs at least 2 checkpoints in '" + dir.string() + "', found " +
                          std::to_string(files.size()));
  LanguageTask task = load_corpus(r.at("corpus").get<std::string>());
  const std::string split = r.at("split").get<std::string>();

  struct Loaded {
    fs::path path;
    LoadedCheckpoint ck;
  };
  std::vector<Loaded> loaded;
  for (const auto& f : files) {
    loaded.push_back({f, load_checkpoint(f.string())});
    require_compatible(loaded.back().ck.model, task, f.string());
  }
  std::stable_sort(loaded.begin(), loaded.end(),
                   [](const Loaded& a, const Loaded& b) { return a.ck.info.pretrain_step < b.ck.info.pretrain_step; });

  std::vector<CurveRow> rows;
  const EncoderConfig& enc = loaded.front().ck.model.config;
  MultiHeadModel scratch = init_model(enc, derive_seed(cfg.seed, "no-pretrain"));
  rows.push_back({0, "none", "no-pretrain", finetune(scratch, task, split, cfg).best_valid_cer()});
  env.out << "no-pretrain: best valid CER " << format_real(rows.back().best_valid_cer) << "\n";
  for (const auto& l : loaded) {
    if (!(l.ck.model.config == enc))
      throw ValidationError("checkpoint '" + l.path.string() + "' has a different encoder config");
    const double best = finetune(l.ck.model, task, split, cfg).best_valid_cer();
    rows.push_back({l.ck.info.pretrain_step, l.ck.info.regime, l.path.filename().string(), best});
    env.out << l.path.filename().string() << " (step " << l.ck.info.pretrain_step << "): best valid CER "
            << format_real(best) << "\n";
  }
  write_text(out / "curve.csv", curve_csv(rows));
  return kExitOk;
}

inline json resolve_selfcheck(const json& cfg) {
  require_known_keys(cfg, {"seed"}, "selfcheck");
  return {{"seed", get_or<std::uint64_t>(cfg, "seed", 1)}};
}

inline int cmd_selfcheck(const json& r, const fs::path* out, Env env) {
  selfcheck::Options opt;
  opt.seed = r.at("seed").get<std::uint64_t>();
  std::vector<selfcheck::CheckResult> results = selfcheck::run_all(opt);
  json report = json::array();
  for (const auto& res : results) {
    env.out << selfcheck::format_result(res) << "\n";
    report.push_back({{"name", res.name},
                      {"passed", res.passed},
                      {"worst", res.worst},
                      {"bound", res.tolerance},
                      {"instances", res.instances},
                      {"detail", res.detail}});
  }
  const bool ok = selfcheck::all_passed(results);
  env.out << (ok ? "all checks passed" : "SELF-CHECK FAILED") << "\n";
  if (out) write_text(*out / "selfcheck.json", json{{"passed", ok}, {"checks", report}}.dump(2) + "\n");
  return ok ? kExitOk : kExitNumeric;
}

// --- argument parsing -------------------------------------------------------------------

namespace detail {

/// Options whose values land in the command's config object when given.
class Bindings {
 public:
  explicit Bindings(CLI::App* app) : app_(app) {}

  template <typename T>
  Bindings& option(const std::string& flags, const std::string& key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app_->add_option(flags, *value, help);
    apply_.push_back([opt, value, key](json& cfg) {
      if (opt->count() > 0) cfg[key] = *value;
    });
    return *this;
  }

  Bindings& flag(const std::string& flags, const std::string& key, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app_->add_flag(flags, *value, help);
    apply_.push_back([opt, value, key](json& cfg) {
      if (opt->count() > 0) cfg[key] = *value;
    });
    return *this;
  }

  void apply(json& cfg) const {
    for (const auto& f : apply_) f(cfg);
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> apply_;
};

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<Bindings> bind;
  std::string config_path;
  std::string out_dir;
};

}  // namespace detail

/// Runs one command line; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multilingual CTC speech recognition with multitask and first-order meta-learning pretraining"};
  app.name("metasr");
  app.require_subcommand(1);
  std::map<std::string, detail::Command> cmds;
  auto add = [&](const std::string& name, const std::string& help) -> detail::Command& {
    detail::Command& c = cmds[name];
    c.app = app.add_subcommand(name, help);
    c.bind = std::make_unique<detail::Bindings>(c.app);
    c.app->add_option("--config", c.config_path, "JSON config file (a resolved_config.json also works)");
    c.bind->option<std::uint64_t>("--seed", "seed", "Master seed");
    return c;
  };

  auto& gen = add("generate", "Generate a synthetic language family as corpus files");
  gen.app->add_option("--out", gen.out_dir, "Output directory")->required();
  gen.bind->option<double>("--noise-sigma", "noise_sigma", "Frame noise standard deviation")
      .option<int>("--utterances", "utterances_per_language", "Full-split utterances per language")
      .option<std::vector<int>>("--duration", "duration_range", "Character duration range in frames: MIN MAX")
      .option<std::vector<int>>("--length", "length_range", "Transcript length range: MIN MAX")
      .option<int>("--feature-dim", "feature_dim", "Frame feature width");

  auto& pre = add("pretrain", "Pretrain a shared encoder on source corpora");
  pre.app->add_option("--out", pre.out_dir, "Output directory for checkpoints and train_log.csv")->required();
  pre.bind->option<std::string>("--regime", "regime", "multi or meta")
      .option<std::vector<std::string>>("--corpus", "corpora", "Source corpus file (repeatable)")
      .option<int>("--steps", "steps", "Pretraining steps")
      .option<int>("--checkpoint-every", "checkpoint_every", "Checkpoint cadence in steps")
      .option<double>("--multi-lr", "multi_lr", "Multitask SGD step size")
      .option<double>("--inner-lr", "inner_lr", "Meta inner-loop step size")
      .option<double>("--meta-lr", "meta_lr", "Meta outer step size")
      .option<int>("--tasks-per-episode", "tasks_per_episode", "Languages per step (0 = all)")
      .option<int>("--n-train", "n_train", "Inner-loop utterances per language")
      .option<int>("--n-test", "n_test", "Meta-test utterances per language")
      .option<int>("--inner-steps", "inner_steps", "Inner SGD steps")
      .option<int>("--hidden-dim", "hidden_dim", "Encoder width")
      .flag("--record-time", "record_time", "Log wall-clock time (makes logs non-reproducible)");

  auto& fin = add("finetune", "Fine-tune a checkpoint (or a fresh model) on a target corpus");
  fin.app->add_option("--out", fin.out_dir, "Output directory")->required();
  fin.bind->option<std::string>("--checkpoint", "checkpoint", "Pretrained checkpoint (.params or stem)")
      .flag("--no-pretrain", "no_pretrain", "Start from a randomly initialized encoder")
      .option<std::string>("--corpus", "corpus", "Target corpus file")
      .option<std::string>("--split", "split", "full or limited (default limited)")
      .option<int>("--epochs", "epochs", "Epochs (default 18 for full, 20 for limited)")
      .option<double>("--lr", "lr", "SGD step size")
      .option<int>("--batch-size", "batch_size", "Minibatch size")
      .option<int>("--eval-beam", "eval_beam", "Beam for per-epoch validation CER (0 = off)")
      .option<int>("--hidden-dim", "hidden_dim", "Encoder width with --no-pretrain");

  auto& ev = add("evaluate", "Decode a corpus split and write eval_report.json");
  ev.app->add_option("--out", ev.out_dir, "Output directory")->required();
  ev.bind->option<std::string>("--checkpoint", "checkpoint", "Fine-tuned checkpoint")
      .option<std::string>("--corpus", "corpus", "Corpus file")
      .option<std::string>("--split", "split", "Split to decode (default test)")
      .option<int>("--beam", "beam", "Beam width (default 20)");

  auto& cur = add("curve", "Fine-tune every checkpoint in a directory and write curve.csv");
  cur.app->add_option("--out", cur.out_dir, "Output directory")->required();
  cur.bind->option<std::string>("--checkpoints", "checkpoints", "Directory of pretraining checkpoints")
      .option<std::string>("--corpus", "corpus", "Target corpus file")
      .option<std::string>("--split", "split", "Fine-tuning split (default limited)")
      .option<int>("--epochs", "epochs", "Fine-tuning epochs per point (default 20)")
      .option<double>("--lr", "lr", "SGD step size")
      .option<int>("--batch-size", "batch_size", "Minibatch size")
      .option<int>("--beam", "beam", "Beam for validation CER (default 20)");

  auto& sc = add("selfcheck", "Run the gradient and oracle suites");
  sc.app->add_option("--out", sc.out_dir, "Optional directory for selfcheck.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  std::string name;
  for (auto& [n, c] : cmds)
    if (c.app->parsed()) name = n;
  detail::Command& cmd = cmds.at(name);
  try {
    json cfg = cmd.config_path.empty() ? json::object() : load_config(cmd.config_path, name);
    cmd.bind->apply(cfg);
    json resolved;
    if (name == "generate") resolved = resolve_generate(cfg);
    else if (name == "pretrain") resolved = resolve_pretrain(cfg);
    else if (name == "finetune") resolved = resolve_finetune(cfg);
    else if (name == "evaluate") resolved = resolve_evaluate(cfg);
    else if (name == "curve") resolved = resolve_curve(cfg);
    else resolved = resolve_selfcheck(cfg);

    Env env{out, err};
    if (cmd.out_dir.empty()) return cmd_selfcheck(resolved, nullptr, env);
    const fs::path dir = cmd.out_dir;
    OutputLock lock(dir);
    write_resolved_config(dir, name, resolved);
    if (name == "generate") return cmd_generate(resolved, dir, env);
    if (name == "pretrain") return cmd_pretrain(resolved, dir, env);
    if (name == "finetune") return cmd_finetune(resolved, dir, env);
    if (name == "evaluate") return cmd_evaluate(resolved, dir, env);
    if (name == "curve") return cmd_curve(resolved, dir, env);
    return cmd_selfcheck(resolved, &dir, env);
  } catch (const std::exception& e) {
    err << "metasr " << name << ": error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace metasr::cli
