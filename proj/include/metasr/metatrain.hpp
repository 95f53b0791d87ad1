#pragma once

// Training regimes: language-specific learning, multitask pretraining,
// first-order MAML pretraining, fine-tuning, evaluation and checkpoint
// selection.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metasr/ctc.hpp"
#include "metasr/diffcore.hpp"
#include "metasr/errors.hpp"
#include "metasr/model.hpp"
#include "metasr/rng.hpp"
#include "metasr/tasks.hpp"

namespace metasr {

struct EpisodeConfig {
  /// SGD step size of the inner (language-specific) update.
  double inner_lr = 0.005;
  /// Step size of the shared-encoder meta update. Twice multi_lr: the meta
  /// gradient sums n_test utterances, the multitask one n_train + n_test.
  double meta_lr = 0.01;
  /// Languages per episode; 0 means every source language.
  int tasks_per_episode = 0;
  int n_train = 8;
  int n_test = 8;
  int inner_steps = 1;

  /// `allow_zero_inner_lr` admits inner_lr = 0, used by tests and oracles.
  void validate(bool allow_zero_inner_lr = false) const {
    auto fail = [](const std::string& what) { throw ConfigError("episode config: " + what); };
    if (!(inner_lr > 0.0 || (allow_zero_inner_lr && inner_lr == 0.0))) fail("inner_lr must be positive");
    if (!(meta_lr > 0.0)) fail("meta_lr must be positive");
    if (tasks_per_episode < 0) fail("tasks_per_episode must be >= 0");
    if (n_train < 1) fail("n_train must be >= 1");
    if (n_test < 1) fail("n_test must be >= 1");
    if (inner_steps < 1) fail("inner_steps must be >= 1");
  }

  friend bool operator==(const EpisodeConfig&, const EpisodeConfig&) = default;
};

/// Train and test subsets drawn from one task for one episode.
struct TaskBatchSample {
  std::string task_id;
  std::vector<Utterance> train_set;
  std::vector<Utterance> test_set;
};

struct TrainRecord {
  int step = 0;
  std::string regime;
  std::string task_id;
  double task_loss = 0.0;
  double meta_loss = 0.0;
  double elapsed_seconds = 0.0;

  friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  void add(TrainRecord r) {
    if (!records.empty() && r.step < records.back().step)
      throw Error("train log: step " + std::to_string(r.step) + " after step " + std::to_string(records.back().step));
    records.push_back(std::move(r));
  }

  /// Objective value logged at `step` (meta-loss or multitask loss).
  std::optional<double> meta_loss_at(int step) const {
    for (const auto& r : records)
      if (r.step == step) return r.meta_loss;
    return std::nullopt;
  }

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_train_log_csv(std::ostream& os, const TrainLog& log) {
  os << "step,regime,task_id,task_loss,meta_loss,elapsed_seconds\n";
  for (const auto& r : log.records)
    os << r.step << ',' << r.regime << ',' << r.task_id << ',' << format_real(r.task_loss) << ','
       << format_real(r.meta_loss) << ',' << format_real(r.elapsed_seconds) << '\n';
}

// --- Learn -------------------------------------------------------------------

struct LearnResult {
  MultiHeadModel model;
  /// Loss on `data` after each step.
  std::vector<double> losses;
};

namespace detail {

inline MultiHeadModel apply_task_step(MultiHeadModel model, const std::string& task, const LossAndGrads& g,
                                      double lr) {
  model.encoder = sgd_step(model.encoder, g.grad_encoder, lr);
  model.heads.at(task) = sgd_step(model.heads.at(task), g.grad_head, lr);
  return model;
}

inline MultiHeadModel adapt(MultiHeadModel model, const std::string& task, std::span<const Utterance> data,
                            double lr, int steps) {
  for (int s = 0; s < steps; ++s) model = apply_task_step(std::move(model), task, batch_loss_and_grads(model, task, data), lr);
  return model;
}

}  // namespace detail

/// Gradient descent on the summed CTC loss of `data` over the encoder and
/// the task's head. Only those parameters change.
inline LearnResult learn(const MultiHeadModel& model, const std::string& task, std::span<const Utterance> data,
                         double lr, int steps) {
  model.head(task);
  if (data.empty()) throw ValidationError("learn: no data for task '" + task + "'");
  if (steps < 0) throw ConfigError("learn: steps must be >= 0");
  LearnResult out{model, {}};
  for (int s = 0; s < steps; ++s) {
    out.model = detail::apply_task_step(std::move(out.model), task, batch_loss_and_grads(out.model, task, data), lr);
    out.losses.push_back(batch_loss(out.model, task, data));
  }
  return out;
}

// --- MultiASR ------------------------------------------------------------------

using LanguageBatch = std::pair<std::string, std::vector<Utterance>>;

struct MultitaskGradient {
  double loss = 0.0;
  std::vector<double> task_losses;
  NamedParams grad_encoder;
  std::map<std::string, NamedParams> grad_heads;
};

/// Gradient of the summed loss over all batches.
inline MultitaskGradient multitask_gradient(const MultiHeadModel& model, std::span<const LanguageBatch> batches) {
  MultitaskGradient out;
  out.grad_encoder = model.encoder.zeros_like();
  for (const auto& [lang, batch] : batches) {
    LossAndGrads g = batch_loss_and_grads(model, lang, batch);
    out.loss += g.loss;
    out.task_losses.push_back(g.loss);
    out.grad_encoder += g.grad_encoder;
    auto [it, inserted] = out.grad_heads.try_emplace(lang, g.grad_head);
    if (!inserted) it->second += g.grad_head;
  }
  return out;
}

struct MultitaskResult {
  MultiHeadModel model;
  MultitaskGradient gradient;
};

/// One SGD step on the summed loss of every language's batch.
inline MultitaskResult multitask_step(const MultiHeadModel& model, std::span<const LanguageBatch> batches, double lr) {
  if (batches.empty()) throw ValidationError("multitask_step: no batches");
  for (const auto& [lang, _] : batches) model.head(lang);
  MultitaskResult out{model, multitask_gradient(model, batches)};
  out.model.encoder = sgd_step(model.encoder, out.gradient.grad_encoder, lr);
  for (const auto& [lang, g] : out.gradient.grad_heads) out.model.heads.at(lang) = sgd_step(model.head(lang), g, lr);
  return out;
}

// --- MetaASR (first-order MAML) -------------------------------------------

struct MetaEpisode {
  /// Summed test-set gradient at the adapted encoders, encoder names only.
  NamedParams meta_grad_encoder;
  /// Summed adapted test loss over the sampled tasks.
  double meta_loss = 0.0;
  std::vector<double> task_losses;
  /// Inner-adapted heads of the sampled tasks.
  std::map<std::string, NamedParams> adapted_heads;
};

/// For each sample: adapt on its train set, then take the test-set loss and
/// its encoder gradient at the adapted parameters. Sums run in sample order.
inline MetaEpisode meta_episode(const MultiHeadModel& model, std::span<const TaskBatchSample> samples,
                                const EpisodeConfig& cfg) {
  cfg.validate(/*allow_zero_inner_lr=*/true);
  if (samples.empty()) throw ValidationError("meta_episode: no task samples");
  MetaEpisode out;
  out.meta_grad_encoder = model.encoder.zeros_like();
  for (const auto& sample : samples) {
    try {
      model.head(sample.task_id);
      MultiHeadModel adapted =
          detail::adapt(model, sample.task_id, sample.train_set, cfg.inner_lr, cfg.inner_steps);
      LossAndGrads te = batch_loss_and_grads(adapted, sample.task_id, sample.test_set);
      out.meta_grad_encoder += te.grad_encoder;
      out.meta_loss += te.loss;
      out.task_losses.push_back(te.loss);
      out.adapted_heads[sample.task_id] = adapted.head(sample.task_id);
    } catch (const InfeasibleError& e) {
      throw InfeasibleError("task '" + sample.task_id + "': " + e.what());
    } catch (const LookupError& e) {
      throw LookupError("task '" + sample.task_id + "': " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("task '" + sample.task_id + "': " + e.what());
    }
  }
  return out;
}

/// Encoder <- encoder - meta_lr * meta gradient. Sampled tasks' heads keep
/// their inner adaptation; the meta step itself never touches heads.
inline MultiHeadModel meta_update(MultiHeadModel model, const MetaEpisode& episode, const EpisodeConfig& cfg) {
  if (!episode.meta_grad_encoder.same_layout(model.encoder))
    throw DimensionError("meta_update: gradient layout " + episode.meta_grad_encoder.describe() +
                         " does not match encoder " + model.encoder.describe());
  model.encoder = sgd_step(model.encoder, episode.meta_grad_encoder, cfg.meta_lr);
  for (const auto& [lang, head] : episode.adapted_heads) {
    NamedParams& dst = model.heads.at(lang);
    dst.require_same_layout(head, "meta_update head " + lang);
    dst = head;
  }
  return model;
}

// --- meta-gradient oracles ---------------------------------------------------

/// Inner SGD on the union of meta and task parameters.
template <typename TrainGradFn>
NamedParams inner_adapt(NamedParams params, TrainGradFn&& train_grad, double inner_lr, int inner_steps) {
  for (int s = 0; s < inner_steps; ++s) params = sgd_step(params, train_grad(static_cast<const NamedParams&>(params)), inner_lr);
  return params;
}

/// First-order meta-gradient: the test gradient at the adapted parameters,
/// restricted to the meta parameters' names.
template <typename TrainGradFn, typename TestGradFn>
NamedParams fomaml_meta_grad(const NamedParams& meta_params, const NamedParams& task_params, TrainGradFn&& train_grad,
                             TestGradFn&& test_grad, double inner_lr, int inner_steps) {
  NamedParams adapted = inner_adapt(meta_params.merged(task_params), train_grad, inner_lr, inner_steps);
  NamedParams g = test_grad(static_cast<const NamedParams&>(adapted));
  NamedParams out;
  for (const auto& [name, _] : meta_params) out.set(name, g.at(name));
  return out;
}

/// Full meta-gradient d/d(meta) test_loss(inner_adapt(meta, task)) by
/// central differences, second-order effects included.
template <typename TrainGradFn, typename TestLossFn>
NamedParams exact_meta_grad_fd(const NamedParams& meta_params, const NamedParams& task_params, TrainGradFn&& train_grad,
                               TestLossFn&& test_loss, double inner_lr, int inner_steps, double step = 1e-5) {
  return finite_diff_grad(
      [&](const NamedParams& meta) {
        return test_loss(static_cast<const NamedParams&>(
            inner_adapt(meta.merged(task_params), train_grad, inner_lr, inner_steps)));
      },
      meta_params, step);
}

inline constexpr std::size_t kExactMetaGradMaxParams = 2000;

/// Finite-difference meta-gradient of a model's encoder for one task sample.
/// Restricted to models with at most 2000 parameters.
inline NamedParams exact_meta_grad_fd(const MultiHeadModel& model, const TaskBatchSample& sample,
                                      const EpisodeConfig& cfg, double step = 1e-5) {
  if (model.num_parameters() > kExactMetaGradMaxParams)
    throw GuardError("exact_meta_grad_fd: model has " + std::to_string(model.num_parameters()) +
                     " parameters, limit is " + std::to_string(kExactMetaGradMaxParams));
  cfg.validate(/*allow_zero_inner_lr=*/true);
  const std::string& task = sample.task_id;
  auto with_params = [&](const NamedParams& flat) {
    MultiHeadModel m = model;
    m.encoder.assign_from(flat.with_prefix(kEncoderPrefix));
    m.heads.at(task).assign_from(flat.with_prefix(head_prefix(task)));
    return m;
  };
  auto train_grad = [&](const NamedParams& flat) {
    LossAndGrads g = batch_loss_and_grads(with_params(flat), task, sample.train_set);
    return g.grad_encoder.merged(g.grad_head);
  };
  auto test_loss = [&](const NamedParams& flat) { return batch_loss(with_params(flat), task, sample.test_set); };
  return exact_meta_grad_fd(model.encoder, model.head(task), train_grad, test_loss, cfg.inner_lr, cfg.inner_steps, step);
}

// --- pretraining -------------------------------------------------------------

enum class Regime { kMulti, kMeta };

inline const char* to_string(Regime r) { return r == Regime::kMulti ? "multi" : "meta"; }

inline Regime regime_from_string(const std::string& s) {
  if (s == "multi") return Regime::kMulti;
  if (s == "meta") return Regime::kMeta;
  throw ConfigError("regime must be 'multi' or 'meta', got '" + s + "'");
}

struct PretrainConfig {
  Regime regime = Regime::kMeta;
  EpisodeConfig episode;
  /// SGD step size of the multitask regime. Each multitask step sees
  /// n_train + n_test utterances per sampled language, the same data as one
  /// meta episode.
  double multi_lr = 0.005;
  int total_steps = 2000;
  int checkpoint_every = 200;
  std::uint64_t seed = 1;
  /// Record wall-clock time in the log; off keeps logs bit-reproducible.
  bool record_time = false;

  void validate() const {
    episode.validate();
    if (!(multi_lr > 0.0)) throw ConfigError("pretrain: multi_lr must be positive");
    if (total_steps < 1) throw ConfigError("pretrain: total_steps must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("pretrain: checkpoint_every must be >= 1");
  }
};

struct Checkpoint {
  int step = 0;
  MultiHeadModel model;
};

struct PretrainResult {
  std::vector<Checkpoint> checkpoints;
  TrainLog log;
  MultiHeadModel final_model;
};

/// Seeded per-episode samples: tasks uniformly without replacement (kept in
/// task order), then disjoint train/test utterance subsets per task.
inline std::vector<TaskBatchSample> sample_episode(std::span<const LanguageTask> tasks, const EpisodeConfig& cfg,
                                                   Rng& rng) {
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = cfg.tasks_per_episode == 0 ? tasks.size()
                                                   : std::min(tasks.size(), static_cast<std::size_t>(cfg.tasks_per_episode));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(k);
  std::sort(order.begin(), order.end());
  std::vector<TaskBatchSample> out;
  for (std::size_t i : order) {
    const LanguageTask& task = tasks[i];
    const std::size_t need = static_cast<std::size_t>(cfg.n_train + cfg.n_test);
    if (task.full.size() < need)
      throw ValidationError("task '" + task.id + "' has " + std::to_string(task.full.size()) +
                            " utterances, an episode needs " + std::to_string(need));
    std::vector<std::size_t> idx(task.full.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Partial Fisher-Yates: first `need` entries become the sample.
    for (std::size_t j = 0; j < need; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, idx.size() - 1);
      std::swap(idx[j], idx[pick(rng)]);
    }
    TaskBatchSample s{task.id, {}, {}};
    for (std::size_t j = 0; j < need; ++j)
      (j < static_cast<std::size_t>(cfg.n_train) ? s.train_set : s.test_set).push_back(task.full[idx[j]]);
    out.push_back(std::move(s));
  }
  return out;
}

/// Adds a seeded fresh head for every task the model lacks.
inline MultiHeadModel ensure_heads(MultiHeadModel model, std::span<const LanguageTask> tasks, std::uint64_t seed) {
  for (const auto& t : tasks)
    if (!model.has_language(t.id)) model = with_language(std::move(model), t.id, t.alphabet, seed);
  return model;
}

using CheckpointSink = std::function<void(const Checkpoint&)>;

/// Multitask or first-order-MAML pretraining on the tasks' full splits.
/// Checkpoints are kept every `checkpoint_every` steps and at the last step.
inline PretrainResult pretrain(const MultiHeadModel& initial, std::span<const LanguageTask> tasks,
                               const PretrainConfig& cfg, const CheckpointSink& sink = {}) {
  cfg.validate();
  if (tasks.empty()) throw ValidationError("pretrain: no source tasks");
  PretrainResult out;
  MultiHeadModel model = ensure_heads(initial, tasks, cfg.seed);
  const auto start = std::chrono::steady_clock::now();
  const std::string regime = to_string(cfg.regime);
  for (int step = 1; step <= cfg.total_steps; ++step) {
    Rng rng(derive_seed(cfg.seed, "pretrain-step", static_cast<std::uint64_t>(step)));
    std::vector<TaskBatchSample> samples = sample_episode(tasks, cfg.episode, rng);
    std::vector<double> task_losses;
    double objective = 0.0;
    try {
      if (cfg.regime == Regime::kMeta) {
        MetaEpisode ep = meta_episode(model, samples, cfg.episode);
        model = meta_update(std::move(model), ep, cfg.episode);
        task_losses = ep.task_losses;
        objective = ep.meta_loss;
      } else {
        std::vector<LanguageBatch> batches;
        for (auto& s : samples) {
          std::vector<Utterance> batch = std::move(s.train_set);
          batch.insert(batch.end(), s.test_set.begin(), s.test_set.end());
          batches.emplace_back(s.task_id, std::move(batch));
        }
        MultitaskResult r = multitask_step(model, batches, cfg.multi_lr);
        model = std::move(r.model);
        task_losses = r.gradient.task_losses;
        objective = r.gradient.loss;
      }
    } catch (const InfeasibleError& e) {
      throw InfeasibleError("pretrain step " + std::to_string(step) + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("pretrain step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(objective) || !model.encoder.all_finite())
      throw NumericError("pretrain step " + std::to_string(step) + ": training diverged (objective " +
                         format_real(objective) + ")");
    const double elapsed =
        cfg.record_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() : 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i)
      out.log.add({step, regime, samples[i].task_id, task_losses[i], objective, elapsed});
    if (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) {
      Checkpoint ckpt{step, model};
      if (sink) {
        try {
          sink(ckpt);
        } catch (const std::exception& e) {
          throw Error("pretrain step " + std::to_string(step) + ": writing checkpoint failed: " + e.what());
        }
      }
      out.checkpoints.push_back(std::move(ckpt));
    }
  }
  out.final_model = std::move(model);
  return out;
}

// --- fine-tuning and evaluation ----------------------------------------------

struct FinetuneConfig {
  int epochs = 20;
  int batch_size = 5;
  double lr = 0.005;
  std::uint64_t seed = 1;
  /// Beam width for per-epoch validation CER; 0 skips CER tracking.
  int eval_beam = 1;

  void validate() const {
    if (epochs < 0) throw ConfigError("finetune: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("finetune: lr must be positive");
    if (eval_beam < 0) throw ConfigError("finetune: eval_beam must be >= 0");
  }
};

struct EpochRecord {
  int epoch = 0;
  /// Mean per-utterance loss over the epoch's minibatch updates.
  double train_loss = 0.0;
  /// Mean per-utterance loss on the validation set after the epoch.
  double valid_loss = 0.0;
  /// Validation CER after the epoch; NaN when not tracked.
  double valid_cer = 0.0;
};

struct FinetuneResult {
  MultiHeadModel model;
  std::vector<EpochRecord> epochs;

  /// Lowest validation CER across epochs; NaN if none recorded.
  double best_valid_cer() const {
    double best = std::numeric_limits<double>::quiet_NaN();
    for (const auto& e : epochs)
      if (!std::isnan(e.valid_cer) && (std::isnan(best) || e.valid_cer < best)) best = e.valid_cer;
    return best;
  }
};

struct EvalPair {
  std::string uid;
  LabelSequence ref;
  LabelSequence hyp;
  std::size_t edits = 0;
};

struct EvalResult {
  std::vector<EvalPair> pairs;
  std::size_t total_edits = 0;
  std::size_t total_ref_len = 0;
  double cer = 0.0;
};

inline EvalResult evaluate(const MultiHeadModel& model, const std::string& lang, std::span<const Utterance> data,
                           int beam = kDefaultBeam) {
  model.head(lang);
  EvalResult out;
  std::vector<LabelSequence> refs;
  std::vector<LabelSequence> hyps;
  for (const auto& u : data) {
    LabelSequence hyp = decode(model, lang, u.features, beam);
    const std::size_t e = edit_distance(u.transcript, hyp);
    out.total_edits += e;
    out.total_ref_len += u.transcript.size();
    refs.push_back(u.transcript);
    hyps.push_back(hyp);
    out.pairs.push_back({u.uid, u.transcript, std::move(hyp), e});
  }
  out.cer = cer(refs, hyps);
  return out;
}

/// Minibatch SGD on `train` (Learn on the target language). A language the
/// model has not seen gets a fresh head seeded from cfg.seed.
inline FinetuneResult finetune(const MultiHeadModel& model, const std::string& lang, const Alphabet& alphabet,
                               std::span<const Utterance> train, std::span<const Utterance> valid,
                               const FinetuneConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ValidationError("finetune: empty training split for '" + lang + "'");
  FinetuneResult out{model, {}};
  if (!out.model.has_language(lang))
    out.model = with_language(std::move(out.model), lang, alphabet, derive_seed(cfg.seed, "finetune-head"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "finetune-epoch", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<Utterance> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i)
        batch.push_back(train[order[i]]);
      LossAndGrads g = batch_loss_and_grads(out.model, lang, batch);
      if (!std::isfinite(g.loss)) throw NumericError("finetune epoch " + std::to_string(epoch) + ": non-finite loss");
      epoch_loss += g.loss;
      out.model = detail::apply_task_step(std::move(out.model), lang, g, cfg.lr);
    }
    if (!out.model.encoder.all_finite())
      throw NumericError("finetune epoch " + std::to_string(epoch) + ": parameters diverged");
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(train.size()), std::numeric_limits<double>::quiet_NaN(),
                    std::numeric_limits<double>::quiet_NaN()};
    if (!valid.empty()) {
      rec.valid_loss = batch_loss(out.model, lang, valid) / static_cast<double>(valid.size());
      if (cfg.eval_beam > 0) rec.valid_cer = evaluate(out.model, lang, valid, cfg.eval_beam).cer;
    }
    out.epochs.push_back(rec);
  }
  return out;
}

inline FinetuneResult finetune(const MultiHeadModel& model, const LanguageTask& task, const std::string& split,
                               const FinetuneConfig& cfg) {
  return finetune(model, task.id, task.alphabet, task.split(split), task.test, cfg);
}

/// Fine-tunes every checkpoint on each validation task's limited split and
/// returns the index of the checkpoint with the lowest mean test CER; the
/// earliest step wins ties.
inline std::size_t select_checkpoint(std::span<const Checkpoint> checkpoints, std::span<const LanguageTask> validation,
                                     const FinetuneConfig& cfg, int beam = kDefaultBeam,
                                     std::vector<double>* scores = nullptr) {
  if (checkpoints.empty()) throw ValidationError("select_checkpoint: no checkpoints");
  if (validation.empty()) throw ValidationError("select_checkpoint: no validation tasks");
  std::vector<std::size_t> order(checkpoints.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return checkpoints[a].step < checkpoints[b].step; });
  if (scores) scores->assign(checkpoints.size(), std::numeric_limits<double>::quiet_NaN());
  if (checkpoints.size() == 1) return 0;
  FinetuneConfig quiet = cfg;
  quiet.eval_beam = 0;
  std::size_t best = order.front();
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t i : order) {
    double total = 0.0;
    for (const auto& task : validation) {
      FinetuneResult ft = finetune(checkpoints[i].model, task.id, task.alphabet, task.limited, {}, quiet);
      total += evaluate(ft.model, task.id, task.test, beam).cer;
    }
    const double score = total / static_cast<double>(validation.size());
    if (scores) (*scores)[i] = score;
    if (score < best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

}  // namespace metasr
