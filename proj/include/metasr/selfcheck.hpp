#pragma once

// Oracle suites: CTC brute-force equivalence, finite-difference gradient
// checks, FOMAML against the exact meta-gradient, and decoder exactness.
// Used by `metasr selfcheck` and the acceptance runner.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "metasr/ctc.hpp"
#include "metasr/diffcore.hpp"
#include "metasr/metatrain.hpp"
#include "metasr/model.hpp"
#include "metasr/params.hpp"
#include "metasr/rng.hpp"
#include "metasr/tasks.hpp"

namespace metasr::selfcheck {

using CtcFn = std::function<CtcResult(const LogProbLattice&, const LabelSequence&)>;

struct Options {
  std::uint64_t seed = 1;
  /// CTC implementation under test; tests swap in faulty versions.
  CtcFn ctc = [](const LogProbLattice& l, const LabelSequence& t) { return ctc_loss(l, t); };
};

struct CheckResult {
  std::string name;
  bool passed = false;
  /// Worst observed error (or ratio) and the bound it was held to.
  double worst = 0.0;
  double tolerance = 0.0;
  int instances = 0;
  double seconds = 0.0;
  std::string detail;
};

// --- oracle helpers ----------------------------------------------------------

/// max over entries of |a - b| / max(|a|, |b|, floor).
inline double max_rel_error(const Matrix& a, const Matrix& b, double floor = 1e-4) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    const double e = std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor});
    if (!(e <= worst)) worst = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
  }
  return worst;
}

inline double max_rel_error(const NamedParams& a, const NamedParams& b, double floor = 1e-4) {
  if (!a.same_layout(b)) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  auto it = b.begin();
  for (const auto& [_, m] : a) worst = std::max(worst, max_rel_error(m, (it++)->second, floor));
  return worst;
}

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline LogProbLattice random_lattice(Eigen::Index frames, int emissions, Rng& rng) {
  return {log_softmax(gaussian(frames, emissions, rng, 1.5))};
}

/// Random target of length <= frames that is feasible for `frames`.
inline LabelSequence random_feasible_target(Eigen::Index frames, int alphabet, Rng& rng) {
  std::uniform_int_distribution<int> sym(0, alphabet - 1);
  std::uniform_int_distribution<int> len(0, static_cast<int>(frames));
  for (;;) {
    LabelSequence t(static_cast<std::size_t>(len(rng)));
    for (auto& l : t) l = sym(rng);
    if (min_frames_for(t) <= static_cast<std::size_t>(frames)) return t;
  }
}

/// Most probable label sequence by exhaustive enumeration of alignment
/// paths; ties go to the lexicographically smallest sequence.
inline LabelSequence brute_force_argmax(const LogProbLattice& lat) {
  const Eigen::Index frames = lat.frames();
  const int emissions = static_cast<int>(lat.log_probs.cols());
  std::map<LabelSequence, double> mass;
  AlignmentPath path(static_cast<std::size_t>(frames), 0);
  for (;;) {
    double lp = 0.0;
    for (Eigen::Index t = 0; t < frames; ++t) lp += lat.log_probs(t, path[static_cast<std::size_t>(t)]);
    auto [it, fresh] = mass.try_emplace(collapse(path), lp);
    if (!fresh) it->second = log_sum_exp(it->second, lp);
    std::size_t t = 0;
    while (t < path.size() && ++path[t] == emissions) path[t++] = 0;
    if (t == path.size()) break;
  }
  LabelSequence best;
  double best_lp = kLogZero;
  bool first = true;
  for (const auto& [seq, lp] : mass) {
    if (first || lp > best_lp) {
      best = seq;
      best_lp = lp;
      first = false;
    }
  }
  return best;
}

namespace detail {

template <typename Body>
CheckResult timed(const std::string& name, double tolerance, Body&& body) {
  CheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline void note_worst(CheckResult& r, double err, const std::string& where) {
  if (!(err <= r.worst)) {
    r.worst = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
    r.detail = "worst at " + where;
  }
}

inline Alphabet letters(int n) {
  std::vector<std::string> s;
  for (int i = 0; i < n; ++i) s.emplace_back(1, static_cast<char>('a' + i));
  return Alphabet(s);
}

}  // namespace detail

// --- CTC ---------------------------------------------------------------------

/// |ctc - brute force| on random instances with T' <= 6, |symbols| <= 3,
/// plus the uniform 1/3, T' = 3, "ab" -> 5/27 case.
inline CheckResult check_ctc_brute_force(const Options& opt, int instances = 500, double tol = 1e-10) {
  return detail::timed("ctc_brute_force", tol, [&](CheckResult& r) {
    Rng rng(derive_seed(opt.seed, "selfcheck:ctc-bf"));
    std::uniform_int_distribution<int> frames_d(1, 6);
    std::uniform_int_distribution<int> alpha_d(1, 3);
    for (int i = 0; i < instances; ++i) {
      const int frames = frames_d(rng);
      const int alpha = alpha_d(rng);
      LogProbLattice lat = random_lattice(frames, alpha + 1, rng);
      LabelSequence target = random_feasible_target(frames, alpha, rng);
      detail::note_worst(r, std::abs(opt.ctc(lat, target).loss - ctc_brute_force(lat, target)),
                         "instance " + std::to_string(i));
    }
    LogProbLattice uniform{Matrix::Constant(3, 3, -std::log(3.0))};
    detail::note_worst(r, std::abs(opt.ctc(uniform, {0, 1}).loss + std::log(5.0 / 27.0)), "uniform 5/27 case");
    r.instances = instances + 1;
    r.passed = r.worst < tol;
  });
}

/// Lattice gradient, projected through log-softmax, against central
/// differences of the loss in the logits.
inline CheckResult check_ctc_gradient(const Options& opt, int instances = 20, double tol = 1e-6) {
  return detail::timed("ctc_gradient", tol, [&](CheckResult& r) {
    Rng rng(derive_seed(opt.seed, "selfcheck:ctc-grad"));
    std::uniform_int_distribution<int> frames_d(1, 6);
    std::uniform_int_distribution<int> alpha_d(1, 3);
    for (int i = 0; i < instances; ++i) {
      const int frames = frames_d(rng);
      const int alpha = alpha_d(rng);
      const Matrix logits = gaussian(frames, alpha + 1, rng, 1.5);
      LogProbLattice lat{log_softmax(logits)};
      LabelSequence target = random_feasible_target(frames, alpha, rng);
      CtcResult c = opt.ctc(lat, target);
      const Matrix probs = lat.log_probs.array().exp().matrix();
      const Matrix projected = c.grad - (probs.array().colwise() * c.grad.rowwise().sum().array()).matrix();
      NamedParams p({{"z", logits}});
      NamedParams fd = finite_diff_grad(
          [&](const NamedParams& q) { return opt.ctc(LogProbLattice{log_softmax(q.at("z"))}, target).loss; }, p, 1e-5);
      detail::note_worst(r, max_rel_error(fd.at("z"), projected), "instance " + std::to_string(i));
    }
    r.instances = instances;
    r.passed = r.worst < tol;
  });
}

// --- diffcore layers -----------------------------------------------------------

inline std::vector<LayerSpec> check_layer_specs() {
  return {frame_stack_layer("l.stack", 4, 2), affine_layer("l.proj", 4, 3), tanh_layer("l.tanh", 4),
          recurrent_bidi_layer("l.rnn", 4, 4)};
}

/// Input and parameter gradients of every layer kind, loss = <W, layer(x)>.
inline CheckResult check_layer_gradients(const Options& opt, int instances = 20, double tol = 1e-6) {
  return detail::timed("layer_gradients", tol, [&](CheckResult& r) {
    for (const auto& spec : check_layer_specs()) {
      Rng rng(derive_seed(opt.seed, "selfcheck:layer:" + spec.name));
      std::uniform_int_distribution<int> rows_d(1, 7);
      for (int i = 0; i < instances; ++i) {
        NamedParams p = init_layer_params(spec, rng);
        const Matrix x = gaussian(rows_d(rng), spec.input_dim, rng);
        auto [out, cache] = forward_layer(spec, p, x);
        const Matrix w = gaussian(out.rows(), out.cols(), rng);
        auto loss = [&](const NamedParams& params, const Matrix& input) {
          return forward_layer(spec, params, input).first.cwiseProduct(w).sum();
        };
        auto [gin, gp] = backward_layer(spec, p, cache, w);
        NamedParams fd_in =
            finite_diff_grad([&](const NamedParams& q) { return loss(p, q.at("x")); }, NamedParams({{"x", x}}), 1e-5);
        const std::string where = std::string(to_string(spec.kind)) + " instance " + std::to_string(i);
        detail::note_worst(r, max_rel_error(fd_in.at("x"), gin), where + " (input)");
        if (!p.empty()) {
          NamedParams fd_p = finite_diff_grad([&](const NamedParams& q) { return loss(q, x); }, p, 1e-5);
          detail::note_worst(r, max_rel_error(fd_p, gp), where + " (params)");
        }
        ++r.instances;
      }
    }
    r.passed = r.worst < tol;
  });
}

// --- end to end ------------------------------------------------------------------

/// utterance_loss_and_grads over every encoder and head parameter of a tiny
/// model (feature 3, hidden 4, 2 symbols, T = 6).
inline CheckResult check_end_to_end_gradient(const Options& opt, int instances = 20, double tol = 1e-5) {
  return detail::timed("end_to_end_gradient", tol, [&](CheckResult& r) {
    const EncoderConfig cfg = default_encoder_config(3, 4, 2);
    for (int i = 0; i < instances; ++i) {
      const std::uint64_t s = derive_seed(opt.seed, "selfcheck:e2e", static_cast<std::uint64_t>(i));
      MultiHeadModel m = with_language(init_model(cfg, s), "xx", detail::letters(2), s);
      Rng rng(s);
      const Matrix x = gaussian(6, 3, rng);
      const LabelSequence c = random_feasible_target(cfg.output_frames(6), 2, rng);
      LossAndGrads g = utterance_loss_and_grads_with(m, "xx", x, c, opt.ctc);
      NamedParams fd = finite_diff_grad(
          [&](const NamedParams& q) {
            MultiHeadModel probe = m;
            probe.assign_all(q);
            return opt.ctc(head_forward(probe, "xx", encode(probe, x).hidden), c).loss;
          },
          m.all_params(), 1e-5);
      detail::note_worst(r, max_rel_error(fd, g.grad_encoder.merged(g.grad_head)), "instance " + std::to_string(i));
    }
    r.instances = instances;
    r.passed = r.worst < tol;
  });
}

// --- FOMAML -------------------------------------------------------------------------

struct TinyMetaProblem {
  MultiHeadModel model;
  TaskBatchSample sample;
};

/// One small noisy language and a <= 2000-parameter model.
inline TinyMetaProblem tiny_meta_problem(std::uint64_t seed) {
  SyntheticFamilyConfig c;
  c.n_languages = 1;
  c.n_source = 1;
  c.alphabet_sizes = {3};
  c.feature_dim = 3;
  c.shared_pool_size = 4;
  c.length_min = 2;
  c.length_max = 3;
  c.noise_sigma = 0.5;
  c.utterances_per_language = 10;
  c.test_utterances = 1;
  c.seed = seed;
  auto tasks = generate_family(c);
  // One training utterance keeps the summed inner loss's curvature small
  // enough that inner_lr 0.1 is already in the linear regime.
  EpisodeConfig ep;
  ep.n_train = 1;
  ep.n_test = 2;
  Rng rng(seed);
  MultiHeadModel m = ensure_heads(init_model(default_encoder_config(3, 4, 2), seed), tasks, seed);
  return {std::move(m), sample_episode(tasks, ep, rng)[0]};
}

/// ||FOMAML - exact|| / ||exact|| at `inner_lr`.
inline double fomaml_relative_error(const TinyMetaProblem& p, double inner_lr) {
  EpisodeConfig cfg;
  cfg.inner_lr = inner_lr;
  std::vector<TaskBatchSample> s{p.sample};
  NamedParams fo = meta_episode(p.model, s, cfg).meta_grad_encoder;
  NamedParams exact = exact_meta_grad_fd(p.model, p.sample, cfg);
  return (fo - exact).norm() / exact.norm();
}

/// With inner_lr = 0 the meta-gradient is the multitask test-set gradient.
inline CheckResult check_fomaml_zero_inner_lr(const Options& opt, int instances = 10, double tol = 1e-12) {
  return detail::timed("fomaml_zero_inner_lr", tol, [&](CheckResult& r) {
    for (int i = 0; i < instances; ++i) {
      TinyMetaProblem p = tiny_meta_problem(derive_seed(opt.seed, "selfcheck:fomaml0", static_cast<std::uint64_t>(i)));
      EpisodeConfig cfg;
      cfg.inner_lr = 0.0;
      std::vector<TaskBatchSample> s{p.sample};
      MetaEpisode ep = meta_episode(p.model, s, cfg);
      std::vector<LanguageBatch> b{{p.sample.task_id, p.sample.test_set}};
      detail::note_worst(r, (ep.meta_grad_encoder - multitask_gradient(p.model, b).grad_encoder).max_abs(),
                         "instance " + std::to_string(i));
    }
    r.instances = instances;
    r.passed = r.worst < tol;
  });
}

/// Halving inner_lr (0.1 -> 0.05 -> 0.025) at least halves the FOMAML error
/// up to a 1.5x slack: e(lr/2) <= 0.75 e(lr). `worst` is the largest ratio.
inline CheckResult check_fomaml_linear(const Options& opt, int seeds = 10, double slack = 1.5) {
  return detail::timed("fomaml_vs_exact", 0.5 * slack, [&](CheckResult& r) {
    std::ostringstream os;
    for (int i = 0; i < seeds; ++i) {
      TinyMetaProblem p = tiny_meta_problem(derive_seed(opt.seed, "selfcheck:fomaml", static_cast<std::uint64_t>(i)));
      const double e1 = fomaml_relative_error(p, 0.1);
      const double e2 = fomaml_relative_error(p, 0.05);
      const double e3 = fomaml_relative_error(p, 0.025);
      detail::note_worst(r, e2 / e1, "seed " + std::to_string(i) + " (0.1 -> 0.05)");
      detail::note_worst(r, e3 / e2, "seed " + std::to_string(i) + " (0.05 -> 0.025)");
    }
    r.instances = seeds;
    r.passed = r.worst <= 0.5 * slack;
  });
}

/// loss_tr = theta^2, loss_te = (theta - 1)^2, theta = 1, inner_lr = 0.1:
/// exact meta-gradient -0.32, FOMAML -0.4.
inline CheckResult check_fomaml_scalar(const Options&, double tol = 1e-9) {
  return detail::timed("fomaml_scalar_closed_form", tol, [&](CheckResult& r) {
    NamedParams theta({{"theta", Matrix::Constant(1, 1, 1.0)}});
    auto train_grad = [](const NamedParams& p) { return 2.0 * p; };
    auto test_grad = [](const NamedParams& p) {
      NamedParams g = p;
      g.at("theta").array() -= 1.0;
      return 2.0 * g;
    };
    auto test_loss = [](const NamedParams& p) {
      const double d = p.at("theta")(0, 0) - 1.0;
      return d * d;
    };
    const NamedParams none;
    const double exact = exact_meta_grad_fd(theta, none, train_grad, test_loss, 0.1, 1).at("theta")(0, 0);
    const double fo = fomaml_meta_grad(theta, none, train_grad, test_grad, 0.1, 1).at("theta")(0, 0);
    detail::note_worst(r, std::abs(exact + 0.32), "exact meta-gradient");
    detail::note_worst(r, std::abs(fo + 0.4), "FOMAML meta-gradient");
    r.instances = 1;
    r.passed = r.worst < tol;
  });
}

// --- decoding --------------------------------------------------------------------

/// Saturating beam equals the exhaustive argmax for T' <= 4, |symbols| <= 2.
inline CheckResult check_beam_exact(const Options& opt, int instances = 300) {
  return detail::timed("beam_saturating_exact", 0.0, [&](CheckResult& r) {
    Rng rng(derive_seed(opt.seed, "selfcheck:beam"));
    std::uniform_int_distribution<int> frames_d(1, 4);
    std::uniform_int_distribution<int> alpha_d(1, 2);
    int mismatches = 0;
    for (int i = 0; i < instances; ++i) {
      LogProbLattice lat = random_lattice(frames_d(rng), alpha_d(rng) + 1, rng);
      if (beam_decode(lat, 81) != brute_force_argmax(lat)) {
        if (mismatches++ == 0) r.detail = "first mismatch at instance " + std::to_string(i);
      }
    }
    r.worst = mismatches;
    r.instances = instances;
    r.passed = mismatches == 0;
  });
}

inline CheckResult check_beam_one_greedy(const Options& opt, int instances = 100) {
  return detail::timed("beam1_equals_greedy", 0.0, [&](CheckResult& r) {
    Rng rng(derive_seed(opt.seed, "selfcheck:beam1"));
    std::uniform_int_distribution<int> frames_d(1, 12);
    std::uniform_int_distribution<int> alpha_d(1, 5);
    int mismatches = 0;
    for (int i = 0; i < instances; ++i) {
      LogProbLattice lat = random_lattice(frames_d(rng), alpha_d(rng) + 1, rng);
      if (beam_decode(lat, 1) != greedy_decode(lat)) {
        if (mismatches++ == 0) r.detail = "first mismatch at instance " + std::to_string(i);
      }
    }
    r.worst = mismatches;
    r.instances = instances;
    r.passed = mismatches == 0;
  });
}

inline std::vector<CheckResult> run_all(const Options& opt = {}) {
  return {check_ctc_brute_force(opt),     check_ctc_gradient(opt),  check_layer_gradients(opt),
          check_end_to_end_gradient(opt), check_fomaml_zero_inner_lr(opt), check_fomaml_linear(opt),
          check_fomaml_scalar(opt),       check_beam_exact(opt),    check_beam_one_greedy(opt)};
}

inline bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

inline std::string format_result(const CheckResult& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%s %-24s worst=%.3g bound=%.3g n=%d %.2fs%s%s", r.passed ? "PASS" : "FAIL",
                r.name.c_str(), r.worst, r.tolerance, r.instances, r.seconds, r.detail.empty() ? "" : " ",
                r.detail.c_str());
  return buf;
}

}  // namespace metasr::selfcheck
