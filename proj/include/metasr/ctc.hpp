#pragma once

// CTC loss over a per-frame log-probability lattice, its exhaustive oracle,
// decoders and character error rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metasr/errors.hpp"
#include "metasr/params.hpp"

namespace metasr {

/// Indices into an alphabet's symbol list (label space, no blank).
using LabelSequence = std::vector<int>;
/// Emission indices per frame; 0 is blank, i > 0 is symbols[i - 1].
using AlignmentPath = std::vector<int>;

inline constexpr int kBlank = 0;
inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

/// Ordered symbol inventory of one language. Symbols are UTF-8 strings so a
/// single "character" may be multi-byte.
class Alphabet {
 public:
  Alphabet() = default;
  explicit Alphabet(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (symbols_[i].empty()) throw ValidationError("alphabet: empty symbol");
      for (std::size_t j = 0; j < i; ++j)
        if (symbols_[j] == symbols_[i]) throw ValidationError("alphabet: duplicate symbol '" + symbols_[i] + "'");
    }
  }

  const std::vector<std::string>& symbols() const { return symbols_; }
  int size() const { return static_cast<int>(symbols_.size()); }
  /// Emission space size, including blank.
  int emission_size() const { return size() + 1; }

  const std::string& symbol(int label) const { return symbols_.at(static_cast<std::size_t>(label)); }

  int index_of(std::string_view symbol) const {
    for (std::size_t i = 0; i < symbols_.size(); ++i)
      if (symbols_[i] == symbol) return static_cast<int>(i);
    return -1;
  }

  /// Renders labels as a string by concatenating symbols.
  std::string to_string(const LabelSequence& labels) const {
    std::string out;
    for (int l : labels) out += symbol(l);
    return out;
  }

  /// Parses a transcript by greedy longest-symbol match.
  LabelSequence parse(std::string_view text) const {
    LabelSequence out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      int best = -1;
      std::size_t best_len = 0;
      for (std::size_t i = 0; i < symbols_.size(); ++i) {
        const auto& s = symbols_[i];
        if (s.size() > best_len && text.substr(pos, s.size()) == s) {
          best = static_cast<int>(i);
          best_len = s.size();
        }
      }
      if (best < 0)
        throw ValidationError("transcript symbol at byte " + std::to_string(pos) + " of '" +
                              std::string(text) + "' is not in the alphabet");
      out.push_back(best);
      pos += best_len;
    }
    return out;
  }

  friend bool operator==(const Alphabet&, const Alphabet&) = default;

 private:
  std::vector<std::string> symbols_;
};

/// T' x (|symbols|+1) matrix of per-frame log-probabilities; column 0 is blank.
struct LogProbLattice {
  Matrix log_probs;

  Eigen::Index frames() const { return log_probs.rows(); }
  int emission_size() const { return static_cast<int>(log_probs.cols()); }
};

inline double log_sum_exp(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double row_log_sum_exp(const Eigen::Ref<const RowVector>& row) {
  const double m = row.maxCoeff();
  if (m == kLogZero) return kLogZero;
  return m + std::log((row.array() - m).exp().sum());
}

/// Each row must be a log distribution (logsumexp = 0 within `tol`) with no
/// NaN or +inf entries. -inf entries (probability zero) are allowed.
inline void validate_lattice(const LogProbLattice& lattice, double tol = 1e-9) {
  const Matrix& lp = lattice.log_probs;
  if (lp.cols() < 1) throw ValidationError("lattice has no emission columns");
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    for (Eigen::Index k = 0; k < lp.cols(); ++k) {
      const double v = lp(t, k);
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw ValidationError("lattice frame " + std::to_string(t) + " has a NaN/+inf entry");
    }
    const double z = row_log_sum_exp(lp.row(t));
    if (!(std::abs(z) <= tol))
      throw ValidationError("lattice frame " + std::to_string(t) +
                            " is not normalized (logsumexp = " + std::to_string(z) + ")");
  }
}

/// Row-wise log-softmax.
inline Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double m = logits.row(t).maxCoeff();
    const double z = m + std::log((logits.row(t).array() - m).exp().sum());
    out.row(t) = logits.row(t).array() - z;
  }
  return out;
}

/// Merges adjacent repeats, then drops blanks; result is in label space.
inline LabelSequence collapse(const AlignmentPath& path) {
  LabelSequence out;
  int prev = -1;
  for (int e : path) {
    if (e != prev && e != kBlank) out.push_back(e - 1);
    prev = e;
  }
  return out;
}

inline LabelSequence collapse(const AlignmentPath& path, const Alphabet& alphabet) {
  for (int e : path)
    if (e < 0 || e > alphabet.size())
      throw ValidationError("alignment path emission " + std::to_string(e) + " outside alphabet");
  return collapse(path);
}

/// Minimum frame count able to emit `target`: one frame per label plus one
/// separating blank between equal neighbours.
inline Eigen::Index min_frames_for(const LabelSequence& target) {
  Eigen::Index need = static_cast<Eigen::Index>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++need;
  return need;
}

inline void require_feasible(Eigen::Index frames, const LabelSequence& target) {
  const Eigen::Index need = min_frames_for(target);
  if (frames < need)
    throw InfeasibleError("target of length " + std::to_string(target.size()) + " needs " +
                          std::to_string(need) + " frames but only " + std::to_string(frames) +
                          " are available");
}

struct CtcResult {
  double loss = 0.0;
  /// d loss / d log_probs, lattice-shaped.
  Matrix grad;
};

/// Negative log-likelihood of `target` with its gradient, by the log-space
/// forward-backward recursion over the blank-interleaved label sequence.
inline CtcResult ctc_loss(const LogProbLattice& lattice, const LabelSequence& target) {
  validate_lattice(lattice);
  const Matrix& lp = lattice.log_probs;
  const Eigen::Index frames = lp.rows();
  const int emissions = lattice.emission_size();
  for (int l : target)
    if (l < 0 || l + 1 >= emissions)
      throw ValidationError("target label " + std::to_string(l) + " outside the lattice's emission space");
  require_feasible(frames, target);

  CtcResult result{0.0, Matrix::Zero(frames, emissions)};
  if (frames == 0) return result;  // empty target on an empty lattice

  // Extended sequence: blank, l1, blank, l2, ..., blank.
  const Eigen::Index states = 2 * static_cast<Eigen::Index>(target.size()) + 1;
  std::vector<int> ext(static_cast<std::size_t>(states), kBlank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i] + 1;
  auto can_skip = [&](Eigen::Index s) {
    return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2];
  };

  // alpha includes the emission at t; beta covers frames after t only.
  Matrix alpha = Matrix::Constant(frames, states, kLogZero);
  Matrix beta = Matrix::Constant(frames, states, kLogZero);
  alpha(0, 0) = lp(0, ext[0]);
  if (states > 1) alpha(0, 1) = lp(0, ext[1]);
  for (Eigen::Index t = 1; t < frames; ++t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_sum_exp(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = log_sum_exp(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kLogZero ? kLogZero : a + lp(t, ext[s]);
    }
  }
  beta(frames - 1, states - 1) = 0.0;
  if (states > 1) beta(frames - 1, states - 2) = 0.0;
  for (Eigen::Index t = frames - 2; t >= 0; --t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double b = beta(t + 1, s) + lp(t + 1, ext[s]);
      if (s + 1 < states) b = log_sum_exp(b, beta(t + 1, s + 1) + lp(t + 1, ext[s + 1]));
      if (s + 2 < states && can_skip(s + 2))
        b = log_sum_exp(b, beta(t + 1, s + 2) + lp(t + 1, ext[s + 2]));
      beta(t, s) = std::isnan(b) ? kLogZero : b;
    }
  }

  double log_p = alpha(frames - 1, states - 1);
  if (states > 1) log_p = log_sum_exp(log_p, alpha(frames - 1, states - 2));
  if (!std::isfinite(log_p))
    throw NumericError("ctc_loss: target has zero probability under the lattice");
  result.loss = -log_p;

  for (Eigen::Index t = 0; t < frames; ++t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      const double occ = alpha(t, s) + beta(t, s);
      if (occ == kLogZero || std::isnan(occ)) continue;
      result.grad(t, ext[s]) -= std::exp(occ - log_p);
    }
  }
  return result;
}

/// Exhaustive oracle: -log of the summed probability of every path that
/// collapses to `target`. Refuses instances with more than 1e7 paths.
inline double ctc_brute_force(const LogProbLattice& lattice, const LabelSequence& target) {
  validate_lattice(lattice);
  const Matrix& lp = lattice.log_probs;
  const Eigen::Index frames = lp.rows();
  const int k = lattice.emission_size();
  double count = 1.0;
  for (Eigen::Index t = 0; t < frames; ++t) {
    count *= k;
    if (count > 1e7) throw GuardError("ctc_brute_force: more than 1e7 alignment paths");
  }
  const auto total = static_cast<std::uint64_t>(count);
  AlignmentPath path(static_cast<std::size_t>(frames), 0);
  double log_p = kLogZero;
  for (std::uint64_t code = 0; code < total; ++code) {
    std::uint64_t c = code;
    double path_lp = 0.0;
    for (Eigen::Index t = 0; t < frames; ++t) {
      path[static_cast<std::size_t>(t)] = static_cast<int>(c % static_cast<std::uint64_t>(k));
      c /= static_cast<std::uint64_t>(k);
      path_lp += lp(t, path[static_cast<std::size_t>(t)]);
    }
    if (collapse(path) == target) log_p = log_sum_exp(log_p, path_lp);
  }
  return -log_p;
}

/// Per-frame argmax (ties to the lowest index) followed by collapse.
inline LabelSequence greedy_decode(const LogProbLattice& lattice) {
  const Matrix& lp = lattice.log_probs;
  AlignmentPath path(static_cast<std::size_t>(lp.rows()));
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < lp.cols(); ++k)
      if (lp(t, k) > lp(t, best)) best = k;
    path[static_cast<std::size_t>(t)] = static_cast<int>(best);
  }
  return collapse(path);
}

inline constexpr int kDefaultBeam = 20;

/// Prefix beam search. Hypotheses are (label prefix, ends-in-blank) states,
/// so a beam of one follows the best single path; with a beam at least as
/// large as the number of reachable states the search is exact. The final
/// answer merges both endings of each surviving prefix. Ties are broken by
/// lexicographic order of the prefix (blank ending first).
inline LabelSequence beam_decode(const LogProbLattice& lattice, int beam = kDefaultBeam) {
  if (beam < 1) throw ValidationError("beam_decode: beam must be >= 1");
  const Matrix& lp = lattice.log_probs;
  using State = std::pair<LabelSequence, bool>;  // (prefix, !ends_in_blank)
  // `false` sorts before `true`, so a blank ending wins ties on equal prefixes.
  std::map<State, double> hyps{{State{{}, false}, 0.0}};
  std::vector<std::pair<double, const State*>> ranked;

  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    std::map<State, double> next;
    auto add = [&next](State key, double score) {
      auto [it, inserted] = next.try_emplace(std::move(key), score);
      if (!inserted) it->second = log_sum_exp(it->second, score);
    };
    for (const auto& [state, score] : hyps) {
      const auto& [prefix, ends_label] = state;
      for (Eigen::Index k = 0; k < lp.cols(); ++k) {
        const double s = score + lp(t, k);
        if (s == kLogZero) continue;
        const int e = static_cast<int>(k);
        if (e == kBlank) {
          add({prefix, false}, s);
        } else if (ends_label && prefix.back() == e - 1) {
          add({prefix, true}, s);
        } else {
          LabelSequence extended = prefix;
          extended.push_back(e - 1);
          add({std::move(extended), true}, s);
        }
      }
    }
    if (static_cast<int>(next.size()) > beam) {
      ranked.clear();
      for (const auto& [state, score] : next) ranked.emplace_back(score, &state);
      // std::map iteration is already lexicographic, so a stable sort on
      // score keeps the tie order.
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      std::map<State, double> kept;
      for (int i = 0; i < beam; ++i) kept.emplace(*ranked[static_cast<std::size_t>(i)].second, ranked[static_cast<std::size_t>(i)].first);
      next = std::move(kept);
    }
    if (next.empty()) break;
    hyps = std::move(next);
  }

  std::map<LabelSequence, double> merged;
  for (const auto& [state, score] : hyps) {
    auto [it, inserted] = merged.try_emplace(state.first, score);
    if (!inserted) it->second = log_sum_exp(it->second, score);
  }
  const LabelSequence* best = nullptr;
  double best_score = kLogZero;
  for (const auto& [prefix, score] : merged) {
    if (best == nullptr || score > best_score) {
      best = &prefix;
      best_score = score;
    }
  }
  return best ? *best : LabelSequence{};
}

/// Levenshtein distance with unit costs.
template <typename Seq>
std::size_t edit_distance(const Seq& ref, const Seq& hyp) {
  const std::size_t n = hyp.size();
  std::vector<std::size_t> row(n + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  std::size_t i = 0;
  for (const auto& r : ref) {
    ++i;
    std::size_t diag = row[0];
    row[0] = i;
    std::size_t j = 0;
    for (const auto& h : hyp) {
      ++j;
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (r == h ? 0 : 1)});
      diag = up;
    }
  }
  return row[n];
}

/// Corpus character error rate in percent: 100 * edits / reference length.
inline double cer(const std::vector<LabelSequence>& refs, const std::vector<LabelSequence>& hyps) {
  if (refs.size() != hyps.size())
    throw ValidationError("cer: " + std::to_string(refs.size()) + " references but " +
                          std::to_string(hyps.size()) + " hypotheses");
  std::size_t edits = 0;
  std::size_t length = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    edits += edit_distance(refs[i], hyps[i]);
    length += refs[i].size();
  }
  if (length == 0) throw ValidationError("cer: reference corpus is empty");
  return 100.0 * static_cast<double>(edits) / static_cast<double>(length);
}

}  // namespace metasr
