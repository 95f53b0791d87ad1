#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "metasr/ctc.hpp"
#include "metasr/model.hpp"
#include "metasr/params.hpp"
#include "metasr/rng.hpp"

namespace metasr::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// Entrywise |a - b| / max(|a|, |b|, floor), maximized over all entries.
inline double max_rel_error(const NamedParams& a, const NamedParams& b, double floor = 1e-4) {
  a.require_same_layout(b, "max_rel_error");
  double worst = 0.0;
  auto it = b.begin();
  for (const auto& [_, m] : a) {
    const Matrix& o = (it++)->second;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double x = m.data()[i];
      const double y = o.data()[i];
      worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
  }
  return worst;
}

inline double max_rel_error(const Matrix& a, const Matrix& b, double floor = 1e-4) {
  return max_rel_error(NamedParams({{"m", a}}), NamedParams({{"m", b}}), floor);
}

/// Random normalized lattice with `frames` rows over `emissions` symbols.
inline LogProbLattice random_lattice(Eigen::Index frames, int emissions, Rng& rng, double scale = 1.5) {
  return {log_softmax(random_matrix(frames, emissions, rng, scale))};
}

inline LabelSequence random_labels(std::size_t length, int alphabet, Rng& rng) {
  std::uniform_int_distribution<int> d(0, alphabet - 1);
  LabelSequence out(length);
  for (auto& l : out) l = d(rng);
  return out;
}

/// Default layer stack at toy width, small enough for finite differences.
inline EncoderConfig tiny_encoder_config(int feature_dim = 3, int hidden_dim = 4, int stride = 2) {
  return default_encoder_config(feature_dim, hidden_dim, stride);
}

inline Utterance random_utterance(const std::string& uid, Eigen::Index frames, int feature_dim, LabelSequence labels,
                                  Rng& rng) {
  return {uid, random_matrix(frames, feature_dim, rng), std::move(labels)};
}

}  // namespace metasr::testing
