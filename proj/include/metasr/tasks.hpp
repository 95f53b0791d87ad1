#pragma once

// Language tasks: synthetic language families, limited-split sampling and
// the JSON-lines corpus format.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "metasr/ctc.hpp"
#include "metasr/errors.hpp"
#include "metasr/model.hpp"
#include "metasr/rng.hpp"

namespace metasr {

/// One language's data: a full split, a limited subset of it, and a
/// disjoint test split.
struct LanguageTask {
  std::string id;
  Alphabet alphabet;
  int feature_dim = 0;
  std::vector<Utterance> full;
  std::vector<Utterance> limited;
  std::vector<Utterance> test;

  const std::vector<Utterance>& split(const std::string& name) const {
    if (name == "full") return full;
    if (name == "limited") return limited;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected full, limited or test)");
  }

  friend bool operator==(const LanguageTask&, const LanguageTask&) = default;
};

struct SyntheticFamilyConfig {
  int n_languages = 10;
  /// The first n_source languages are named src<i>, the rest tgt<i>.
  int n_source = 6;
  std::vector<int> alphabet_sizes = {6, 7, 8, 9, 10, 6, 7, 8, 9, 10};
  int feature_dim = 8;
  int shared_pool_size = 12;
  int duration_min = 2;
  int duration_max = 4;
  int length_min = 3;
  int length_max = 8;
  double noise_sigma = 1.0;
  /// Off-primary weight of each character's pool mixture.
  double mixing_sigma = 0.3;
  int utterances_per_language = 500;
  int test_utterances = 100;
  double limited_fraction = 0.10;
  int subsample_stride = 2;
  std::uint64_t seed = 1;

  friend bool operator==(const SyntheticFamilyConfig&, const SyntheticFamilyConfig&) = default;
};

inline nlohmann::json to_json(const SyntheticFamilyConfig& c) {
  return {{"n_languages", c.n_languages},
          {"n_source", c.n_source},
          {"alphabet_sizes", c.alphabet_sizes},
          {"feature_dim", c.feature_dim},
          {"shared_pool_size", c.shared_pool_size},
          {"duration_range", {c.duration_min, c.duration_max}},
          {"length_range", {c.length_min, c.length_max}},
          {"noise_sigma", c.noise_sigma},
          {"mixing_sigma", c.mixing_sigma},
          {"utterances_per_language", c.utterances_per_language},
          {"test_utterances", c.test_utterances},
          {"limited_fraction", c.limited_fraction},
          {"subsample_stride", c.subsample_stride},
          {"seed", c.seed}};
}

/// Reads a family config; absent keys keep their defaults.
inline SyntheticFamilyConfig family_config_from_json(const nlohmann::json& j) {
  SyntheticFamilyConfig c;
  auto range = [&](const char* key, int& lo, int& hi) {
    if (!j.contains(key)) return;
    const auto& r = j.at(key);
    if (!r.is_array() || r.size() != 2) throw ConfigError(std::string(key) + ": expected [min, max]");
    lo = r[0].get<int>();
    hi = r[1].get<int>();
  };
  try {
    c.n_languages = j.value("n_languages", c.n_languages);
    c.n_source = j.value("n_source", c.n_source);
    c.alphabet_sizes = j.value("alphabet_sizes", c.alphabet_sizes);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.shared_pool_size = j.value("shared_pool_size", c.shared_pool_size);
    range("duration_range", c.duration_min, c.duration_max);
    range("length_range", c.length_min, c.length_max);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.mixing_sigma = j.value("mixing_sigma", c.mixing_sigma);
    c.utterances_per_language = j.value("utterances_per_language", c.utterances_per_language);
    c.test_utterances = j.value("test_utterances", c.test_utterances);
    c.limited_fraction = j.value("limited_fraction", c.limited_fraction);
    c.subsample_stride = j.value("subsample_stride", c.subsample_stride);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("family config: ") + e.what());
  }
  return c;
}

inline std::string language_id(const SyntheticFamilyConfig& cfg, int index) {
  return index < cfg.n_source ? "src" + std::to_string(index) : "tgt" + std::to_string(index - cfg.n_source);
}

inline void validate(const SyntheticFamilyConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError(field + ": " + why);
  };
  if (c.n_languages < 1) fail("n_languages", "must be >= 1");
  if (c.n_source < 0 || c.n_source > c.n_languages) fail("n_source", "must be in [0, n_languages]");
  if (static_cast<int>(c.alphabet_sizes.size()) != c.n_languages)
    fail("alphabet_sizes", "needs one entry per language");
  for (int a : c.alphabet_sizes)
    if (a < 2 || a > 26) fail("alphabet_sizes", "each size must be in [2, 26]");
  if (c.feature_dim < 1) fail("feature_dim", "must be >= 1");
  const int max_alpha = *std::max_element(c.alphabet_sizes.begin(), c.alphabet_sizes.end());
  if (c.shared_pool_size < max_alpha) fail("shared_pool_size", "must be >= the largest alphabet");
  if (c.duration_min < 1 || c.duration_max < c.duration_min) fail("duration_range", "must satisfy 1 <= min <= max");
  if (c.length_min < 1 || c.length_max < c.length_min) fail("length_range", "must satisfy 1 <= min <= max");
  if (!(c.noise_sigma >= 0.0) || !std::isfinite(c.noise_sigma)) fail("noise_sigma", "must be finite and >= 0");
  if (!(c.mixing_sigma >= 0.0) || !std::isfinite(c.mixing_sigma)) fail("mixing_sigma", "must be finite and >= 0");
  if (c.utterances_per_language < 1) fail("utterances_per_language", "must be >= 1");
  if (c.test_utterances < 0) fail("test_utterances", "must be >= 0");
  if (!(c.limited_fraction > 0.0 && c.limited_fraction <= 1.0)) fail("limited_fraction", "must be in (0, 1]");
  if (std::lround(c.limited_fraction * c.utterances_per_language) < 1)
    fail("limited_fraction", "limited split would be empty");
  if (c.subsample_stride < 1) fail("subsample_stride", "must be >= 1");
  // Transcripts never repeat a symbol back to back, so L output frames suffice.
  for (int len = c.length_min; len <= c.length_max; ++len) {
    const int frames = (c.duration_min * len + c.subsample_stride - 1) / c.subsample_stride;
    if (frames < len)
      fail("duration_range", "minimum duration " + std::to_string(c.duration_min) + " leaves " +
                                 std::to_string(frames) + " frames after stride " +
                                 std::to_string(c.subsample_stride) + " for " + std::to_string(len) +
                                 " characters");
  }
}

/// Matrix of `rows` x `cols` standard normal draws.
inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// Per-character prototype vectors (|alphabet| x feature_dim) of language
/// `index`: each character mixes one primary vector from the shared pool
/// with small weights on the others.
inline Matrix language_prototypes(const SyntheticFamilyConfig& c, int index) {
  Rng pool_rng(derive_seed(c.seed, "pool"));
  const Matrix pool = normal_matrix(c.shared_pool_size, c.feature_dim, pool_rng);
  Rng rng(derive_seed(c.seed, "mixing", static_cast<std::uint64_t>(index)));
  std::vector<int> order(static_cast<std::size_t>(c.shared_pool_size));
  for (int i = 0; i < c.shared_pool_size; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const int alpha = c.alphabet_sizes.at(static_cast<std::size_t>(index));
  Matrix mixing = c.mixing_sigma * normal_matrix(alpha, c.shared_pool_size, rng);
  for (int a = 0; a < alpha; ++a) mixing(a, order[static_cast<std::size_t>(a)]) += 1.0;
  return mixing * pool;
}

inline Alphabet letters_alphabet(int size) {
  std::vector<std::string> symbols;
  for (int i = 0; i < size; ++i) symbols.emplace_back(1, static_cast<char>('a' + i));
  return Alphabet(std::move(symbols));
}

/// Seeded sample of round(fraction * |full|) utterances of the full split,
/// kept in full-split order.
inline LanguageTask split_limited(LanguageTask task, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("split_limited: fraction must be in (0, 1]");
  const auto count = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(task.full.size())));
  if (count == 0) throw ValidationError("split_limited: limited split of '" + task.id + "' would be empty");
  std::vector<std::size_t> idx(task.full.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "limited:" + task.id));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  task.limited.clear();
  for (std::size_t i : idx) task.limited.push_back(task.full[i]);
  return task;
}

inline LanguageTask generate_language(const SyntheticFamilyConfig& c, int index) {
  const Matrix protos = language_prototypes(c, index);
  const int alpha = static_cast<int>(protos.rows());
  LanguageTask task;
  task.id = language_id(c, index);
  task.alphabet = letters_alphabet(alpha);
  task.feature_dim = c.feature_dim;
  Rng rng(derive_seed(c.seed, "utterances", static_cast<std::uint64_t>(index)));
  std::uniform_int_distribution<int> length_dist(c.length_min, c.length_max);
  std::uniform_int_distribution<int> duration_dist(c.duration_min, c.duration_max);
  std::uniform_int_distribution<int> first_dist(0, alpha - 1);
  std::uniform_int_distribution<int> next_dist(0, alpha - 2);
  std::normal_distribution<double> noise(0.0, 1.0);

  const int total = c.utterances_per_language + c.test_utterances;
  for (int u = 0; u < total; ++u) {
    Utterance utt;
    char uid[64];
    std::snprintf(uid, sizeof(uid), "%s-%05d", task.id.c_str(), u);
    utt.uid = uid;
    const int len = length_dist(rng);
    std::vector<int> durations;
    for (int i = 0; i < len; ++i) {
      int ch = first_dist(rng);
      if (i > 0) {
        ch = next_dist(rng);
        if (ch >= utt.transcript.back()) ++ch;  // skip the previous symbol
      }
      utt.transcript.push_back(ch);
      durations.push_back(duration_dist(rng));
    }
    int frames = 0;
    for (int d : durations) frames += d;
    utt.features.resize(frames, c.feature_dim);
    int t = 0;
    for (int i = 0; i < len; ++i) {
      for (int d = 0; d < durations[static_cast<std::size_t>(i)]; ++d, ++t) {
        for (int f = 0; f < c.feature_dim; ++f)
          utt.features(t, f) = protos(utt.transcript[static_cast<std::size_t>(i)], f) + c.noise_sigma * noise(rng);
      }
    }
    (u < c.utterances_per_language ? task.full : task.test).push_back(std::move(utt));
  }
  return split_limited(std::move(task), c.limited_fraction, c.seed);
}

/// Deterministic family of related languages; see SyntheticFamilyConfig.
inline std::vector<LanguageTask> generate_family(const SyntheticFamilyConfig& c) {
  validate(c);
  std::vector<LanguageTask> out;
  for (int i = 0; i < c.n_languages; ++i) out.push_back(generate_language(c, i));
  return out;
}

// --- corpus files ---------------------------------------------------------

namespace detail {

inline nlohmann::json uid_list(const std::vector<Utterance>& utts) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& u : utts) out.push_back(u.uid);
  return out;
}

}  // namespace detail

/// JSON-lines corpus: a header line, then one line per utterance (full split
/// first, then test). Numbers use nlohmann's shortest round-trip format.
inline void write_corpus(std::ostream& os, const LanguageTask& task) {
  nlohmann::json header = {{"language_id", task.id},
                           {"symbols", task.alphabet.symbols()},
                           {"feature_dim", task.feature_dim},
                           {"splits",
                            {{"full", detail::uid_list(task.full)},
                             {"limited", detail::uid_list(task.limited)},
                             {"test", detail::uid_list(task.test)}}}};
  os << header.dump() << '\n';
  auto write_utt = [&](const Utterance& u) {
    nlohmann::json feats = nlohmann::json::array();
    for (Eigen::Index t = 0; t < u.features.rows(); ++t) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index f = 0; f < u.features.cols(); ++f) row.push_back(u.features(t, f));
      feats.push_back(std::move(row));
    }
    nlohmann::json line = {{"uid", u.uid}, {"transcript", task.alphabet.to_string(u.transcript)}, {"features", feats}};
    os << line.dump() << '\n';
  };
  for (const auto& u : task.full) write_utt(u);
  for (const auto& u : task.test) write_utt(u);
}

inline void save_corpus(const std::string& path, const LanguageTask& task) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_corpus(os, task);
  if (!os) throw Error("failed writing '" + path + "'");
}

struct CorpusSummary {
  std::size_t full = 0;
  std::size_t limited = 0;
  std::size_t test = 0;
};

inline LanguageTask read_corpus(std::istream& is, const std::string& source = "<corpus>") {
  auto where = [&](std::size_t line) { return source + ":" + std::to_string(line) + ": "; };
  std::string text;
  std::size_t line_no = 0;
  if (!std::getline(is, text)) throw ValidationError(source + ": empty corpus file");
  ++line_no;
  LanguageTask task;
  std::map<std::string, std::vector<std::string>> splits;
  try {
    const auto header = nlohmann::json::parse(text);
    task.id = header.at("language_id").get<std::string>();
    task.alphabet = Alphabet(header.at("symbols").get<std::vector<std::string>>());
    task.feature_dim = header.at("feature_dim").get<int>();
    for (const char* name : {"full", "limited", "test"})
      splits[name] = header.at("splits").at(name).get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where(line_no) + "bad header: " + e.what());
  }
  if (task.feature_dim < 1) throw ValidationError(where(line_no) + "feature_dim must be >= 1");
  if (task.alphabet.size() == 0) throw ValidationError(where(line_no) + "alphabet is empty");

  std::map<std::string, Utterance> by_uid;
  while (std::getline(is, text)) {
    ++line_no;
    if (text.empty()) continue;
    Utterance u;
    std::string transcript;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(text);
      u.uid = rec.at("uid").get<std::string>();
      transcript = rec.at("transcript").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where(line_no) + "malformed record: " + e.what());
    }
    try {
      const auto& rows = rec.at("features");
      if (!rows.is_array()) throw ParseError(where(line_no) + "utterance '" + u.uid + "': features is not an array");
      u.features.resize(static_cast<Eigen::Index>(rows.size()), task.feature_dim);
      for (std::size_t t = 0; t < rows.size(); ++t) {
        const auto& row = rows[t];
        if (!row.is_array() || static_cast<int>(row.size()) != task.feature_dim)
          throw ParseError(where(line_no) + "utterance '" + u.uid + "': frame " + std::to_string(t) + " has " +
                           std::to_string(row.is_array() ? row.size() : 0) + " values, expected " +
                           std::to_string(task.feature_dim));
        for (int f = 0; f < task.feature_dim; ++f) {
          if (!row[static_cast<std::size_t>(f)].is_number())
            throw ParseError(where(line_no) + "utterance '" + u.uid + "': non-numeric feature");
          u.features(static_cast<Eigen::Index>(t), f) = row[static_cast<std::size_t>(f)].get<double>();
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where(line_no) + "utterance '" + u.uid + "': " + e.what());
    }
    if (!u.features.allFinite()) throw ValidationError(where(line_no) + "utterance '" + u.uid + "' has non-finite features");
    try {
      u.transcript = task.alphabet.parse(transcript);
    } catch (const ValidationError& e) {
      throw ValidationError(where(line_no) + "utterance '" + u.uid + "': " + e.what());
    }
    const std::string uid = u.uid;
    if (!by_uid.emplace(uid, std::move(u)).second) throw ValidationError(where(line_no) + "duplicate uid '" + uid + "'");
  }
  if (by_uid.empty()) throw ValidationError(source + ": corpus has no utterances");

  auto collect = [&](const std::string& name) {
    std::vector<Utterance> out;
    for (const auto& uid : splits[name]) {
      auto it = by_uid.find(uid);
      if (it == by_uid.end()) throw ValidationError(source + ": split '" + name + "' lists unknown uid '" + uid + "'");
      out.push_back(it->second);
    }
    return out;
  };
  task.full = collect("full");
  task.limited = collect("limited");
  task.test = collect("test");
  const std::set<std::string> full_ids(splits["full"].begin(), splits["full"].end());
  for (const auto& uid : splits["limited"])
    if (!full_ids.count(uid)) throw ValidationError(source + ": limited uid '" + uid + "' is not in the full split");
  for (const auto& uid : splits["test"])
    if (full_ids.count(uid)) throw ValidationError(source + ": test uid '" + uid + "' also appears in the full split");
  return task;
}

inline LanguageTask load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open corpus '" + path + "'");
  return read_corpus(is, path);
}

inline CorpusSummary summarize(const LanguageTask& task) {
  return {task.full.size(), task.limited.size(), task.test.size()};
}

}  // namespace metasr
