#pragma once

// Shared encoder plus per-language log-softmax heads.

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "metasr/ctc.hpp"
#include "metasr/diffcore.hpp"
#include "metasr/errors.hpp"
#include "metasr/params.hpp"
#include "metasr/rng.hpp"

namespace metasr {

/// T x F matrix of feature frames.
using FeatureSequence = Matrix;

/// One paired (features, transcript) example.
struct Utterance {
  std::string uid;
  FeatureSequence features;
  LabelSequence transcript;

  friend bool operator==(const Utterance& a, const Utterance& b) {
    return a.uid == b.uid && a.transcript == b.transcript && a.features.rows() == b.features.rows() &&
           a.features.cols() == b.features.cols() && a.features == b.features;
  }
};

inline const std::string kEncoderPrefix = "enc.";
inline const std::string kHeadPrefix = "head.";

inline std::string head_prefix(const std::string& lang) { return kHeadPrefix + lang + "."; }

struct EncoderConfig {
  std::vector<LayerSpec> layers;
  int feature_dim = 0;
  int hidden_dim = 0;
  int subsample_stride = 1;

  /// Checks that dims chain from feature_dim to hidden_dim and that the
  /// product of frame_stack strides equals subsample_stride.
  void validate() const {
    if (layers.empty()) throw ConfigError("encoder: no layers");
    if (feature_dim <= 0 || hidden_dim <= 0) throw ConfigError("encoder: dims must be positive");
    int width = feature_dim;
    int stride = 1;
    for (const auto& layer : layers) {
      try {
        layer.validate();
      } catch (const DimensionError& e) {
        throw ConfigError(e.what());
      }
      if (layer.name.rfind(kEncoderPrefix, 0) != 0)
        throw ConfigError("encoder layer '" + layer.name + "' must be named with prefix '" + kEncoderPrefix + "'");
      if (layer.input_dim != width)
        throw ConfigError("encoder layer '" + layer.name + "' expects input " +
                          std::to_string(layer.input_dim) + " but receives " + std::to_string(width));
      if (layer.kind == LayerKind::kFrameStack) stride *= layer.aux;
      width = layer.output_dim;
    }
    if (width != hidden_dim)
      throw ConfigError("encoder output width " + std::to_string(width) + " != hidden_dim " +
                        std::to_string(hidden_dim));
    if (stride != subsample_stride)
      throw ConfigError("encoder frame_stack strides multiply to " + std::to_string(stride) +
                        ", config says " + std::to_string(subsample_stride));
  }

  Eigen::Index output_frames(Eigen::Index input_frames) const {
    Eigen::Index t = input_frames;
    for (const auto& layer : layers) t = layer_output_rows(layer, t);
    return t;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// frame_stack(stride) -> affine -> tanh -> recurrent_bidi. Each recurrent
/// direction has hidden_dim / 2 units. The full-size reference system used
/// a 6-layer VGG front end and 6 bidirectional LSTM layers of 360 cells per
/// direction; scale `hidden_dim` and add layers to move toward it.
inline EncoderConfig default_encoder_config(int feature_dim, int hidden_dim = 64, int stride = 2) {
  EncoderConfig cfg;
  cfg.feature_dim = feature_dim;
  cfg.hidden_dim = hidden_dim;
  cfg.subsample_stride = stride;
  cfg.layers = {frame_stack_layer("enc.0.stack", feature_dim, stride),
                affine_layer("enc.1.proj", feature_dim * stride, hidden_dim),
                tanh_layer("enc.2.tanh", hidden_dim),
                recurrent_bidi_layer("enc.3.rnn", hidden_dim, hidden_dim)};
  cfg.validate();
  return cfg;
}

inline nlohmann::json to_json(const EncoderConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers)
    layers.push_back({{"kind", to_string(l.kind)}, {"name", l.name}, {"input_dim", l.input_dim},
                      {"output_dim", l.output_dim}, {"aux", l.aux}});
  return {{"feature_dim", cfg.feature_dim}, {"hidden_dim", cfg.hidden_dim},
          {"subsample_stride", cfg.subsample_stride}, {"layers", layers}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig cfg;
  try {
    cfg.feature_dim = j.at("feature_dim").get<int>();
    cfg.hidden_dim = j.at("hidden_dim").get<int>();
    cfg.subsample_stride = j.at("subsample_stride").get<int>();
    for (const auto& l : j.at("layers"))
      cfg.layers.push_back({layer_kind_from_string(l.at("kind").get<std::string>()),
                            l.at("name").get<std::string>(), l.at("input_dim").get<int>(),
                            l.at("output_dim").get<int>(), l.value("aux", 0)});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

/// Shared encoder parameters plus one head per language. Values are
/// snapshots: training functions return new models.
struct MultiHeadModel {
  EncoderConfig config;
  NamedParams encoder;
  std::map<std::string, NamedParams> heads;
  std::map<std::string, Alphabet> alphabets;

  bool has_language(const std::string& lang) const { return heads.count(lang) != 0; }

  const NamedParams& head(const std::string& lang) const {
    auto it = heads.find(lang);
    if (it == heads.end()) throw LookupError("model has no head for language '" + lang + "'");
    return it->second;
  }

  const Alphabet& alphabet(const std::string& lang) const {
    auto it = alphabets.find(lang);
    if (it == alphabets.end()) throw LookupError("model has no alphabet for language '" + lang + "'");
    return it->second;
  }

  std::vector<std::string> languages() const {
    std::vector<std::string> out;
    for (const auto& [lang, _] : heads) out.push_back(lang);
    return out;
  }

  std::size_t num_parameters() const {
    std::size_t n = encoder.numel();
    for (const auto& [_, h] : heads) n += h.numel();
    return n;
  }

  /// Encoder and all heads as one flat collection.
  NamedParams all_params() const {
    NamedParams out = encoder;
    for (const auto& [_, h] : heads) out = out.merged(h);
    return out;
  }

  /// Inverse of all_params for a collection with the same layout.
  void assign_all(const NamedParams& flat) {
    encoder.assign_from(flat.with_prefix(kEncoderPrefix));
    for (auto& [lang, h] : heads) h.assign_from(flat.with_prefix(head_prefix(lang)));
  }

  friend bool operator==(const MultiHeadModel& a, const MultiHeadModel& b) {
    return a.config == b.config && a.encoder == b.encoder && a.heads == b.heads && a.alphabets == b.alphabets;
  }
};

inline NamedParams init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "encoder"));
  NamedParams out;
  for (const auto& layer : cfg.layers) out = out.merged(init_layer_params(layer, rng));
  return out;
}

inline LayerSpec head_layer_spec(const std::string& lang, int hidden_dim, const Alphabet& alphabet) {
  return affine_layer(kHeadPrefix + lang, hidden_dim, alphabet.emission_size());
}

/// Fresh head for `lang`, seeded from (seed, lang).
inline NamedParams init_head_params(const std::string& lang, int hidden_dim, const Alphabet& alphabet,
                                    std::uint64_t seed) {
  Rng rng(derive_seed(seed, "head:" + lang));
  return init_layer_params(head_layer_spec(lang, hidden_dim, alphabet), rng);
}

inline MultiHeadModel init_model(const EncoderConfig& cfg, std::uint64_t seed) {
  MultiHeadModel m;
  m.config = cfg;
  m.encoder = init_encoder_params(cfg, seed);
  return m;
}

/// Returns a copy of `model` with a freshly initialized head for `lang`.
inline MultiHeadModel with_language(MultiHeadModel model, const std::string& lang, const Alphabet& alphabet,
                                    std::uint64_t seed) {
  if (lang.empty() || lang.find('.') != std::string::npos)
    throw ConfigError("language id '" + lang + "' must be nonempty and contain no '.'");
  if (alphabet.size() == 0) throw ConfigError("language '" + lang + "' has an empty alphabet");
  model.heads[lang] = init_head_params(lang, model.config.hidden_dim, alphabet, seed);
  model.alphabets[lang] = alphabet;
  return model;
}

struct Encoded {
  Matrix hidden;
  std::vector<ForwardCache> caches;
};

inline Encoded encode(const MultiHeadModel& model, const FeatureSequence& x) {
  if (x.cols() != model.config.feature_dim)
    throw DimensionError("encode: features are " + shape_str(x) + ", expected " +
                         std::to_string(model.config.feature_dim) + " columns");
  Encoded out;
  out.caches.reserve(model.config.layers.size());
  Matrix h = x;
  for (const auto& layer : model.config.layers) {
    auto [y, cache] = forward_layer(layer, model.encoder, h);
    out.caches.push_back(std::move(cache));
    h = std::move(y);
  }
  out.hidden = std::move(h);
  return out;
}

/// Gradient of the encoder parameters given d loss / d hidden.
inline NamedParams encoder_backward(const MultiHeadModel& model, const Encoded& enc, const Matrix& grad_hidden) {
  NamedParams grads = model.encoder.zeros_like();
  Matrix g = grad_hidden;
  for (std::size_t i = model.config.layers.size(); i-- > 0;) {
    const auto& layer = model.config.layers[i];
    auto [grad_in, layer_grads] = backward_layer(layer, model.encoder, enc.caches[i], g);
    for (const auto& [name, m] : layer_grads) grads.at(name) += m;
    g = std::move(grad_in);
  }
  return grads;
}

inline LogProbLattice head_forward(const MultiHeadModel& model, const std::string& lang, const Matrix& hidden) {
  const NamedParams& head = model.head(lang);
  const std::string prefix = kHeadPrefix + lang;
  const Matrix& w = head.at(prefix + ".W");
  const Matrix& b = head.at(prefix + ".b");
  if (hidden.cols() != w.rows())
    throw DimensionError("head '" + lang + "': hidden is " + shape_str(hidden) + ", weight is " + shape_str(w));
  Matrix logits = hidden * w;
  logits.rowwise() += b.row(0);
  return {log_softmax(logits)};
}

struct LossAndGrads {
  double loss = 0.0;
  NamedParams grad_encoder;
  NamedParams grad_head;
};

/// CTC loss of one utterance and its gradients for the encoder and the
/// language's head.
/// `ctc_fn(lattice, target) -> CtcResult` stands in for ctc_loss; the
/// self-check uses it to inject faults.
template <typename CtcFn>
LossAndGrads utterance_loss_and_grads_with(const MultiHeadModel& model, const std::string& lang,
                                           const FeatureSequence& x, const LabelSequence& c, CtcFn&& ctc_fn) {
  const NamedParams& head = model.head(lang);
  require_feasible(model.config.output_frames(x.rows()), c);
  Encoded enc = encode(model, x);
  LogProbLattice lattice = head_forward(model, lang, enc.hidden);
  CtcResult ctc = ctc_fn(static_cast<const LogProbLattice&>(lattice), c);

  // Through log-softmax: dz = g - softmax * rowsum(g).
  const Matrix probs = lattice.log_probs.array().exp().matrix();
  Matrix dz = ctc.grad - (probs.array().colwise() * ctc.grad.rowwise().sum().array()).matrix();

  const std::string prefix = kHeadPrefix + lang;
  const Matrix& w = head.at(prefix + ".W");
  LossAndGrads out;
  out.loss = ctc.loss;
  out.grad_head.set(prefix + ".W", enc.hidden.transpose() * dz);
  out.grad_head.set(prefix + ".b", dz.colwise().sum());
  out.grad_encoder = encoder_backward(model, enc, dz * w.transpose());
  return out;
}

inline LossAndGrads utterance_loss_and_grads(const MultiHeadModel& model, const std::string& lang,
                                             const FeatureSequence& x, const LabelSequence& c) {
  return utterance_loss_and_grads_with(model, lang, x, c, [](const LogProbLattice& l, const LabelSequence& t) {
    return ctc_loss(l, t);
  });
}

/// Summed loss and gradients over a batch, accumulated in batch order.
inline LossAndGrads batch_loss_and_grads(const MultiHeadModel& model, const std::string& lang,
                                         std::span<const Utterance> batch) {
  LossAndGrads total{0.0, model.encoder.zeros_like(), model.head(lang).zeros_like()};
  for (const auto& u : batch) {
    LossAndGrads g;
    try {
      g = utterance_loss_and_grads(model, lang, u.features, u.transcript);
    } catch (const InfeasibleError& e) {
      throw InfeasibleError("utterance '" + u.uid + "' (" + lang + "): " + e.what());
    }
    total.loss += g.loss;
    total.grad_encoder += g.grad_encoder;
    total.grad_head += g.grad_head;
  }
  return total;
}

inline double batch_loss(const MultiHeadModel& model, const std::string& lang, std::span<const Utterance> batch) {
  double total = 0.0;
  for (const auto& u : batch) {
    require_feasible(model.config.output_frames(u.features.rows()), u.transcript);
    total += ctc_loss(head_forward(model, lang, encode(model, u.features).hidden), u.transcript).loss;
  }
  return total;
}

/// Lattice for one utterance.
inline LogProbLattice predict(const MultiHeadModel& model, const std::string& lang, const FeatureSequence& x) {
  return head_forward(model, lang, encode(model, x).hidden);
}

inline LabelSequence decode(const MultiHeadModel& model, const std::string& lang, const FeatureSequence& x,
                            int beam = kDefaultBeam) {
  return beam_decode(predict(model, lang, x), beam);
}

}  // namespace metasr
