#pragma once

// Model checkpoints: <stem>.params (NamedParams binary) + <stem>.json sidecar.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "metasr/errors.hpp"
#include "metasr/model.hpp"
#include "metasr/params.hpp"

namespace metasr {

inline constexpr int kSchemaVersion = 1;

struct CheckpointInfo {
  int pretrain_step = 0;
  std::uint64_t seed = 0;
  /// "multi", "meta", "none" or "finetuned".
  std::string regime = "none";
};

inline nlohmann::json checkpoint_sidecar(const MultiHeadModel& model, const CheckpointInfo& info) {
  nlohmann::json alphabets = nlohmann::json::object();
  for (const auto& [lang, a] : model.alphabets) alphabets[lang] = a.symbols();
  return {{"schema_version", kSchemaVersion}, {"config", to_json(model.config)},
          {"languages", model.languages()},   {"alphabets", alphabets},
          {"pretrain_step", info.pretrain_step}, {"seed", info.seed},
          {"regime", info.regime}};
}

inline void save_checkpoint(const std::string& stem, const MultiHeadModel& model, const CheckpointInfo& info) {
  {
    std::ofstream os(stem + ".params", std::ios::binary);
    if (!os) throw Error("cannot open '" + stem + ".params' for writing");
    write_params(os, model.all_params());
  }
  std::ofstream js(stem + ".json", std::ios::binary);
  if (!js) throw Error("cannot open '" + stem + ".json' for writing");
  js << checkpoint_sidecar(model, info).dump(2) << '\n';
  if (!js) throw Error("failed writing '" + stem + ".json'");
}

struct LoadedCheckpoint {
  MultiHeadModel model;
  CheckpointInfo info;
};

/// Accepts either the stem or a path ending in .params/.json.
inline std::string checkpoint_stem(std::string path) {
  for (const char* ext : {".params", ".json"}) {
    const std::string e(ext);
    if (path.size() > e.size() && path.compare(path.size() - e.size(), e.size(), e) == 0)
      return path.substr(0, path.size() - e.size());
  }
  return path;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::string stem = checkpoint_stem(path);
  std::ifstream js(stem + ".json", std::ios::binary);
  if (!js) throw ValidationError("cannot open checkpoint sidecar '" + stem + ".json'");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(stem + ".json: " + e.what());
  }
  LoadedCheckpoint out;
  try {
    if (side.at("schema_version").get<int>() != kSchemaVersion)
      throw ParseError(stem + ".json: unsupported schema_version");
    out.model.config = encoder_config_from_json(side.at("config"));
    out.info.pretrain_step = side.at("pretrain_step").get<int>();
    out.info.seed = side.at("seed").get<std::uint64_t>();
    out.info.regime = side.value("regime", std::string("none"));
    for (const auto& [lang, symbols] : side.at("alphabets").items())
      out.model.alphabets[lang] = Alphabet(symbols.get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(stem + ".json: " + e.what());
  }
  std::ifstream ps(stem + ".params", std::ios::binary);
  if (!ps) throw ValidationError("cannot open checkpoint parameters '" + stem + ".params'");
  NamedParams flat = read_params(ps);
  out.model.encoder = flat.with_prefix(kEncoderPrefix);
  NamedParams expected = init_encoder_params(out.model.config, 0);
  if (!expected.same_layout(out.model.encoder))
    throw ParseError(stem + ".params: encoder parameters " + out.model.encoder.describe() +
                     " do not match the config " + expected.describe());
  std::size_t used = out.model.encoder.size();
  for (const auto& [lang, alphabet] : out.model.alphabets) {
    NamedParams head = flat.with_prefix(head_prefix(lang));
    NamedParams want = init_head_params(lang, out.model.config.hidden_dim, alphabet, 0);
    if (!want.same_layout(head))
      throw ParseError(stem + ".params: head '" + lang + "' is " + head.describe() + ", expected " + want.describe());
    used += head.size();
    out.model.heads[lang] = std::move(head);
  }
  if (used != flat.size()) throw ParseError(stem + ".params: contains parameters not described by the sidecar");
  return out;
}

}  // namespace metasr
