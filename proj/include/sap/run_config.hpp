#pragma once

// Run configuration: one nested JSON document merging encoder, training,
// protocol and data settings, with `key.path=value` overrides applied after
// the file. The config hash is the sha256 of the canonical (sorted-key,
// compact) dump.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sap/encoder.hpp"
#include "sap/hashing.hpp"
#include "sap/toy_encoder.hpp"
#include "sap/trainer.hpp"

namespace sap {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ToyDataConfig {
  std::size_t num_classes = 6;
  std::size_t descriptions_per_class = 3;
  std::size_t train_samples_per_class = 16;
  std::size_t test_samples_per_class = 12;
  std::uint64_t train_seed = 11;
  std::uint64_t test_seed = 12;
  double noise = 0.1;
  double background_noise = 0.1;
};

struct RunConfig {
  std::string preset;  // "" or "toy"
  EncoderConfig encoder;
  TrainConfig train;
  std::string protocol = "b2n";
  std::string train_classes = "base";  // "base" or "all"
  std::size_t k_shots = 16;
  std::size_t workers = 1;
  std::string split_file;
  std::string manifest;
  std::string test_manifest;
  std::string catalog;
  ToyDataConfig toy;

  nlohmann::json to_json() const {
    return {{"preset", preset},
            {"encoder", encoder.to_json()},
            {"train", train.to_json()},
            {"protocol",
             {{"name", protocol},
              {"train_classes", train_classes},
              {"k_shots", k_shots},
              {"split_file", split_file}}},
            {"data",
             {{"manifest", manifest},
              {"test_manifest", test_manifest},
              {"catalog", catalog},
              {"toy",
               {{"num_classes", toy.num_classes},
                {"descriptions_per_class", toy.descriptions_per_class},
                {"train_samples_per_class", toy.train_samples_per_class},
                {"test_samples_per_class", toy.test_samples_per_class},
                {"train_seed", toy.train_seed},
                {"test_seed", toy.test_seed},
                {"noise", toy.noise},
                {"background_noise", toy.background_noise}}}}}};
  }

  // Workers only changes scheduling, so it stays out of the hashed document.
  std::string hash() const { return sha256_hex(to_json().dump()); }

  static RunConfig from_json(const nlohmann::json &j);
};

// The toy preset: toy encoder, six-class toy catalog, seeded toy images and
// the default recipe with epochs and learning rate scaled to the toy size.
// Background noise is high enough that the initial prompts misclassify a few
// training shots.
inline nlohmann::json toy_preset_json() {
  RunConfig c;
  c.preset = "toy";
  c.encoder = toy_encoder_config();
  c.train.prompt_depth = c.encoder.prompt_depth;
  c.train.epochs = 50;
  c.train.lr = 0.05;
  c.toy.background_noise = 0.25;
  return c.to_json();
}

inline nlohmann::json default_run_json() { return RunConfig{}.to_json(); }

namespace detail {

// Rejects keys of `j` that the reference document does not have.
inline void check_keys(const nlohmann::json &j, const nlohmann::json &reference, const std::string &where) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto &[k, v] : j.items())
    if (!reference.contains(k)) throw ConfigError("unknown config key '" + where + "." + k + "'");
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json &j) {
  static const std::vector<std::string> top = {"preset", "encoder", "train", "protocol", "data"};
  for (const auto &[k, v] : j.items())
    if (std::find(top.begin(), top.end(), k) == top.end()) throw ConfigError("unknown config key '" + k + "'");
  const auto reference = RunConfig{}.to_json();
  for (const char *section : {"encoder", "train", "protocol", "data"})
    if (j.contains(section)) detail::check_keys(j.at(section), reference.at(section), section);
  if (j.contains("data") && j.at("data").contains("toy"))
    detail::check_keys(j.at("data").at("toy"), reference.at("data").at("toy"), "data.toy");
  try {
    RunConfig c;
    c.preset = j.value("preset", std::string());
    if (!c.preset.empty() && c.preset != "toy") throw ConfigError("unknown preset '" + c.preset + "' (allowed: toy)");
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
    // train.prompt_depth is authoritative; the encoder follows it.
    c.encoder.prompt_depth = c.train.prompt_depth;
    c.encoder.validate();
    if (j.contains("protocol")) {
      const auto &p = j.at("protocol");
      c.protocol = p.value("name", c.protocol);
      c.train_classes = p.value("train_classes", c.train_classes);
      c.k_shots = detail::json_unsigned(p, "k_shots", c.k_shots);
      c.split_file = p.value("split_file", c.split_file);
    }
    if (c.train_classes != "base" && c.train_classes != "all")
      throw ConfigError("protocol.train_classes must be 'base' or 'all'");
    if (c.k_shots == 0) throw ConfigError("protocol.k_shots must be positive");
    if (j.contains("data")) {
      const auto &d = j.at("data");
      c.manifest = d.value("manifest", c.manifest);
      c.test_manifest = d.value("test_manifest", c.test_manifest);
      c.catalog = d.value("catalog", c.catalog);
      if (d.contains("toy")) {
        const auto &t = d.at("toy");
        c.toy.num_classes = detail::json_unsigned(t, "num_classes", c.toy.num_classes);
        c.toy.descriptions_per_class = detail::json_unsigned(t, "descriptions_per_class", c.toy.descriptions_per_class);
        c.toy.train_samples_per_class = detail::json_unsigned(t, "train_samples_per_class", c.toy.train_samples_per_class);
        c.toy.test_samples_per_class = detail::json_unsigned(t, "test_samples_per_class", c.toy.test_samples_per_class);
        c.toy.train_seed = detail::json_unsigned(t, "train_seed", c.toy.train_seed);
        c.toy.test_seed = detail::json_unsigned(t, "test_seed", c.toy.test_seed);
        c.toy.noise = t.value("noise", c.toy.noise);
        c.toy.background_noise = t.value("background_noise", c.toy.background_noise);
      }
    }
    return c;
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const ConfigError &) {
    throw;
  } catch (const std::invalid_argument &e) {
    throw ConfigError(e.what());
  }
}

// Recursively overlays `patch` onto `base` (objects merge, everything else replaces).
inline void merge_json(nlohmann::json &base, const nlohmann::json &patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (const auto &[k, v] : patch.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object())
      merge_json(base[k], v);
    else
      base[k] = v;
  }
}

// Applies "a.b.c=value". The value is read as JSON when it parses, else as a string.
inline void apply_override(nlohmann::json &doc, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  auto value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json *node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("empty key segment in override: " + assignment);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

// Preset defaults, then the config file, then overrides in the given order.
inline RunConfig load_run_config(const std::string &preset, const std::filesystem::path &config_path,
                                 const std::vector<std::string> &overrides) {
  nlohmann::json doc;
  if (preset == "toy")
    doc = toy_preset_json();
  else if (preset.empty())
    doc = default_run_json();
  else
    throw ConfigError("unknown preset '" + preset + "' (allowed: toy)");
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config: " + config_path.string());
    const auto file = nlohmann::json::parse(in, nullptr, false);
    if (file.is_discarded() || !file.is_object()) throw ConfigError("config is not a JSON object: " + config_path.string());
    merge_json(doc, file);
  }
  for (const auto &o : overrides) apply_override(doc, o);
  return RunConfig::from_json(doc);
}

}  // namespace sap
