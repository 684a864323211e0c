#pragma once

// Prompt checkpoints: a JSON container with format_version 1.
//
// Matrices are stored as nested arrays of doubles written with shortest
// round-trip formatting, so float64 payloads reload bit-exactly and float32
// payloads reload exactly after the cast back.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "sap/description_catalog.hpp"
#include "sap/encoder.hpp"
#include "sap/hashing.hpp"
#include "sap/trainer.hpp"

namespace sap {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  PromptParameters<double> params;
  TrainConfig train_config;
  EncoderConfig encoder_config;
  PromptTemplate prompt_template;
  std::string backbone = "toy";
};

template <class T>
nlohmann::json checkpoint_to_json(const PromptParameters<T> &params, const TrainConfig &train_config,
                                  const EncoderConfig &encoder_config, const PromptTemplate &tmpl = {},
                                  const std::string &backbone = "toy") {
  const auto p = params.template cast<double>();
  nlohmann::json text = nlohmann::json::array(), visual = nlohmann::json::array();
  for (const auto &m : p.text_prompts) text.push_back(matrix_to_json(m));
  for (const auto &m : p.visual_prompts) visual.push_back(matrix_to_json(m));
  return {{"format_version", kCheckpointFormatVersion},
          {"backbone", backbone},
          {"config_hash", encoder_config.hash()},
          {"encoder_config", encoder_config.to_json()},
          {"train_config", train_config.to_json()},
          {"seed", train_config.seed},
          {"precision", std::string(to_string(train_config.precision))},
          {"template", {{"base_pattern", tmpl.base_pattern}, {"description_joiner", tmpl.description_joiner}}},
          {"text_prompts", text},
          {"visual_prompts", visual},
          {"proj_bias", row_to_json(p.proj_bias)}};
}

template <class T>
void save_checkpoint(const PromptParameters<T> &params, const TrainConfig &train_config,
                     const EncoderConfig &encoder_config, const std::filesystem::path &path,
                     const PromptTemplate &tmpl = {}, const std::string &backbone = "toy") {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto text = checkpoint_to_json(params, train_config, encoder_config, tmpl, backbone).dump(1) + "\n";
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

// Parses and validates a checkpoint. With `expected`, refuses a checkpoint
// whose encoder config hash differs.
inline Checkpoint checkpoint_from_json(const nlohmann::json &j, const EncoderConfig *expected = nullptr) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw CheckpointError("unsupported checkpoint format_version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointFormatVersion) + ")");
    Checkpoint c;
    c.backbone = j.at("backbone").get<std::string>();
    c.encoder_config = EncoderConfig::from_json(j.at("encoder_config"));
    const auto stored_hash = j.at("config_hash").get<std::string>();
    if (stored_hash != c.encoder_config.hash()) throw CheckpointError("checkpoint config_hash does not match its encoder_config");
    if (expected && expected->hash() != stored_hash)
      throw CheckpointError("encoder config mismatch: checkpoint has " + stored_hash + ", expected " + expected->hash());
    c.train_config = TrainConfig::from_json(j.at("train_config"));
    c.prompt_template.base_pattern = j.at("template").at("base_pattern").get<std::string>();
    c.prompt_template.description_joiner = j.at("template").at("description_joiner").get<std::string>();
    c.prompt_template.validate();
    for (const auto &m : j.at("text_prompts")) c.params.text_prompts.push_back(matrix_from_json(m));
    for (const auto &m : j.at("visual_prompts")) c.params.visual_prompts.push_back(matrix_from_json(m));
    c.params.proj_bias = row_from_json(j.at("proj_bias"));
    c.params.validate(c.encoder_config);
    return c;
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const std::invalid_argument &e) {
    throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path, const EncoderConfig *expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error &e) {
    throw CheckpointError(std::string("cannot parse checkpoint: ") + e.what());
  }
  return checkpoint_from_json(j, expected);
}

// Digest of a checkpoint file's bytes, recorded in evaluation reports.
inline std::string file_sha256(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return sha256_hex(buf.str());
}

}  // namespace sap
