#pragma once

// Labeled image sets and the JSON manifest format.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sap/linalg.hpp"

namespace sap {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  Image image;
  std::size_t label = 0;  // index into Dataset::classes
};

struct Dataset {
  std::string dataset_id;
  std::vector<std::string> classes;  // dataset-canonical order
  std::vector<Sample> samples;
  std::string split = "train";

  std::size_t class_index(const std::string &name) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == name) return i;
    throw ManifestError("unknown class '" + name + "' in dataset " + dataset_id);
  }

  const std::string &label_name(const Sample &s) const { return classes.at(s.label); }

  // Samples whose class is in the given list, relabeled against the full
  // class list (labels stay indices into this->classes).
  Dataset restricted_to(const std::vector<std::string> &names) const {
    Dataset out{dataset_id, classes, {}, split};
    std::vector<bool> keep(classes.size(), false);
    for (const auto &n : names) keep[class_index(n)] = true;
    for (const auto &s : samples)
      if (keep[s.label]) out.samples.push_back(s);
    return out;
  }

  // Samples of the given classes, with the class list replaced by `names`
  // and labels re-indexed into it.
  Dataset with_classes(const std::vector<std::string> &names) const {
    Dataset out{dataset_id, names, {}, split};
    std::vector<std::size_t> remap(classes.size(), names.size());
    for (std::size_t i = 0; i < names.size(); ++i) remap[class_index(names[i])] = i;
    for (const auto &s : samples)
      if (remap[s.label] != names.size()) out.samples.push_back({s.image, remap[s.label]});
    return out;
  }
};

inline nlohmann::json manifest_to_json(const Dataset &ds) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto &s : ds.samples)
    samples.push_back({{"label", ds.classes.at(s.label)}, {"payload", matrix_to_json(s.image)}});
  return {{"classes", ds.classes}, {"dataset", ds.dataset_id}, {"samples", samples}, {"split", ds.split}};
}

inline Dataset manifest_from_json(const nlohmann::json &j, const std::filesystem::path &base_dir = {}) {
  try {
    Dataset ds;
    ds.dataset_id = j.at("dataset").get<std::string>();
    ds.classes = j.at("classes").get<std::vector<std::string>>();
    ds.split = j.value("split", std::string("train"));
    if (ds.split != "train" && ds.split != "test") throw ManifestError("manifest split must be 'train' or 'test'");
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ds.classes.size(); ++i)
      if (!index.emplace(ds.classes[i], i).second) throw ManifestError("duplicate class in manifest: " + ds.classes[i]);
    for (const auto &s : j.at("samples")) {
      const auto label = s.at("label").get<std::string>();
      auto it = index.find(label);
      if (it == index.end()) throw ManifestError("sample label '" + label + "' is not a manifest class");
      Sample sample;
      sample.label = it->second;
      if (s.contains("payload")) {
        sample.image = matrix_from_json(s.at("payload"));
      } else if (s.contains("path")) {
        const auto p = base_dir / s.at("path").get<std::string>();
        std::ifstream in(p);
        if (!in) throw ManifestError("cannot open sample file: " + p.string());
        sample.image = matrix_from_json(nlohmann::json::parse(in));
      } else {
        throw ManifestError("sample needs a 'payload' or a 'path'");
      }
      ds.samples.push_back(std::move(sample));
    }
    return ds;
  } catch (const nlohmann::json::exception &e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  } catch (const std::runtime_error &e) {
    if (dynamic_cast<const ManifestError *>(&e)) throw;
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
}

inline Dataset load_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error &e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

inline void save_manifest(const Dataset &ds, const std::filesystem::path &path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ManifestError("cannot write manifest: " + path.string());
  out << manifest_to_json(ds).dump() << "\n";
}

}  // namespace sap
