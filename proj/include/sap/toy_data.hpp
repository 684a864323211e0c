#pragma once

// Seeded synthetic catalog and images for the toy encoder.
//
// A toy image is a grid of M patches. Patches carry the toy token
// embeddings of the class name or of one of the class's descriptions
// (plus noise); the rest is background noise. Because the toy towers share
// weights, description text and the patches that "show" it are close in
// feature space, which makes the descriptions visually grounded.

#include <algorithm>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sap/dataset.hpp"
#include "sap/description_catalog.hpp"
#include "sap/toy_encoder.hpp"

namespace sap {

inline const std::vector<ClassEntry> &toy_class_table() {
  static const std::vector<ClassEntry> table = {
      {"cat", {"has whiskers", "has pointed ears", "has a long tail"}},
      {"owl", {"has large round eyes", "has brown feathers", "has a hooked beak"}},
      {"frog", {"has green skin", "has webbed feet", "sits on lily pads"}},
      {"lynx", {"has whiskers", "has tufted ears", "has a short tail"}},
      {"tulip", {"has cup-shaped petals", "has a green stem", "grows in flower beds"}},
      {"zebra", {"has black and white stripes", "has a short mane", "has hooves"}},
      {"airliner", {"has two jet engines", "has a long fuselage", "has swept wings"}},
      {"lighthouse", {"has a tall white tower", "has a lamp room", "stands on a rocky coast"}},
  };
  return table;
}

// The first num_classes toy classes with at most descriptions_per_class descriptions each.
inline DescriptionCatalog toy_catalog(std::size_t num_classes = 6, std::size_t descriptions_per_class = 3,
                                      const std::string &dataset_id = "toy") {
  const auto &table = toy_class_table();
  if (num_classes > table.size()) throw std::invalid_argument("toy_catalog: at most 8 classes");
  std::vector<ClassEntry> entries;
  for (std::size_t i = 0; i < num_classes; ++i) {
    ClassEntry e = table[i];
    if (e.descriptions.size() > descriptions_per_class) e.descriptions.resize(descriptions_per_class);
    entries.push_back(std::move(e));
  }
  return DescriptionCatalog(dataset_id, std::move(entries));
}

struct ToyDataOptions {
  std::size_t samples_per_class = 16;
  double noise = 0.1;             // per-channel noise on pattern patches
  double background_noise = 0.1;  // per-channel noise on background patches
  bool include_class_name = true; // one patch carries the class-name tokens
};

// Patch pattern of a phrase: mean toy token embedding, scaled to norm sqrt(d').
inline MatD toy_phrase_pattern(const ToyBackbone<double> &backbone, const std::string &phrase) {
  const auto tokens = backbone.tokenize(phrase);
  if (tokens.empty()) throw std::invalid_argument("toy_phrase_pattern: empty phrase");
  MatD mean = backbone.token_embeddings(tokens).colwise().mean();
  return mean * (std::sqrt(static_cast<double>(mean.cols())) / mean.norm());
}

inline Dataset make_toy_dataset(const EncoderConfig &config, const DescriptionCatalog &catalog,
                                const std::vector<std::string> &classes, std::uint64_t seed,
                                const std::string &split = "train", ToyDataOptions options = {}) {
  const ToyBackbone<double> backbone(config);
  const auto m = static_cast<Eigen::Index>(config.num_patches);
  const auto w = static_cast<Eigen::Index>(config.patch_dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto noise = [&](double scale) {
    MatD n(1, w);
    for (Eigen::Index i = 0; i < w; ++i) n(0, i) = scale * normal(rng);
    return n;
  };

  Dataset ds;
  ds.dataset_id = catalog.dataset_id().empty() ? "toy" : catalog.dataset_id();
  ds.classes = classes;
  ds.split = split;
  for (std::size_t label = 0; label < classes.size(); ++label) {
    std::vector<MatD> patterns;
    if (options.include_class_name) patterns.push_back(toy_phrase_pattern(backbone, classes[label]));
    for (const auto &d : catalog.descriptions(classes[label])) patterns.push_back(toy_phrase_pattern(backbone, d));
    for (std::size_t s = 0; s < options.samples_per_class; ++s) {
      Image img(m, w);
      std::vector<Eigen::Index> slots(static_cast<std::size_t>(m));
      for (Eigen::Index i = 0; i < m; ++i) slots[static_cast<std::size_t>(i)] = i;
      std::shuffle(slots.begin(), slots.end(), rng);
      std::size_t used = 0;
      for (const auto &p : patterns) {
        if (used == slots.size()) break;
        img.row(slots[used++]) = p + noise(options.noise);
      }
      for (; used < slots.size(); ++used) img.row(slots[used]) = noise(options.background_noise);
      ds.samples.push_back({std::move(img), label});
    }
  }
  return ds;
}

}  // namespace sap
