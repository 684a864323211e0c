#pragma once

// Evaluation protocols: base/novel splits, K-shot sampling, prediction and
// the five reports (b2n, gzs, ovc, xdataset, fewshot). Accuracies are
// micro-averaged over images and expressed in percent.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sap/dataset.hpp"
#include "sap/description_catalog.hpp"
#include "sap/encoder.hpp"
#include "sap/semantic_alignment.hpp"

namespace sap {

enum class Protocol { gzs, b2n, ovc, xdataset, fewshot };

inline constexpr std::array<Protocol, 5> kAllProtocols = {Protocol::gzs, Protocol::b2n, Protocol::ovc,
                                                          Protocol::xdataset, Protocol::fewshot};

inline std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::gzs: return "gzs";
    case Protocol::b2n: return "b2n";
    case Protocol::ovc: return "ovc";
    case Protocol::xdataset: return "xdataset";
    case Protocol::fewshot: return "fewshot";
  }
  return "b2n";
}

inline std::optional<Protocol> protocol_from_string(std::string_view s) {
  for (auto p : kAllProtocols)
    if (to_string(p) == s) return p;
  return std::nullopt;
}

struct SplitSpec {
  std::vector<std::string> base_classes;
  std::vector<std::string> novel_classes;
  std::size_t k_shots = 16;
  std::uint64_t seed = 0;

  std::vector<std::string> all_classes() const {
    auto out = base_classes;
    out.insert(out.end(), novel_classes.begin(), novel_classes.end());
    return out;
  }

  // Disjoint, and together exactly the given label space.
  void validate(const std::vector<std::string> &label_space) const {
    std::set<std::string> base(base_classes.begin(), base_classes.end());
    for (const auto &c : novel_classes)
      if (base.count(c)) throw std::invalid_argument("split: class '" + c + "' is both base and novel");
    std::set<std::string> all = base;
    all.insert(novel_classes.begin(), novel_classes.end());
    if (all != std::set<std::string>(label_space.begin(), label_space.end()) ||
        all.size() != base_classes.size() + novel_classes.size())
      throw std::invalid_argument("split: base and novel must partition the label space");
  }
};

// Base = the first ceil(|Y|/2) classes in canonical order; novel = the rest.
// The seed is recorded for K-shot sampling; it does not affect the split.
inline SplitSpec split_base_novel(const std::vector<std::string> &label_space, std::uint64_t seed,
                                  std::size_t k_shots = 16) {
  if (label_space.size() < 2) throw std::invalid_argument("split_base_novel: need at least two classes");
  const std::size_t n_base = (label_space.size() + 1) / 2;
  SplitSpec s;
  s.base_classes.assign(label_space.begin(), label_space.begin() + static_cast<std::ptrdiff_t>(n_base));
  s.novel_classes.assign(label_space.begin() + static_cast<std::ptrdiff_t>(n_base), label_space.end());
  s.k_shots = k_shots;
  s.seed = seed;
  return s;
}

// Explicit split file: {"base": [...], "novel": [...]}.
inline SplitSpec load_split_override(const std::filesystem::path &path, const std::vector<std::string> &label_space,
                                     std::uint64_t seed, std::size_t k_shots = 16) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open split file: " + path.string());
  const auto j = nlohmann::json::parse(in);
  SplitSpec s;
  s.base_classes = j.at("base").get<std::vector<std::string>>();
  s.novel_classes = j.at("novel").get<std::vector<std::string>>();
  s.k_shots = k_shots;
  s.seed = seed;
  s.validate(label_space);
  return s;
}

// Per class, min(k, available) samples drawn uniformly without replacement.
// Classes are visited in the given order with one seeded generator; chosen
// samples keep their dataset order.
inline Dataset sample_k_shot(const Dataset &dataset, const std::vector<std::string> &classes, std::size_t k,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  for (const auto &c : classes) {
    const std::size_t label = dataset.class_index(c);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i)
      if (dataset.samples[i].label == label) members.push_back(i);
    if (members.empty()) throw std::invalid_argument("sample_k_shot: class '" + c + "' has no samples");
    std::shuffle(members.begin(), members.end(), rng);
    members.resize(std::min(k, members.size()));
    chosen.insert(chosen.end(), members.begin(), members.end());
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset out{dataset.dataset_id, dataset.classes, {}, dataset.split};
  for (auto i : chosen) out.samples.push_back(dataset.samples[i]);
  return out;
}

inline double harmonic_mean(double a, double b) {
  if (a < 0 || b < 0) throw std::invalid_argument("harmonic_mean: negative input");
  if (a + b == 0) return 0.0;
  return 2.0 * a * b / (a + b);
}

// Index of the first maximal entry.
template <class T>
std::size_t argmax_first(const Mat<T> &scores) {
  if (scores.size() == 0) throw std::invalid_argument("argmax: empty scores");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i)
    if (scores.data()[i] > scores.data()[best]) best = i;
  return static_cast<std::size_t>(best);
}

template <class T>
std::string predict_class(const Image &image, const std::vector<std::string> &label_space,
                          const DescriptionCatalog &catalog, const EncoderBundle<T> &bundle,
                          const PromptParameters<T> *prompts, AlignmentVariant variant) {
  if (label_space.empty()) throw std::invalid_argument("predict_class: empty label space");
  const auto [scores, bundle_out] = class_alignments(image, label_space, catalog, bundle, prompts, variant);
  return label_space[argmax_first(scores)];
}

struct ClassCount {
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct EvalReport {
  Protocol protocol = Protocol::b2n;
  std::map<std::string, double> metrics;
  std::map<std::string, ClassCount> counts;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::string> flags;

  nlohmann::json to_json() const {
    nlohmann::json c = nlohmann::json::object();
    for (const auto &[name, cc] : counts) c[name] = {{"correct", cc.correct}, {"total", cc.total}};
    return {{"protocol", std::string(to_string(protocol))},
            {"metrics", metrics},
            {"counts", c},
            {"metadata", metadata},
            {"flags", flags}};
  }

  static EvalReport from_json(const nlohmann::json &j) {
    EvalReport r;
    const auto p = protocol_from_string(j.at("protocol").get<std::string>());
    if (!p) throw std::invalid_argument("report: unknown protocol");
    r.protocol = *p;
    r.metrics = j.at("metrics").get<std::map<std::string, double>>();
    for (const auto &[name, cc] : j.at("counts").items())
      r.counts[name] = {cc.at("correct").get<std::size_t>(), cc.at("total").get<std::size_t>()};
    r.metadata = j.value("metadata", nlohmann::json::object());
    r.flags = j.value("flags", std::vector<std::string>{});
    return r;
  }
};

// Everything needed to score images besides the label space.
template <class T>
struct EvalArtifacts {
  EncoderBundle<T> bundle;
  DescriptionCatalog catalog;
  std::optional<PromptParameters<T>> prompts;
  AlignmentVariant variant = AlignmentVariant::sap;
  PromptTemplate prompt_template;
  std::size_t workers = 1;
  nlohmann::json metadata = nlohmann::json::object();  // copied into every report
};

namespace detail {

struct Tally {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::map<std::string, ClassCount> per_class;

  double accuracy() const { return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total); }
};

// Scores every sample whose class is in `subset` against `label_space`.
template <class T>
Tally run_classification(const EvalArtifacts<T> &art, const Dataset &test, const std::vector<std::string> &label_space,
                         const std::vector<std::string> &subset, TextMode mode) {
  AlignmentModel<T> model(art.bundle, art.catalog, label_space, art.variant, mode, art.prompt_template);
  model.set_prompts(art.prompts ? &*art.prompts : nullptr);
  std::set<std::string> wanted(subset.begin(), subset.end());
  std::vector<const Sample *> samples;
  for (const auto &s : test.samples)
    if (wanted.count(test.label_name(s))) samples.push_back(&s);
  if (samples.empty()) throw std::invalid_argument("evaluation: empty test set");

  std::vector<std::string> predicted(samples.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(art.workers, samples.size()));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < samples.size(); i += workers)
      predicted[i] = label_space[argmax_first(model.scores(samples[i]->image).first)];
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto &t : pool) t.join();
  }

  Tally tally;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto &truth = test.label_name(*samples[i]);
    auto &cc = tally.per_class[truth];
    ++cc.total;
    ++tally.total;
    if (predicted[i] == truth) {
      ++cc.correct;
      ++tally.correct;
    }
  }
  return tally;
}

template <class T>
EvalReport make_report(Protocol p, const EvalArtifacts<T> &art) {
  EvalReport r;
  r.protocol = p;
  r.metadata = art.metadata;
  r.metadata["variant"] = std::string(to_string(art.variant));
  r.metadata["catalog_hash"] = art.catalog.content_hash();
  r.metadata["averaging"] = "micro";
  return r;
}

inline void merge_counts(EvalReport &r, const Tally &t) {
  for (const auto &[k, v] : t.per_class) {
    r.counts[k].correct += v.correct;
    r.counts[k].total += v.total;
  }
}

template <class T>
EvalReport base_novel_report(Protocol p, const Dataset &test, const SplitSpec &split, const EvalArtifacts<T> &art,
                             TextMode mode) {
  split.validate(split.all_classes());
  auto r = make_report(p, art);
  const auto base = run_classification(art, test, split.base_classes, split.base_classes, mode);
  const auto novel = run_classification(art, test, split.novel_classes, split.novel_classes, mode);
  r.metrics["Base"] = base.accuracy();
  r.metrics["Novel"] = novel.accuracy();
  r.metrics["HM"] = harmonic_mean(base.accuracy(), novel.accuracy());
  merge_counts(r, base);
  merge_counts(r, novel);
  r.metadata["split_seed"] = split.seed;
  return r;
}

}  // namespace detail

// Base accuracy with label space = base classes; Novel with label space =
// novel classes; HM of the two.
template <class T>
EvalReport evaluate_b2n(const Dataset &test, const SplitSpec &split, const EvalArtifacts<T> &art) {
  return detail::base_novel_report(Protocol::b2n, test, split, art, TextMode::class_names);
}

// One pass over base + novel; gBase / gNovel restrict by true class.
template <class T>
EvalReport evaluate_gzs(const Dataset &test, const SplitSpec &split, const EvalArtifacts<T> &art) {
  auto r = detail::make_report(Protocol::gzs, art);
  const auto all = split.all_classes();
  const auto base = detail::run_classification(art, test, all, split.base_classes, TextMode::class_names);
  const auto novel = detail::run_classification(art, test, all, split.novel_classes, TextMode::class_names);
  r.metrics["gBase"] = base.accuracy();
  r.metrics["gNovel"] = novel.accuracy();
  r.metrics["gHM"] = harmonic_mean(base.accuracy(), novel.accuracy());
  detail::merge_counts(r, base);
  detail::merge_counts(r, novel);
  r.metadata["split_seed"] = split.seed;
  return r;
}

// B2N with every class name replaced by "object". Classes without
// descriptions, or sharing an identical description set, are flagged.
template <class T>
EvalReport evaluate_ovc(const Dataset &test, const SplitSpec &split, const EvalArtifacts<T> &art) {
  auto r = detail::base_novel_report(Protocol::ovc, test, split, art, TextMode::out_of_vocabulary);
  const auto all = split.all_classes();
  std::map<std::vector<std::string>, std::vector<std::string>> by_set;
  for (const auto &c : all) {
    const auto &d = art.catalog.descriptions(c);
    if (d.empty()) r.flags.push_back("empty_descriptions:" + c);
    auto key = d;
    std::sort(key.begin(), key.end());
    by_set[key].push_back(c);
  }
  for (const auto &[key, classes] : by_set) {
    if (classes.size() < 2) continue;
    std::string joined;
    for (const auto &c : classes) joined += (joined.empty() ? "" : ",") + c;
    r.flags.push_back("indistinguishable:" + joined);
  }
  return r;
}

// Accuracy over the full target label space.
template <class T>
EvalReport evaluate_cross_dataset(const Dataset &test, const EvalArtifacts<T> &art) {
  auto r = detail::make_report(Protocol::xdataset, art);
  for (const auto &c : test.classes) {
    if (!art.catalog.contains(c)) {
      std::clog << "warning: class '" << c << "' is missing from the catalog; using the plain template\n";
      r.flags.push_back("missing_from_catalog:" + c);
    }
  }
  const auto t = detail::run_classification(art, test, test.classes, test.classes, TextMode::class_names);
  r.metrics["accuracy"] = t.accuracy();
  detail::merge_counts(r, t);
  r.metadata["target_dataset"] = test.dataset_id;
  return r;
}

// Few-shot: every class is a training class; plain accuracy over all of them.
template <class T>
EvalReport evaluate_fewshot(const Dataset &test, const EvalArtifacts<T> &art) {
  auto r = detail::make_report(Protocol::fewshot, art);
  const auto t = detail::run_classification(art, test, test.classes, test.classes, TextMode::class_names);
  r.metrics["accuracy"] = t.accuracy();
  detail::merge_counts(r, t);
  return r;
}

// Checks that every harmonic mean in a report re-derives from its operands.
inline bool report_harmonic_means_consistent(const EvalReport &r, double tol = 1e-9) {
  auto check = [&](const char *a, const char *b, const char *h) {
    if (!r.metrics.count(h)) return true;
    return std::abs(harmonic_mean(r.metrics.at(a), r.metrics.at(b)) - r.metrics.at(h)) <= tol;
  };
  return check("Base", "Novel", "HM") && check("gBase", "gNovel", "gHM");
}

// Per-metric mean across reports, accumulated incrementally so identical
// inputs average to themselves exactly.
inline std::map<std::string, double> mean_metrics(const std::vector<EvalReport> &reports) {
  std::map<std::string, double> mean;
  std::map<std::string, std::size_t> seen;
  for (const auto &r : reports)
    for (const auto &[k, v] : r.metrics) {
      const auto n = ++seen[k];
      if (n == 1)
        mean[k] = v;
      else
        mean[k] += (v - mean[k]) / static_cast<double>(n);
    }
  return mean;
}

}  // namespace sap
