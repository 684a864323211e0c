#pragma once

// Prompt optimization: SGD with momentum and weight decay under a linear
// warmup + cosine schedule. Only PromptParameters change; the backbone is
// never placed on the graph as a parameter.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sap/dataset.hpp"
#include "sap/description_catalog.hpp"
#include "sap/encoder.hpp"
#include "sap/objective.hpp"
#include "sap/semantic_alignment.hpp"

namespace sap {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t step, const std::string &what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

enum class Precision { float32, float64 };

inline std::string_view to_string(Precision p) { return p == Precision::float32 ? "float32" : "float64"; }

inline Precision precision_from_string(std::string_view s) {
  if (s == "float32") return Precision::float32;
  if (s == "float64") return Precision::float64;
  throw std::invalid_argument("precision must be float32 or float64, got " + std::string(s));
}

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double lr = 0.0025;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t warmup_epochs = 1;
  double lambda1 = 10.0;
  double lambda2 = 25.0;
  std::size_t prompt_depth = 9;
  std::uint64_t seed = 1;
  AlignmentVariant variant = AlignmentVariant::sap;
  Precision precision = Precision::float32;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
    if (lr < 0 || momentum < 0 || weight_decay < 0 || lambda1 < 0 || lambda2 < 0)
      throw std::invalid_argument("train config: lr, momentum, weight_decay and lambdas must be non-negative");
    if (prompt_depth == 0) throw std::invalid_argument("train config: prompt_depth must be positive");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"warmup_epochs", warmup_epochs},
            {"lambda1", lambda1},
            {"lambda2", lambda2},
            {"prompt_depth", prompt_depth},
            {"seed", seed},
            {"variant", std::string(to_string(variant))},
            {"precision", std::string(to_string(precision))}};
  }

  static TrainConfig from_json(const nlohmann::json &j) {
    TrainConfig c;
    c.epochs = detail::json_unsigned(j, "epochs", c.epochs);
    c.batch_size = detail::json_unsigned(j, "batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_epochs = detail::json_unsigned(j, "warmup_epochs", c.warmup_epochs);
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lambda2 = j.value("lambda2", c.lambda2);
    c.prompt_depth = detail::json_unsigned(j, "prompt_depth", c.prompt_depth);
    c.seed = detail::json_unsigned(j, "seed", c.seed);
    c.variant = variant_from_string(j.value("variant", std::string("sap")));
    c.precision = precision_from_string(j.value("precision", std::string("float32")));
    c.validate();
    return c;
  }

  bool operator==(const TrainConfig &) const = default;
};

// Linear warmup from 0 over warmup_epochs * steps_per_epoch steps, then
// lr * (1 + cos(pi t / T)) / 2 where t counts post-warmup steps and T is the
// index of the last step, so the final step runs at 0.
inline double lr_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig &config) {
  const std::size_t warmup = config.warmup_epochs * steps_per_epoch;
  const std::size_t total = config.epochs * steps_per_epoch;
  if (step < warmup) return config.lr * static_cast<double>(step) / static_cast<double>(warmup);
  const std::size_t t = step - warmup;
  if (total <= warmup + 1) return config.lr;
  const double horizon = static_cast<double>(total - warmup - 1);
  const double progress = std::min(1.0, static_cast<double>(t) / horizon);
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown<double> loss;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_accuracy;  // fraction of training predictions correct during each epoch
  std::vector<double> epoch_seconds;
  std::size_t steps_per_epoch = 0;

  // Mean total loss over the steps of each epoch.
  std::vector<double> epoch_mean_loss() const {
    std::vector<double> out;
    if (steps_per_epoch == 0) return out;
    for (std::size_t e = 0; e * steps_per_epoch < steps.size(); ++e) {
      double acc = 0;
      std::size_t n = 0;
      for (std::size_t s = e * steps_per_epoch; s < std::min(steps.size(), (e + 1) * steps_per_epoch); ++s, ++n)
        acc += steps[s].loss.total;
      out.push_back(acc / static_cast<double>(n));
    }
    return out;
  }

  // One JSON object per line: step, epoch, lr, l_ce, l_steer_v, l_steer_t, total.
  void write_jsonl(std::ostream &out) const {
    for (const auto &s : steps) {
      nlohmann::ordered_json j;
      j["step"] = s.step;
      j["epoch"] = s.epoch;
      j["lr"] = s.lr;
      j["l_ce"] = s.loss.l_ce;
      j["l_steer_v"] = s.loss.l_steer_v;
      j["l_steer_t"] = s.loss.l_steer_t;
      j["total"] = s.loss.total;
      out << j.dump() << '\n';
    }
  }
};

template <class T>
struct TrainResult {
  PromptParameters<T> params;
  TrainHistory history;
};

// Loss, its breakdown, per-sample predictions and gradients for one batch.
template <class T>
struct BatchEvaluation {
  LossBreakdown<T> loss;
  PromptParameters<T> gradients;
  std::vector<std::size_t> predictions;  // label-space positions
};

// Forward + backward of the full objective for one batch. Labels are
// label-space positions. unprompted_globals holds theta(x) per batch sample.
template <class T>
BatchEvaluation<T> evaluate_batch(const AlignmentModel<T> &model, const PromptParameters<T> &params,
                                  std::span<const Image *const> images, std::span<const std::size_t> labels,
                                  std::span<const Mat<T>> unprompted_globals, T lambda1, T lambda2,
                                  bool with_gradients = true) {
  const auto &bundle = model.bundle();
  ad::Graph<T> g;
  auto pv = PromptVars<T>::bind(g, params, true);
  const auto text = model.class_text_features(g, &pv);
  const auto text0 = model.class_text_features(g, nullptr);

  std::vector<ad::Var<T>> rows, prompted_globals, frozen_globals;
  BatchEvaluation<T> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto feats = encode_image(g, *images[i], bundle, &pv);
    const auto fw = model.forward(g, feats, text);
    rows.push_back(fw.scores);
    prompted_globals.push_back(feats.global_feature);
    frozen_globals.push_back(g.constant(unprompted_globals[i]));
    Eigen::Index best = 0;
    const auto &s = fw.scores.value();
    for (Eigen::Index c = 1; c < s.cols(); ++c)
      if (s(0, c) > s(0, best)) best = c;
    out.predictions.push_back(static_cast<std::size_t>(best));
  }
  auto scores = ad::vstack(std::span<const ad::Var<T>>(rows));
  auto l_ce = classification_loss(scores, labels, bundle.tau());
  auto l_v = visual_steering_loss<T>(prompted_globals, frozen_globals);
  auto l_t = text_steering_loss<T>(text, text0);
  auto total = total_loss(l_ce, l_v, l_t, lambda1, lambda2);
  out.loss = {l_ce.value()(0, 0), l_v.value()(0, 0), l_t.value()(0, 0), total.value()(0, 0), lambda1, lambda2};
  if (with_gradients) {
    g.backward(total);
    out.gradients = pv.gradients();
  }
  return out;
}

// label_space: the classes the prompts are trained to separate (base
// classes). Every training sample's class must be in it.
template <class T>
TrainResult<T> train(const Dataset &dataset, const std::vector<std::string> &label_space,
                     const DescriptionCatalog &catalog, const EncoderBundle<T> &bundle, const TrainConfig &config,
                     std::optional<PromptParameters<T>> initial = std::nullopt) {
  config.validate();
  if (dataset.samples.empty()) throw std::invalid_argument("train: empty dataset");
  if (config.prompt_depth != bundle.config().prompt_depth)
    throw std::invalid_argument("train: prompt_depth differs between train and encoder configs");

  std::vector<std::size_t> position(dataset.classes.size(), label_space.size());
  for (std::size_t i = 0; i < label_space.size(); ++i) position[dataset.class_index(label_space[i])] = i;
  for (const auto &s : dataset.samples)
    if (position[s.label] == label_space.size())
      throw std::invalid_argument("train: sample of class '" + dataset.classes[s.label] + "' outside the label space");

  AlignmentModel<T> model(bundle, catalog, label_space, config.variant);
  TrainResult<T> result{initial ? *initial : init_prompt_parameters<T>(bundle.config(), bundle), {}};
  auto &params = result.params;
  params.validate(bundle.config());

  std::vector<Mat<T>> frozen_globals;
  frozen_globals.reserve(dataset.samples.size());
  for (const auto &s : dataset.samples)
    frozen_globals.push_back(encode_image<T>(s.image, bundle, nullptr).global_feature);

  PromptParameters<T> velocity = params;
  velocity.for_each([](Mat<T> &m) { m.setZero(); });

  const std::size_t n = dataset.samples.size();
  const std::size_t spe = (n + config.batch_size - 1) / config.batch_size;
  result.history.steps_per_epoch = spe;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < spe; ++b, ++step) {
      const std::size_t lo = b * config.batch_size, hi = std::min(n, lo + config.batch_size);
      std::vector<const Image *> images;
      std::vector<std::size_t> labels;
      std::vector<Mat<T>> globals;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto &s = dataset.samples[order[k]];
        images.push_back(&s.image);
        labels.push_back(position[s.label]);
        globals.push_back(frozen_globals[order[k]]);
      }
      const double lr = lr_at(step, spe, config);
      BatchEvaluation<T> ev;
      try {
        ev = evaluate_batch<T>(model, params, images, labels, globals, static_cast<T>(config.lambda1),
                               static_cast<T>(config.lambda2));
      } catch (const std::domain_error &e) {
        throw TrainingError(step, "non-finite values at step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(static_cast<double>(ev.loss.total)))
        throw TrainingError(step, "non-finite loss at step " + std::to_string(step));
      for (std::size_t k = 0; k < labels.size(); ++k) correct += ev.predictions[k] == labels[k];

      // v <- momentum v + g + wd p;  p <- p - lr v
      std::vector<Mat<T> *> p_list, v_list;
      std::vector<const Mat<T> *> g_list;
      params.for_each([&](Mat<T> &m) { p_list.push_back(&m); });
      velocity.for_each([&](Mat<T> &m) { v_list.push_back(&m); });
      ev.gradients.for_each([&](const Mat<T> &m) { g_list.push_back(&m); });
      const T mu = static_cast<T>(config.momentum), wd = static_cast<T>(config.weight_decay),
              step_size = static_cast<T>(lr);
      for (std::size_t i = 0; i < p_list.size(); ++i) {
        *v_list[i] = mu * *v_list[i] + *g_list[i] + wd * *p_list[i];
        *p_list[i] -= step_size * *v_list[i];
      }

      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.loss = {static_cast<double>(ev.loss.l_ce),      static_cast<double>(ev.loss.l_steer_v),
                  static_cast<double>(ev.loss.l_steer_t), static_cast<double>(ev.loss.total),
                  config.lambda1,                         config.lambda2};
      result.history.steps.push_back(rec);
    }
    result.history.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
    result.history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
  }
  return result;
}

}  // namespace sap
