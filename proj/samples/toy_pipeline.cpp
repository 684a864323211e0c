// End-to-end toy run: build the toy encoder and catalog, train prompts on the
// base classes, then report B2N and GZS accuracies.

#include <chrono>
#include <iostream>

#include "sap/sap.hpp"

int main(int argc, char **argv) {
  const std::size_t epochs = argc > 1 ? std::stoul(argv[1]) : 50;
  const double lr = argc > 2 ? std::stod(argv[2]) : 0.05;

  auto cfg = sap::RunConfig::from_json(sap::toy_preset_json());
  cfg.train.epochs = epochs;
  cfg.train.lr = lr;
  const auto catalog = sap::toy_catalog(cfg.toy.num_classes, cfg.toy.descriptions_per_class);
  const auto bundle = sap::build_toy_encoder<float>(cfg.encoder);

  sap::ToyDataOptions opts;
  opts.noise = cfg.toy.noise;
  opts.background_noise = cfg.toy.background_noise;
  opts.samples_per_class = cfg.toy.train_samples_per_class;
  const auto train_set = sap::make_toy_dataset(cfg.encoder, catalog, catalog.class_names(), cfg.toy.train_seed, "train", opts);
  opts.samples_per_class = cfg.toy.test_samples_per_class;
  const auto test_set = sap::make_toy_dataset(cfg.encoder, catalog, catalog.class_names(), cfg.toy.test_seed, "test", opts);

  const auto split = sap::split_base_novel(train_set.classes, cfg.train.seed);
  const auto shots = sap::sample_k_shot(train_set, split.base_classes, cfg.k_shots, cfg.train.seed);

  const auto t0 = std::chrono::steady_clock::now();
  const auto result = sap::train<float>(shots, split.base_classes, catalog, bundle, cfg.train);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto losses = result.history.epoch_mean_loss();
  for (std::size_t e = 0; e < losses.size(); ++e)
    std::cout << "epoch " << e << "  loss " << losses[e] << "  train acc " << result.history.epoch_accuracy[e] << "\n";
  std::cout << "trained in " << secs << " s\n";

  sap::EvalArtifacts<float> zero{bundle, catalog, std::nullopt, cfg.train.variant, {}, 4, {}};
  auto tuned = zero;
  tuned.prompts = result.params;
  for (const auto *art : {&zero, &tuned}) {
    const auto b2n = sap::evaluate_b2n(test_set, split, *art);
    const auto gzs = sap::evaluate_gzs(test_set, split, *art);
    std::cout << (art->prompts ? "prompted  " : "zero-shot ") << "b2n " << b2n.to_json()["metrics"].dump()
              << "  gzs " << gzs.to_json()["metrics"].dump() << "\n";
  }
  // Training-set accuracy with the final prompts.
  const auto fit = sap::evaluate_fewshot(shots.with_classes(split.base_classes), tuned);
  std::cout << "final training accuracy: " << fit.metrics.at("accuracy") << "\n";
  return 0;
}
