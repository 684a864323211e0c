// Prints one PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "oracles.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using sap::MatD;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const fs::path &workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("sap_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult cli(const std::string &args) {
  const auto out = workdir() / "stdout.txt";
  const std::string cmd = "cd '" + workdir().string() + "' && '" + SAP_CLI_PATH + "' " + args + " > '" +
                          out.string() + "' 2> '" + (workdir() / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

std::map<std::string, double> report_metrics(const std::string &name) {
  return json::parse(slurp(workdir() / name)).at("metrics").get<std::map<std::string, double>>();
}

// Training accuracy of the initial prompts on the toy preset's shots.
double initial_toy_accuracy() {
  const auto cfg = sap::load_run_config("toy", {}, {});
  const auto catalog = sap::toy_catalog(cfg.toy.num_classes, cfg.toy.descriptions_per_class);
  sap::ToyDataOptions opts;
  opts.samples_per_class = cfg.toy.train_samples_per_class;
  opts.noise = cfg.toy.noise;
  opts.background_noise = cfg.toy.background_noise;
  const auto data = sap::make_toy_dataset(cfg.encoder, catalog, catalog.class_names(), cfg.toy.train_seed, "train", opts);
  const auto split = sap::split_base_novel(data.classes, cfg.train.seed, cfg.k_shots);
  const auto shots = sap::sample_k_shot(data, split.base_classes, cfg.k_shots, cfg.train.seed);
  const auto bundle = sap::build_toy_encoder<float>(cfg.encoder);
  const auto init = sap::init_prompt_parameters<float>(cfg.encoder, bundle);
  sap::AlignmentModel<float> model(bundle, catalog, split.base_classes, cfg.train.variant);
  model.set_prompts(&init);
  std::size_t correct = 0;
  for (const auto &s : shots.samples)
    correct += split.base_classes[sap::argmax_first(model.scores(s.image).first)] == shots.classes[s.label];
  return static_cast<double>(correct) / static_cast<double>(shots.samples.size());
}

int failures = 0;

void criterion(int id, const std::string &what, const std::function<std::string(bool &)> &body) {
  bool ok = false;
  std::string detail;
  try {
    detail = body(ok);
  } catch (const std::exception &e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  if (!ok) ++failures;
  std::cout << (ok ? "PASS" : "FAIL") << " " << id << " " << what << ": " << detail << std::endl;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

}  // namespace

int main() {
  criterion(1, "gradient check", [](bool &ok) {
    const auto t0 = Clock::now();
    const auto r = fixture::check_gradients(fixture::GradientProblem(5), 1e-5);
    const double t = seconds_since(t0);
    const auto expected = 2u * 2 * 4 * 16 + 16;  // text + visual prompts, proj_bias
    ok = r.max_rel_error < 1e-4 && t < 60.0 && r.scalars == expected;
    return "max rel err " + fmt(r.max_rel_error) + " over " + std::to_string(r.scalars) + " scalars in " + fmt(t) + " s";
  });

  criterion(2, "cross-attention oracle", [](bool &ok) {
    std::mt19937_64 rng(2024);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto n = static_cast<Eigen::Index>(1 + rng() % 8), m = static_cast<Eigen::Index>(1 + rng() % 16);
      const auto d = static_cast<Eigen::Index>(1 + rng() % 32);
      const MatD q = oracle::random_matrix(rng, n, d), k = oracle::random_matrix(rng, m, d);
      const MatD v = oracle::random_matrix(rng, m, d);
      const auto [f, w] = sap::cross_attention<double>(q, k, v);
      const auto ref = oracle::cross_attention(oracle::rows_of(q), oracle::rows_of(k), oracle::rows_of(v));
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) worst = std::max(worst, std::abs(f(i, j) - ref.features[i][j]));
        for (Eigen::Index j = 0; j < m; ++j) worst = std::max(worst, std::abs(w(i, j) - ref.weights[i][j]));
      }
    }
    ok = worst < 1e-10;
    return "max deviation " + fmt(worst) + " over 100 instances";
  });

  criterion(3, "harmonic means", [](bool &ok) {
    const double a = sap::harmonic_mean(84.68, 77.51), b = sap::harmonic_mean(79.47, 69.75);
    ok = std::abs(a - 80.94) <= 0.005 && std::abs(b - 74.29) <= 0.005;
    return "HM(84.68, 77.51) = " + fmt(a) + ", HM(79.47, 69.75) = " + fmt(b);
  });

  criterion(4, "invariants on 1000 random inputs", [](bool &ok) {
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> u(-5, 5);
    double simplex = 0, scale = 0, shift = 0;
    bool alpha_ok = true, fused_exact = true, perm_exact = true;
    for (int trial = 0; trial < 1000; ++trial) {
      const auto n = static_cast<Eigen::Index>(1 + rng() % 8), m = static_cast<Eigen::Index>(1 + rng() % 16);
      const auto d = static_cast<Eigen::Index>(2 + rng() % 16), k = static_cast<Eigen::Index>(1 + rng() % 5);
      const MatD desc = oracle::normalized_rows(oracle::random_matrix(rng, n, d, 2.0));
      const MatD local = oracle::normalized_rows(oracle::random_matrix(rng, m, d, 2.0));
      const MatD global = oracle::normalized_rows(oracle::random_matrix(rng, 1, d));
      sap::ad::Graph<double> g;
      auto att = sap::cross_attention(g.constant(desc), g.constant(local), g.constant(local));
      auto r = sap::relevance_scores(g.constant(desc), g.constant(global));
      auto mean = sap::mean_description_feature(att.features, r);
      auto alpha = sap::specificity_alpha(att.weights);
      auto fused = sap::fuse_features(g.constant(global), mean, alpha);

      for (Eigen::Index i = 0; i < n; ++i) simplex = std::max(simplex, std::abs(att.weights.value().row(i).sum() - 1.0));
      simplex = std::max(simplex, std::abs(r.value().sum() - 1.0));
      const double a = alpha.value()(0, 0);
      alpha_ok = alpha_ok && a >= 1.0 / static_cast<double>(m) - 1e-15 && a <= 1.0;
      fused_exact = fused_exact && fused.value() == MatD(global * (1.0 - a) + mean.value() * a);

      const MatD text = oracle::normalized_rows(oracle::random_matrix(rng, k, d));
      const double xi = sap::alignment_score<double>(fused.value(), text);
      scale = std::max(scale, std::abs(sap::alignment_score<double>(MatD(fused.value() * std::exp(u(rng))), text) - xi));
      std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      MatD permuted(k, d);
      for (Eigen::Index i = 0; i < k; ++i) permuted.row(i) = text.row(order[static_cast<std::size_t>(i)]);
      perm_exact = perm_exact && sap::alignment_score<double>(fused.value(), permuted) == xi;

      const auto y = static_cast<Eigen::Index>(1 + rng() % 10);
      const MatD s = oracle::random_matrix(rng, 2, y, 0.5);
      const std::vector<std::size_t> labels = {rng() % static_cast<std::size_t>(y), rng() % static_cast<std::size_t>(y)};
      MatD shifted = s;
      shifted.row(0).array() += u(rng);
      shifted.row(1).array() += u(rng);
      shift = std::max(shift, std::abs(sap::classification_loss<double>(shifted, labels, 0.01) -
                                       sap::classification_loss<double>(s, labels, 0.01)));
    }
    ok = simplex <= 1e-9 && alpha_ok && fused_exact && scale <= 1e-9 && shift <= 1e-9 && perm_exact;
    return "simplex " + fmt(simplex) + ", alpha bounds " + (alpha_ok ? "ok" : "violated") + ", fused " +
           (fused_exact ? "exact" : "inexact") + ", scale " + fmt(scale) + ", CE shift " + fmt(shift) +
           ", permutation " + (perm_exact ? "exact" : "inexact");
  });

  criterion(5, "toy overfit", [](bool &ok) {
    const auto t0 = Clock::now();
    const auto tr = cli("train --preset toy --out toy");
    const auto ev = cli("eval --preset toy --checkpoint toy/checkpoint.json --protocol b2n --out toy_b2n.json");
    const double t = seconds_since(t0);
    if (tr.code != 0 || ev.code != 0) return "cli exit codes " + std::to_string(tr.code) + "/" + std::to_string(ev.code);
    const auto summary = json::parse(tr.out);
    const double acc = summary.at("final_epoch").at("train_accuracy").get<double>();
    const auto n = summary.at("train_samples").get<std::size_t>();
    const auto classes = summary.at("label_space").size();
    const auto epochs = summary.at("epochs").get<std::size_t>();
    ok = acc == 1.0 && n == 48 && classes == 3 && epochs <= 50 && t < 120.0;
    return "train accuracy " + fmt(initial_toy_accuracy()) + " -> " + fmt(acc) + " on " + std::to_string(classes) + " classes x " + std::to_string(n / classes) +
           " shots after " + std::to_string(epochs) + " epochs; train+eval " + fmt(t) + " s";
  });

  criterion(6, "protocol consistency", [](bool &ok) {
    if (!fs::exists(workdir() / "toy/checkpoint.json") && cli("train --preset toy --out toy").code != 0)
      return std::string("training failed");
    std::ostringstream out;
    ok = true;
    for (const std::string ck : {"", " --checkpoint toy/checkpoint.json"}) {
      if (cli("eval --preset toy --protocol b2n --out b.json" + ck).code != 0 ||
          cli("eval --preset toy --protocol gzs --out g.json" + ck).code != 0)
        return std::string("eval failed");
      const auto b = report_metrics("b.json"), g = report_metrics("g.json");
      const auto hm_b = sap::harmonic_mean(b.at("Base"), b.at("Novel"));
      const auto hm_g = sap::harmonic_mean(g.at("gBase"), g.at("gNovel"));
      ok = ok && b.at("Base") >= g.at("gBase") && b.at("Novel") >= g.at("gNovel") &&
           std::abs(hm_b - b.at("HM")) <= 1e-9 && std::abs(hm_g - g.at("gHM")) <= 1e-9;
      out << (ck.empty() ? "zero-shot" : "trained") << " Base/Novel/HM " << fmt(b.at("Base")) << "/" << fmt(b.at("Novel"))
          << "/" << fmt(b.at("HM")) << " vs " << fmt(g.at("gBase")) << "/" << fmt(g.at("gNovel")) << "/"
          << fmt(g.at("gHM")) << "; ";
    }
    return out.str();
  });

  criterion(7, "template bit-exactness", [](bool &ok) {
    const auto a = sap::compose_class_templates("cat", {"has whiskers"});
    const auto b = sap::compose_ovc_templates({"has a yellow body"});
    ok = a == std::vector<std::string>{"a photo of a cat, which has whiskers"} &&
         b == std::vector<std::string>{"a photo of an object, which has a yellow body"};
    return "\"" + a.at(0) + "\" / \"" + b.at(0) + "\"";
  });

  criterion(8, "determinism", [](bool &ok) {
    const auto a = cli("train --preset toy --epochs 10 --seed 3 --out det_a");
    const auto b = cli("train --preset toy --epochs 10 --seed 3 --out det_b");
    if (a.code != 0 || b.code != 0) return std::string("training failed");
    const bool history_same = slurp(workdir() / "det_a/history.jsonl") == slurp(workdir() / "det_b/history.jsonl") &&
                              !slurp(workdir() / "det_a/history.jsonl").empty();

    if (cli("train --preset toy --epochs 3 --set train.precision=float64 --out det64").code != 0)
      return std::string("float64 training failed");
    const auto first = sap::load_checkpoint(workdir() / "det64/checkpoint.json");
    sap::save_checkpoint(first.params, first.train_config, first.encoder_config, workdir() / "det64/again.json");
    const auto second = sap::load_checkpoint(workdir() / "det64/again.json");
    const bool round_trip = first.params == second.params &&
                            slurp(workdir() / "det64/checkpoint.json") == slurp(workdir() / "det64/again.json");

    // And straight from memory: trained doubles survive save and load.
    fixture::GradientProblem prob(8);
    sap::TrainConfig tc;
    tc.epochs = 2;
    tc.prompt_depth = prob.config.prompt_depth;
    tc.precision = sap::Precision::float64;
    const auto trained = sap::train<double>(prob.data, prob.label_space, prob.catalog, prob.bundle, tc);
    sap::save_checkpoint(trained.params, tc, prob.config, workdir() / "mem.json");
    const bool memory_trip = sap::load_checkpoint(workdir() / "mem.json").params == trained.params;

    ok = history_same && round_trip && memory_trip;
    return std::string("history ") + (history_same ? "bit-identical" : "differs") + ", float64 checkpoint " +
           (round_trip && memory_trip ? "round-trips exactly" : "changed on round trip");
  });

  criterion(9, "all alignment variants", [](bool &ok) {
    std::ostringstream out;
    bool runs = true;
    for (auto v : sap::kAllVariants) {
      const std::string name(sap::to_string(v));
      const auto tr = cli("train --preset toy --epochs 5 --variant " + name + " --out var_" + name);
      const auto ev = cli("eval --preset toy --protocol b2n --checkpoint var_" + name + "/checkpoint.json --out var_" +
                          name + ".json");
      const bool good = tr.code == 0 && ev.code == 0 && std::isfinite(report_metrics("var_" + name + ".json").at("HM"));
      runs = runs && good;
      out << name << (good ? " ok" : " FAILED") << "; ";
    }

    const auto cfg = sap::load_run_config("toy", {}, {});
    const auto bundle = sap::build_toy_encoder<double>(cfg.encoder);
    const auto catalog = sap::toy_catalog(cfg.toy.num_classes, cfg.toy.descriptions_per_class);
    const auto ck = sap::load_checkpoint(workdir() / "toy/checkpoint.json");
    const auto data = sap::make_toy_dataset(cfg.encoder, catalog, catalog.class_names(), cfg.toy.test_seed, "test", {});
    const auto &img = data.samples.front().image;
    std::map<sap::AlignmentVariant, MatD> fused, scores;
    for (auto v : sap::kAllVariants) {
      auto [s, b] = sap::class_alignments<double>(img, catalog.class_names(), catalog, bundle, &ck.params, v);
      fused[v] = b.fused_feature;
      scores[v] = s;
    }
    using V = sap::AlignmentVariant;
    const auto differ = [](const MatD &a, const MatD &b) { return (a - b).cwiseAbs().maxCoeff() > 1e-12; };
    const bool fused_distinct = differ(fused[V::sap], fused[V::global_only]) &&
                                differ(fused[V::sap], fused[V::global_local_avg]) &&
                                differ(fused[V::global_only], fused[V::global_local_avg]);
    bool scores_distinct = true;
    for (auto a : sap::kAllVariants)
      for (auto b : sap::kAllVariants)
        if (a < b) scores_distinct = scores_distinct && differ(scores[a], scores[b]);
    const bool global_exact = fused[V::global_only] == sap::encode_image<double>(img, bundle, &ck.params).global_feature;
    ok = runs && fused_distinct && scores_distinct && global_exact;
    out << "fused paths " << (fused_distinct ? "distinct" : "collide") << ", scores "
        << (scores_distinct ? "distinct" : "collide") << ", global_only fused "
        << (global_exact ? "== prompted global" : "!= prompted global");
    return out.str();
  });

  fs::remove_all(workdir());
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
