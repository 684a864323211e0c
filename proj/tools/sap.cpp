// sap: describe / train / eval / report.
//
// Exit codes: 0 success, 1 runtime failure (provider, non-finite loss),
// 2 usage, config, manifest or catalog errors.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sap/sap.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string preset;
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string manifest;
  std::string catalog;
  std::size_t workers = 1;
};

void add_config_options(CLI::App *cmd, CommonOptions &o) {
  cmd->add_option("--preset", o.preset, "Built-in configuration (toy)");
  cmd->add_option("--config", o.config, "JSON run config file");
  cmd->add_option("--set", o.overrides, "Override key.path=value (repeatable, applied in order)");
  cmd->add_option("--seed", o.seed, "Training / split / sampling seed");
  cmd->add_option("--variant", o.variant, "Alignment variant");
  cmd->add_option("--manifest", o.manifest, "Dataset manifest (JSON)");
  cmd->add_option("--catalog", o.catalog, "Description catalog (JSON)");
}

sap::RunConfig resolve_config(const CommonOptions &o) {
  auto overrides = o.overrides;
  if (o.seed) overrides.push_back("train.seed=" + std::to_string(*o.seed));
  if (!o.variant.empty()) {
    sap::variant_from_string(o.variant);  // validates
    overrides.push_back("train.variant=\"" + o.variant + "\"");
  }
  auto cfg = sap::load_run_config(o.preset, o.config, overrides);
  cfg.workers = o.workers;
  return cfg;
}

sap::DescriptionCatalog resolve_catalog(const sap::RunConfig &cfg, const std::string &flag) {
  const std::string path = !flag.empty() ? flag : cfg.catalog;
  if (!path.empty()) return sap::load_catalog(path);
  if (cfg.preset == "toy") return sap::toy_catalog(cfg.toy.num_classes, cfg.toy.descriptions_per_class);
  throw UsageError("a description catalog is required (--catalog or data.catalog)");
}

sap::Dataset toy_split(const sap::RunConfig &cfg, const sap::DescriptionCatalog &catalog, bool train) {
  sap::ToyDataOptions opts;
  opts.samples_per_class = train ? cfg.toy.train_samples_per_class : cfg.toy.test_samples_per_class;
  opts.noise = cfg.toy.noise;
  opts.background_noise = cfg.toy.background_noise;
  return sap::make_toy_dataset(cfg.encoder, catalog, catalog.class_names(), train ? cfg.toy.train_seed : cfg.toy.test_seed,
                               train ? "train" : "test", opts);
}

sap::Dataset resolve_dataset(const sap::RunConfig &cfg, const sap::DescriptionCatalog &catalog,
                             const std::string &flag, bool train) {
  std::string path = flag;
  if (path.empty()) path = train ? cfg.manifest : (cfg.test_manifest.empty() ? cfg.manifest : cfg.test_manifest);
  if (!path.empty()) return sap::load_manifest(path);
  if (cfg.preset == "toy") return toy_split(cfg, catalog, train);
  throw UsageError("a dataset manifest is required (--manifest or data.manifest)");
}

sap::SplitSpec resolve_split(const sap::RunConfig &cfg, const sap::Dataset &ds) {
  if (!cfg.split_file.empty())
    return sap::load_split_override(cfg.split_file, ds.classes, cfg.train.seed, cfg.k_shots);
  return sap::split_base_novel(ds.classes, cfg.train.seed, cfg.k_shots);
}

void write_text(const fs::path &path, const std::string &text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------- describe

int cmd_describe(const std::string &manifest_path, const std::string &out_path, bool cached_only,
                 std::string cache_dir, const std::string &endpoint, const std::string &model) {
  sap::Dataset ds;
  try {
    ds = sap::load_manifest(manifest_path);
  } catch (const sap::ManifestError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (cache_dir.empty()) {
    const char *env = std::getenv("SAP_CACHE_DIR");
    cache_dir = env && *env ? env : ".sap_cache";
  }
  std::unique_ptr<sap::ChatCompletionClient> client;
  const char *key = std::getenv(sap::kApiKeyEnv);
  if (!cached_only && key && *key) {
    sap::ChatClientConfig cc;
    if (!endpoint.empty()) cc.endpoint = endpoint;
    if (!model.empty()) cc.model = model;
    client = std::make_unique<sap::ChatCompletionClient>(cc, key);
  }

  std::vector<sap::ClassEntry> entries;
  for (const auto &c : ds.classes) {
    try {
      entries.push_back({c, sap::fetch_descriptions(ds.dataset_id, c, client.get(), cache_dir)});
    } catch (const sap::ProviderError &e) {
      std::cerr << "error: " << e.what();
      if (!client && !cached_only) std::cerr << " (set " << sap::kApiKeyEnv << " to query the LLM provider)";
      if (cached_only) std::cerr << " (--cached-only; " << sap::kApiKeyEnv << " not consulted)";
      std::cerr << "\n";
      return kExitRuntime;
    }
  }
  const sap::DescriptionCatalog catalog(ds.dataset_id, entries);
  sap::save_catalog(catalog, out_path);
  for (const auto &e : catalog.entries()) std::cout << e.class_name << ": " << e.descriptions.size() << "\n";
  std::cout << "wrote " << out_path << " (" << catalog.size() << " unique descriptions)\n";
  return 0;
}

// ---------------------------------------------------------------- train

template <class T>
int train_impl(const sap::RunConfig &cfg, const CommonOptions &opts, const fs::path &out_dir) {
  const auto catalog = resolve_catalog(cfg, opts.catalog);
  const auto dataset = resolve_dataset(cfg, catalog, opts.manifest, true);
  std::vector<std::string> label_space =
      cfg.train_classes == "all" ? dataset.classes : resolve_split(cfg, dataset).base_classes;
  const auto shots = sap::sample_k_shot(dataset, label_space, cfg.k_shots, cfg.train.seed);
  const auto bundle = sap::build_toy_encoder<T>(cfg.encoder);

  sap::TrainResult<T> result;
  try {
    result = sap::train<T>(shots, label_space, catalog, bundle, cfg.train);
  } catch (const sap::TrainingError &e) {
    std::cerr << "error: training aborted at step " << e.step() << ": " << e.what() << "\n";
    return kExitRuntime;
  }
  fs::create_directories(out_dir);
  sap::save_checkpoint(result.params, cfg.train, cfg.encoder, out_dir / "checkpoint.json");
  std::ostringstream hist;
  result.history.write_jsonl(hist);
  write_text(out_dir / "history.jsonl", hist.str());
  write_text(out_dir / "run_config.json", cfg.to_json().dump(2) + "\n");

  json summary = {{"config_hash", cfg.hash()}, {"epochs", cfg.train.epochs}, {"label_space", label_space},
                  {"train_samples", shots.samples.size()},
                  {"trainable_parameters", result.params.scalar_count()}};
  if (!result.history.steps.empty()) {
    const auto &h = result.history;
    const std::size_t last_epoch = h.steps.back().epoch;
    double ce = 0, lv = 0, lt = 0, tot = 0;
    std::size_t n = 0;
    for (const auto &s : h.steps)
      if (s.epoch == last_epoch) {
        ce += s.loss.l_ce;
        lv += s.loss.l_steer_v;
        lt += s.loss.l_steer_t;
        tot += s.loss.total;
        ++n;
      }
    const double dn = static_cast<double>(n);
    summary["final_epoch"] = {{"epoch", last_epoch},   {"l_ce", ce / dn},       {"l_steer_v", lv / dn},
                              {"l_steer_t", lt / dn}, {"total", tot / dn},      {"train_accuracy", h.epoch_accuracy.back()}};
  }
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval

template <class T>
int eval_impl(const sap::RunConfig &cfg, const CommonOptions &opts, sap::Protocol protocol,
              const std::string &checkpoint_path, const std::string &out_path) {
  const auto catalog = resolve_catalog(cfg, opts.catalog);
  const auto test = resolve_dataset(cfg, catalog, opts.manifest, false);
  const auto bundle = sap::build_toy_encoder<T>(cfg.encoder);

  sap::EvalArtifacts<T> art{bundle, catalog, std::nullopt, cfg.train.variant, {}, cfg.workers, json::object()};
  std::string checkpoint_hash = "none";
  std::uint64_t train_seed = cfg.train.seed;
  if (!checkpoint_path.empty()) {
    const auto ck = sap::load_checkpoint(checkpoint_path, &cfg.encoder);
    art.prompts = ck.params.template cast<T>();
    art.prompt_template = ck.prompt_template;
    if (opts.variant.empty()) art.variant = ck.train_config.variant;
    if (!opts.seed) train_seed = ck.train_config.seed;
    checkpoint_hash = sap::file_sha256(checkpoint_path);
  }
  art.metadata = {{"checkpoint_hash", checkpoint_hash},
                  {"config_hash", cfg.hash()},
                  {"dataset", test.dataset_id},
                  {"seeds", {{"train", train_seed}, {"split", cfg.train.seed}}}};

  if (protocol != sap::Protocol::xdataset) {
    for (const auto &c : test.classes)
      if (!catalog.contains(c))
        throw UsageError("catalog has no entry for class '" + c + "'; protocol " + std::string(sap::to_string(protocol)) +
                         " needs every class (use xdataset for partial catalogs)");
  }

  sap::EvalReport report;
  switch (protocol) {
    case sap::Protocol::b2n: report = sap::evaluate_b2n(test, resolve_split(cfg, test), art); break;
    case sap::Protocol::gzs: report = sap::evaluate_gzs(test, resolve_split(cfg, test), art); break;
    case sap::Protocol::ovc: report = sap::evaluate_ovc(test, resolve_split(cfg, test), art); break;
    case sap::Protocol::xdataset: report = sap::evaluate_cross_dataset(test, art); break;
    case sap::Protocol::fewshot: report = sap::evaluate_fewshot(test, art); break;
  }
  const auto j = report.to_json();
  if (!out_path.empty()) write_text(out_path, j.dump(2) + "\n");
  std::cout << json{{"protocol", j.at("protocol")}, {"metrics", j.at("metrics")}}.dump() << "\n";
  for (const auto &f : report.flags) std::cerr << "flag: " << f << "\n";
  return 0;
}

// ---------------------------------------------------------------- report

std::string format_table(const std::string &protocol, const std::map<std::string, double> &mean, std::size_t n) {
  std::ostringstream t;
  t << "protocol: " << protocol << "  reports: " << n << "\n";
  t << std::left << std::setw(10) << "metric" << std::right << std::setw(10) << "mean" << "\n";
  for (const auto &[k, v] : mean) t << std::left << std::setw(10) << k << std::right << std::setw(10) << std::fixed
                                    << std::setprecision(2) << v << "\n";
  return t.str();
}

int cmd_report(const std::vector<std::string> &inputs, const std::string &out_path) {
  std::vector<sap::EvalReport> reports;
  for (const auto &p : inputs) {
    std::ifstream in(p);
    if (!in) {
      std::cerr << "error: cannot open report " << p << "\n";
      return kExitUsage;
    }
    try {
      reports.push_back(sap::EvalReport::from_json(json::parse(in)));
    } catch (const std::exception &e) {
      std::cerr << "error: malformed report " << p << ": " << e.what() << "\n";
      return kExitUsage;
    }
  }
  for (const auto &r : reports) {
    if (r.protocol != reports.front().protocol) {
      std::cerr << "error: cannot aggregate mixed protocols (" << sap::to_string(reports.front().protocol) << " and "
                << sap::to_string(r.protocol) << ")\n";
      return kExitUsage;
    }
    std::set<std::string> a, b;
    for (const auto &[k, v] : r.metrics) a.insert(k);
    for (const auto &[k, v] : reports.front().metrics) b.insert(k);
    if (a != b) {
      std::cerr << "error: reports disagree on metric names\n";
      return kExitUsage;
    }
  }
  const auto mean = sap::mean_metrics(reports);
  const std::string protocol(sap::to_string(reports.front().protocol));
  json agg = {{"protocol", protocol}, {"metrics", mean}, {"num_reports", reports.size()}, {"sources", inputs},
              {"aggregation", "mean"}};
  const auto table = format_table(protocol, mean, reports.size());
  if (!out_path.empty()) {
    write_text(out_path, agg.dump(2) + "\n");
    fs::path txt = out_path;
    txt.replace_extension(".txt");
    write_text(txt, table);
  }
  std::cout << table << json{{"metrics", mean}}.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Description-guided prompt tuning: describe, train, evaluate, report"};
  app.require_subcommand(1);

  std::string out, checkpoint, protocol_name, cache_dir, endpoint, model;
  bool cached_only = false;
  std::optional<std::size_t> epochs;
  std::vector<std::string> report_inputs;
  CommonOptions train_opts, eval_opts;
  std::string describe_manifest;

  auto *describe = app.add_subcommand("describe", "Query (or read cached) class descriptions into a catalog");
  describe->add_option("--manifest", describe_manifest, "Dataset manifest (JSON)")->required();
  describe->add_option("--out", out, "Catalog file to write")->required();
  describe->add_flag("--cached-only", cached_only, "Never call the provider; fail on cache misses");
  describe->add_option("--cache", cache_dir, "Description cache directory (default $SAP_CACHE_DIR or .sap_cache)");
  describe->add_option("--endpoint", endpoint, "Chat-completions endpoint URL");
  describe->add_option("--model", model, "Provider model name");

  auto *train = app.add_subcommand("train", "Learn prompts; writes checkpoint.json, history.jsonl, run_config.json");
  add_config_options(train, train_opts);
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--epochs", epochs, "Override train.epochs");

  auto *eval = app.add_subcommand("eval", "Evaluate a checkpoint under one protocol");
  add_config_options(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file (omit for unprompted zero-shot)");
  eval->add_option("--protocol", protocol_name, "gzs, b2n, ovc, xdataset or fewshot");
  eval->add_option("--out", out, "Report file to write");
  eval->add_option("--workers", eval_opts.workers, "Parallel evaluation threads")->check(CLI::PositiveNumber);

  auto *report = app.add_subcommand("report", "Average reports of one protocol (e.g. across seeds)");
  report->add_option("reports", report_inputs, "Report files")->required();
  report->add_option("--out", out, "Aggregate JSON to write (a .txt table is written alongside)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    if (!app.get_subcommands().empty()) return app.exit(e);
    std::cout << app.help("", CLI::AppFormatMode::All);
    std::cout << "\nEnvironment:\n  " << sap::kApiKeyEnv << "   LLM provider key (describe)\n"
              << "  SAP_CACHE_DIR     description cache directory (describe)\n";
    return 0;
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*describe) return cmd_describe(describe_manifest, out, cached_only, cache_dir, endpoint, model);
    if (*report) return cmd_report(report_inputs, out);
    if (*train) {
      if (epochs) train_opts.overrides.push_back("train.epochs=" + std::to_string(*epochs));
      const auto cfg = resolve_config(train_opts);
      return cfg.train.precision == sap::Precision::float64 ? train_impl<double>(cfg, train_opts, out)
                                                             : train_impl<float>(cfg, train_opts, out);
    }
    if (*eval) {
      auto cfg = resolve_config(eval_opts);
      const std::string name = protocol_name.empty() ? cfg.protocol : protocol_name;
      const auto protocol = sap::protocol_from_string(name);
      if (!protocol) {
        std::cerr << "error: unknown protocol '" << name << "' (allowed: gzs, b2n, ovc, xdataset, fewshot)\n";
        return kExitUsage;
      }
      return cfg.train.precision == sap::Precision::float64
                 ? eval_impl<double>(cfg, eval_opts, *protocol, checkpoint, out)
                 : eval_impl<float>(cfg, eval_opts, *protocol, checkpoint, out);
    }
  } catch (const sap::TrainingError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const sap::ProviderError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::invalid_argument &e) {  // config, encoder, split and template errors
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const sap::ManifestError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const sap::CatalogError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const sap::CheckpointError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
