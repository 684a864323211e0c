#pragma once

// Frozen dual-encoder abstraction and prompted feature extraction.
//
// A Backbone owns the frozen weights. Everything trainable lives in
// PromptParameters: per-layer text and visual prompt tokens plus the bias
// added to projected patch tokens. All features leaving this header are
// L2-normalized rows, so downstream dot products are cosine similarities.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sap/autodiff.hpp"
#include "sap/hashing.hpp"
#include "sap/linalg.hpp"

namespace sap {

class EncodeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// Non-negative integer config value; rejects negatives instead of wrapping.
template <class U>
U json_unsigned(const nlohmann::json &j, const char *key, U fallback) {
  if (!j.contains(key)) return fallback;
  const auto &v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.template get<long long>() >= 0))
    throw std::invalid_argument(std::string("config key '") + key + "' must be a non-negative integer");
  return v.template get<U>();
}

}  // namespace detail

struct EncoderConfig {
  std::size_t d = 16;              // shared embedding dimension
  std::size_t d_prime = 16;        // transformer width (both towers)
  std::size_t num_patches = 9;     // M
  std::size_t patch_dim = 16;      // channels of one raw patch
  std::size_t n_tokens = 4;        // prompt tokens per layer and modality
  std::size_t prompt_depth = 9;
  std::size_t layers = 12;
  std::size_t context_length = 77;
  std::size_t vocab_size = 4096;
  std::uint64_t seed = 0;

  void validate() const {
    if (d == 0 || d_prime == 0 || num_patches == 0 || patch_dim == 0)
      throw std::invalid_argument("encoder config: dimensions must be positive");
    if (n_tokens == 0) throw std::invalid_argument("encoder config: n_tokens must be >= 1");
    if (prompt_depth == 0 || prompt_depth > layers)
      throw std::invalid_argument("encoder config: need 1 <= prompt_depth <= layers");
    if (vocab_size < 2) throw std::invalid_argument("encoder config: vocab_size must be >= 2");
  }

  nlohmann::json to_json() const {
    return {{"d", d},
            {"d_prime", d_prime},
            {"num_patches", num_patches},
            {"patch_dim", patch_dim},
            {"n_tokens", n_tokens},
            {"prompt_depth", prompt_depth},
            {"layers", layers},
            {"context_length", context_length},
            {"vocab_size", vocab_size},
            {"seed", seed}};
  }

  static EncoderConfig from_json(const nlohmann::json &j) {
    EncoderConfig c;
    c.d = detail::json_unsigned(j, "d", c.d);
    c.d_prime = detail::json_unsigned(j, "d_prime", c.d_prime);
    c.num_patches = detail::json_unsigned(j, "num_patches", c.num_patches);
    c.patch_dim = detail::json_unsigned(j, "patch_dim", c.patch_dim);
    c.n_tokens = detail::json_unsigned(j, "n_tokens", c.n_tokens);
    c.prompt_depth = detail::json_unsigned(j, "prompt_depth", c.prompt_depth);
    c.layers = detail::json_unsigned(j, "layers", c.layers);
    c.context_length = detail::json_unsigned(j, "context_length", c.context_length);
    c.vocab_size = detail::json_unsigned(j, "vocab_size", c.vocab_size);
    c.seed = detail::json_unsigned(j, "seed", c.seed);
    c.validate();
    return c;
  }

  // Digest of the sorted-key JSON form.
  std::string hash() const { return sha256_hex(to_json().dump()); }

  bool operator==(const EncoderConfig &) const = default;
};

template <class T>
struct PromptParameters {
  std::vector<Mat<T>> text_prompts;    // prompt_depth x (n_tokens x d_prime)
  std::vector<Mat<T>> visual_prompts;  // prompt_depth x (n_tokens x d_prime)
  Mat<T> proj_bias;                    // 1 x d

  // Visits every trainable tensor in a fixed order: text layers, visual
  // layers, then the bias.
  template <class F>
  void for_each(F &&f) {
    for (auto &m : text_prompts) f(m);
    for (auto &m : visual_prompts) f(m);
    f(proj_bias);
  }
  template <class F>
  void for_each(F &&f) const {
    for (const auto &m : text_prompts) f(m);
    for (const auto &m : visual_prompts) f(m);
    f(proj_bias);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each([&](const Mat<T> &m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <class U>
  PromptParameters<U> cast() const {
    PromptParameters<U> out;
    for (const auto &m : text_prompts) out.text_prompts.push_back(m.template cast<U>());
    for (const auto &m : visual_prompts) out.visual_prompts.push_back(m.template cast<U>());
    out.proj_bias = proj_bias.template cast<U>();
    return out;
  }

  void validate(const EncoderConfig &c) const {
    if (text_prompts.size() != c.prompt_depth || visual_prompts.size() != c.prompt_depth)
      throw std::invalid_argument("prompt parameters: layer count differs from prompt_depth");
    const auto n = static_cast<Eigen::Index>(c.n_tokens), w = static_cast<Eigen::Index>(c.d_prime);
    for_each([&](const Mat<T> &m) {
      if (!m.allFinite()) throw std::invalid_argument("prompt parameters: non-finite entry");
    });
    for (const auto &m : text_prompts)
      if (m.rows() != n || m.cols() != w) throw std::invalid_argument("prompt parameters: bad text prompt shape");
    for (const auto &m : visual_prompts)
      if (m.rows() != n || m.cols() != w) throw std::invalid_argument("prompt parameters: bad visual prompt shape");
    if (proj_bias.rows() != 1 || proj_bias.cols() != static_cast<Eigen::Index>(c.d))
      throw std::invalid_argument("prompt parameters: proj_bias must have length d");
  }

  bool operator==(const PromptParameters &o) const {
    auto same = [](const std::vector<Mat<T>> &a, const std::vector<Mat<T>> &b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
      return true;
    };
    return same(text_prompts, o.text_prompts) && same(visual_prompts, o.visual_prompts) &&
           proj_bias.cols() == o.proj_bias.cols() && proj_bias == o.proj_bias;
  }
};

// PromptParameters placed on a graph.
template <class T>
struct PromptVars {
  std::vector<ad::Var<T>> text;
  std::vector<ad::Var<T>> visual;
  ad::Var<T> proj_bias;

  static PromptVars bind(ad::Graph<T> &g, const PromptParameters<T> &p, bool trainable) {
    PromptVars v;
    auto leaf = [&](const Mat<T> &m) { return trainable ? g.parameter(m) : g.constant(m); };
    for (const auto &m : p.text_prompts) v.text.push_back(leaf(m));
    for (const auto &m : p.visual_prompts) v.visual.push_back(leaf(m));
    v.proj_bias = leaf(p.proj_bias);
    return v;
  }

  // Gradients in PromptParameters layout after graph.backward().
  PromptParameters<T> gradients() const {
    PromptParameters<T> out;
    for (const auto &v : text) out.text_prompts.push_back(v.graph->grad(v));
    for (const auto &v : visual) out.visual_prompts.push_back(v.graph->grad(v));
    out.proj_bias = proj_bias.graph->grad(proj_bias);
    return out;
  }
};

template <class T>
struct ImageFeatures {
  Mat<T> global_feature;   // 1 x d
  Mat<T> local_features;   // M x d
  bool prompted = false;
};

template <class T>
struct ImageFeatureVars {
  ad::Var<T> global_feature;
  ad::Var<T> local_features;
  bool prompted = false;
};

// Adapter contract every backbone satisfies. Weights are frozen: the forward
// functions only place constants on the graph, so gradients can reach
// prompts alone.
template <class T>
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const EncoderConfig &config() const = 0;
  virtual std::string name() const = 0;
  virtual std::vector<std::size_t> tokenize(const std::string &text) const = 0;
  virtual Mat<T> token_embeddings(const std::vector<std::size_t> &tokens) const = 0;

  // Text tower: token ids -> 1 x d feature (before normalization).
  virtual ad::Var<T> text_forward(ad::Graph<T> &g, const std::vector<std::size_t> &tokens,
                                  const PromptVars<T> *prompts) const = 0;

  // Image tower: raw image -> (1 + M) x d_prime final states, cls row first.
  virtual ad::Var<T> image_forward(ad::Graph<T> &g, const Image &image, const PromptVars<T> *prompts) const = 0;

  virtual const Mat<T> &projection() const = 0;  // d_prime x d
  virtual T tau() const = 0;
};

template <class T>
class EncoderBundle {
 public:
  EncoderBundle() = default;
  explicit EncoderBundle(std::shared_ptr<const Backbone<T>> backbone) : backbone_(std::move(backbone)) {
    if (!backbone_) throw std::invalid_argument("encoder bundle: null backbone");
    if (!(backbone_->tau() > T(0))) throw std::invalid_argument("encoder bundle: tau must be positive");
  }

  const Backbone<T> &backbone() const { return *backbone_; }
  const EncoderConfig &config() const { return backbone_->config(); }
  T tau() const { return backbone_->tau(); }
  explicit operator bool() const { return static_cast<bool>(backbone_); }

 private:
  std::shared_ptr<const Backbone<T>> backbone_;
};

// Rows are phi(S_i) (or phi_p(S_i) with prompts), L2-normalized.
template <class T>
ad::Var<T> encode_text(ad::Graph<T> &g, const std::vector<std::string> &strings, const EncoderBundle<T> &bundle,
                       const PromptVars<T> *prompts) {
  if (strings.empty()) throw EncodeError("encode_text: no strings");
  const auto &cfg = bundle.config();
  std::vector<ad::Var<T>> rows;
  rows.reserve(strings.size());
  for (const auto &s : strings) {
    const auto tokens = bundle.backbone().tokenize(s);
    const std::size_t extra = prompts ? cfg.n_tokens : 0;
    if (tokens.size() + extra + 1 > cfg.context_length)
      throw EncodeError("text exceeds encoder context after tokenization: \"" + s + "\"");
    rows.push_back(ad::normalize_rows(bundle.backbone().text_forward(g, tokens, prompts)));
  }
  return rows.size() == 1 ? rows.front() : ad::vstack(std::span<const ad::Var<T>>(rows));
}

template <class T>
Mat<T> encode_text(const std::vector<std::string> &strings, const EncoderBundle<T> &bundle,
                   const PromptParameters<T> *prompts) {
  ad::Graph<T> g;
  std::optional<PromptVars<T>> vars;
  if (prompts) vars = PromptVars<T>::bind(g, *prompts, false);
  return encode_text(g, strings, bundle, vars ? &*vars : nullptr).value();
}

// Global feature: projected cls state. Local features: projected patch states
// plus proj_bias (prompted path only), each row normalized.
template <class T>
ImageFeatureVars<T> encode_image(ad::Graph<T> &g, const Image &image, const EncoderBundle<T> &bundle,
                                 const PromptVars<T> *prompts) {
  const auto &cfg = bundle.config();
  if (static_cast<std::size_t>(image.rows()) != cfg.num_patches ||
      static_cast<std::size_t>(image.cols()) != cfg.patch_dim)
    throw EncodeError("encode_image: image is " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                      ", expected " + std::to_string(cfg.num_patches) + "x" + std::to_string(cfg.patch_dim));
  const auto m = static_cast<Eigen::Index>(cfg.num_patches);
  auto states = bundle.backbone().image_forward(g, image, prompts);
  auto proj = g.constant(bundle.backbone().projection());
  auto cls = ad::slice_rows(states, 0, 1);
  auto patches = ad::slice_rows(states, 1, m);
  ImageFeatureVars<T> out;
  out.global_feature = ad::normalize_rows(ad::matmul(cls, proj));
  auto local = ad::matmul(patches, proj);
  if (prompts) local = ad::add(local, prompts->proj_bias);
  out.local_features = ad::normalize_rows(local);
  out.prompted = prompts != nullptr;
  return out;
}

template <class T>
ImageFeatures<T> encode_image(const Image &image, const EncoderBundle<T> &bundle, const PromptParameters<T> *prompts) {
  ad::Graph<T> g;
  std::optional<PromptVars<T>> vars;
  if (prompts) vars = PromptVars<T>::bind(g, *prompts, false);
  const auto f = encode_image(g, image, bundle, vars ? &*vars : nullptr);
  return {f.global_feature.value(), f.local_features.value(), f.prompted};
}

inline constexpr const char *kPromptInitPhrase = "a photo of a";
inline constexpr double kPromptInitStd = 0.02;

// First text layer: embeddings of "a photo of a". Deeper text layers and all
// visual layers: Normal(0, 0.02) from config.seed. Bias: zero.
template <class T>
PromptParameters<T> init_prompt_parameters(const EncoderConfig &config, const EncoderBundle<T> &bundle) {
  config.validate();
  const auto phrase = bundle.backbone().tokenize(kPromptInitPhrase);
  if (phrase.size() != config.n_tokens)
    throw std::invalid_argument("init_prompt_parameters: n_tokens=" + std::to_string(config.n_tokens) +
                                " but the init phrase \"" + kPromptInitPhrase + "\" has " +
                                std::to_string(phrase.size()) + " tokens");
  const auto n = static_cast<Eigen::Index>(config.n_tokens);
  const auto w = static_cast<Eigen::Index>(config.d_prime);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, kPromptInitStd);
  auto random_block = [&] {
    Mat<T> m(n, w);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(rng));
    return m;
  };
  PromptParameters<T> p;
  p.text_prompts.push_back(bundle.backbone().token_embeddings(phrase));
  for (std::size_t l = 1; l < config.prompt_depth; ++l) p.text_prompts.push_back(random_block());
  for (std::size_t l = 0; l < config.prompt_depth; ++l) p.visual_prompts.push_back(random_block());
  p.proj_bias = Mat<T>::Zero(1, static_cast<Eigen::Index>(config.d));
  return p;
}

}  // namespace sap
