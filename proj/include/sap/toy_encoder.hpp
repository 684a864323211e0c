#pragma once

// A small seeded dual encoder for desk-scale runs.
//
// Both towers share one stack of residual token-mixing layers
//   H <- H + tanh(H W_l + mean_rows(H) U_l + b_l)
// and one output projection. Text is pooled over its word rows; the image
// cls row starts as the mean patch. The mixing weights are small, so an
// image patch carrying the mean token embedding of a phrase lands near the
// text feature of that phrase.
// Prompt tokens are appended at layer 0 and overwritten with the layer's
// prompt matrix at every later layer below prompt_depth.

#include <cctype>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sap/encoder.hpp"
#include "sap/hashing.hpp"

namespace sap {

inline constexpr double kToyTau = 0.01;

// Lower-cases, splits on whitespace, and emits punctuation as separate tokens.
inline std::vector<std::string> toy_words(const std::string &text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isspace(uc)) {
      flush();
    } else if (std::ispunct(uc) && ch != '-' && ch != '\'') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    }
  }
  flush();
  return out;
}

template <class T>
class ToyBackbone final : public Backbone<T> {
 public:
  explicit ToyBackbone(const EncoderConfig &config) : config_(config) {
    config_.validate();
    if (config_.patch_dim != config_.d_prime)
      throw std::invalid_argument("toy encoder: patch_dim must equal d_prime");
    std::mt19937_64 rng(config_.seed ^ 0x5A9E7C0D3B1F2468ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto w = static_cast<Eigen::Index>(config_.d_prime);
    const auto d = static_cast<Eigen::Index>(config_.d);
    auto gaussian = [&](Eigen::Index r, Eigen::Index c, double stddev) {
      MatD m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal(rng);
      return m;
    };
    const double inv_sqrt_w = 1.0 / std::sqrt(static_cast<double>(w));
    token_embedding_ = gaussian(static_cast<Eigen::Index>(config_.vocab_size), w, 1.0).template cast<T>();
    text_positions_ = gaussian(static_cast<Eigen::Index>(config_.context_length), w, 0.05).template cast<T>();
    image_positions_ = gaussian(static_cast<Eigen::Index>(config_.num_patches), w, 0.05).template cast<T>();
    cls_embedding_ = gaussian(1, w, 0.05).template cast<T>();
    for (std::size_t l = 0; l < config_.layers; ++l) {
      token_weights_.push_back(gaussian(w, w, 0.5 * inv_sqrt_w).template cast<T>());
      mix_weights_.push_back(gaussian(w, w, 1.0 * inv_sqrt_w).template cast<T>());
      layer_bias_.push_back(gaussian(1, w, 0.05).template cast<T>());
    }
    projection_ = gaussian(w, d, inv_sqrt_w).template cast<T>();
  }

  const EncoderConfig &config() const override { return config_; }
  std::string name() const override { return "toy"; }

  std::size_t token_id(const std::string &word) const {
    return 1 + static_cast<std::size_t>(fnv1a64(word) % (config_.vocab_size - 1));
  }

  std::vector<std::size_t> tokenize(const std::string &text) const override {
    std::vector<std::size_t> ids;
    for (const auto &w : toy_words(text)) ids.push_back(token_id(w));
    return ids;
  }

  Mat<T> token_embeddings(const std::vector<std::size_t> &tokens) const override {
    Mat<T> out(static_cast<Eigen::Index>(tokens.size()), token_embedding_.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = token_embedding_.row(static_cast<Eigen::Index>(tokens[i]));
    return out;
  }

  ad::Var<T> text_forward(ad::Graph<T> &g, const std::vector<std::size_t> &tokens,
                          const PromptVars<T> *prompts) const override {
    if (tokens.empty()) throw EncodeError("toy encoder: empty text");
    const auto t = static_cast<Eigen::Index>(tokens.size());
    Mat<T> words = token_embeddings(tokens) + text_positions_.topRows(t);
    auto h = g.constant(std::move(words));
    const auto n = static_cast<Eigen::Index>(config_.n_tokens);
    if (prompts) h = ad::vstack({prompts->text.front(), h});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      if (prompts && l > 0 && l < config_.prompt_depth)
        h = ad::vstack({prompts->text[l], ad::slice_rows(h, n, h.rows() - n)});
      h = layer(g, h, l);
    }
    // Pooled over the word rows; prompts act through the mixing term.
    auto pooled = ad::mean_rows(prompts ? ad::slice_rows(h, n, t) : h);
    return ad::matmul(pooled, g.constant(projection_));
  }

  // The cls row starts as the mean patch token.
  ad::Var<T> image_forward(ad::Graph<T> &g, const Image &image, const PromptVars<T> *prompts) const override {
    const auto m = static_cast<Eigen::Index>(config_.num_patches);
    Mat<T> tokens(1 + m, static_cast<Eigen::Index>(config_.d_prime));
    tokens.bottomRows(m) = image.template cast<T>() + image_positions_;
    tokens.row(0) = tokens.bottomRows(m).colwise().mean() + cls_embedding_;
    auto h = g.constant(std::move(tokens));
    if (prompts) h = ad::vstack({h, prompts->visual.front()});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      if (prompts && l > 0 && l < config_.prompt_depth)
        h = ad::vstack({ad::slice_rows(h, 0, 1 + m), prompts->visual[l]});
      h = layer(g, h, l);
    }
    return prompts ? ad::slice_rows(h, 0, 1 + m) : h;
  }

  const Mat<T> &projection() const override { return projection_; }
  T tau() const override { return static_cast<T>(kToyTau); }

 private:
  ad::Var<T> layer(ad::Graph<T> &g, ad::Var<T> h, std::size_t l) const {
    auto local = ad::matmul(h, g.constant(token_weights_[l]));
    auto mixed = ad::matmul(ad::mean_rows(h), g.constant(mix_weights_[l]));
    auto pre = ad::add(ad::add(local, mixed), g.constant(layer_bias_[l]));
    return ad::add(h, ad::tanh(pre));
  }

  EncoderConfig config_;
  Mat<T> token_embedding_;
  Mat<T> text_positions_;
  Mat<T> image_positions_;
  Mat<T> cls_embedding_;
  std::vector<Mat<T>> token_weights_;
  std::vector<Mat<T>> mix_weights_;
  std::vector<Mat<T>> layer_bias_;
  Mat<T> projection_;
};

template <class T>
EncoderBundle<T> build_toy_encoder(const EncoderConfig &config) {
  return EncoderBundle<T>(std::make_shared<const ToyBackbone<T>>(config));
}

// Desk-scale defaults: d = d' = 16, M = 9, three layers, prompts in the first two.
inline EncoderConfig toy_encoder_config(std::uint64_t seed = 7) {
  EncoderConfig c;
  c.d = 16;
  c.d_prime = 16;
  c.num_patches = 9;
  c.patch_dim = 16;
  c.n_tokens = 4;
  c.layers = 3;
  c.prompt_depth = 2;
  c.context_length = 77;
  c.vocab_size = 4096;
  c.seed = seed;
  return c;
}

}  // namespace sap
