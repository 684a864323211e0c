#pragma once

// Description-guided alignment between an image and a label space.
//
// Pipeline per image (prompted features throughout):
//   desc    = phi(A)                       N x d, unprompted, cached
//   F, W    = attend(desc, local, local)   parameter-free, scaled softmax
//   r       = softmax(desc . global)       relevance of each description
//   m       = r^T F                        mean description-guided feature
//   alpha   = mean_i max_j W[i, j]         specificity
//   fused   = (1 - alpha) global + alpha m
//   xi(y)   = mean_a cos(fused, phi_p(y; a))
//
// Each stage is written once against the autodiff graph. The Mat overloads
// run the same code on a scratch graph.

#include <array>
#include <cmath>
#include <functional>
#include <cstddef>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sap/autodiff.hpp"
#include "sap/description_catalog.hpp"
#include "sap/encoder.hpp"
#include "sap/hashing.hpp"
#include "sap/linalg.hpp"

namespace sap {

enum class AlignmentVariant {
  sap,
  mean_text_feature,
  aggregated_descriptions,
  global_only,
  global_local_avg,
  no_text_guidance,
};

inline constexpr std::array<AlignmentVariant, 6> kAllVariants = {
    AlignmentVariant::sap,         AlignmentVariant::mean_text_feature, AlignmentVariant::aggregated_descriptions,
    AlignmentVariant::global_only, AlignmentVariant::global_local_avg,  AlignmentVariant::no_text_guidance};

inline std::string_view to_string(AlignmentVariant v) {
  switch (v) {
    case AlignmentVariant::sap: return "sap";
    case AlignmentVariant::mean_text_feature: return "mean_text_feature";
    case AlignmentVariant::aggregated_descriptions: return "aggregated_descriptions";
    case AlignmentVariant::global_only: return "global_only";
    case AlignmentVariant::global_local_avg: return "global_local_avg";
    case AlignmentVariant::no_text_guidance: return "no_text_guidance";
  }
  return "sap";
}

inline AlignmentVariant variant_from_string(std::string_view s) {
  for (auto v : kAllVariants)
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown alignment variant: " + std::string(s) +
                              " (expected sap, mean_text_feature, aggregated_descriptions, global_only, "
                              "global_local_avg, no_text_guidance)");
}

// Whether class names appear in text templates (out-of-vocabulary mode hides them).
enum class TextMode { class_names, out_of_vocabulary };

// ---------------------------------------------------------------------------
// Stages on the graph

template <class T>
struct AttentionVars {
  ad::Var<T> features;  // N x d
  ad::Var<T> weights;   // N x M
};

template <class T>
AttentionVars<T> cross_attention(ad::Var<T> queries, ad::Var<T> keys, ad::Var<T> values) {
  if (queries.rows() < 1 || keys.rows() < 1) throw std::invalid_argument("cross_attention: empty queries or keys");
  if (queries.cols() != keys.cols() || keys.rows() != values.rows())
    throw std::invalid_argument("cross_attention: dimension mismatch between queries, keys and values");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(queries.cols()));
  auto logits = ad::scale(ad::matmul(queries, ad::transpose(keys)), inv_sqrt_d);
  auto weights = ad::softmax_rows(logits);
  return {ad::matmul(weights, values), weights};
}

// 1 x N softmax of the description/global dot products.
template <class T>
ad::Var<T> relevance_scores(ad::Var<T> description_features, ad::Var<T> global_feature) {
  if (description_features.rows() < 1) throw std::invalid_argument("relevance_scores: no descriptions");
  if (global_feature.rows() != 1 || global_feature.cols() != description_features.cols())
    throw std::invalid_argument("relevance_scores: dimension mismatch");
  return ad::softmax_rows(ad::transpose(ad::matmul(description_features, ad::transpose(global_feature))));
}

template <class T>
ad::Var<T> mean_description_feature(ad::Var<T> description_image_features, ad::Var<T> relevance) {
  if (relevance.rows() != 1 || relevance.cols() != description_image_features.rows())
    throw std::invalid_argument("mean_description_feature: relevance length differs from feature rows");
  return ad::matmul(relevance, description_image_features);
}

template <class T>
ad::Var<T> specificity_alpha(ad::Var<T> attention_weights) {
  if (attention_weights.value().size() == 0) throw std::invalid_argument("specificity_alpha: empty weights");
  return ad::scale(ad::sum(ad::max_rows(attention_weights)), T(1) / static_cast<T>(attention_weights.rows()));
}

// (1 - alpha) * global + alpha * mean_desc, not renormalized.
template <class T>
ad::Var<T> fuse_features(ad::Var<T> global, ad::Var<T> mean_desc, ad::Var<T> alpha) {
  if (global.cols() != mean_desc.cols()) throw std::invalid_argument("fuse_features: dimension mismatch");
  return ad::add(ad::scale_by(global, ad::one_minus(alpha)), ad::scale_by(mean_desc, alpha));
}

// Mean cosine similarity between one feature and each text row.
template <class T>
ad::Var<T> alignment_score(ad::Var<T> fused, ad::Var<T> text_features) {
  if (text_features.rows() < 1) throw std::invalid_argument("alignment_score: no text features");
  if (fused.rows() != 1 || fused.cols() != text_features.cols())
    throw std::invalid_argument("alignment_score: dimension mismatch");
  return ad::sorted_mean(ad::row_dots(ad::normalize_rows(text_features), ad::normalize_rows(fused)));
}

// Cosine similarity with the unnormalized mean of the text rows.
template <class T>
ad::Var<T> mean_text_alignment(ad::Var<T> fused, ad::Var<T> text_features) {
  if (text_features.rows() < 1) throw std::invalid_argument("mean_text_alignment: no text features");
  return ad::row_dots(ad::normalize_rows(ad::mean_rows(text_features)), ad::normalize_rows(fused));
}

// ---------------------------------------------------------------------------
// Plain-matrix entry points

template <class T>
std::pair<Mat<T>, Mat<T>> cross_attention(const Mat<T> &queries, const Mat<T> &keys, const Mat<T> &values) {
  ad::Graph<T> g;
  auto out = cross_attention(g.constant(queries), g.constant(keys), g.constant(values));
  return {out.features.value(), out.weights.value()};
}

template <class T>
Mat<T> relevance_scores(const Mat<T> &description_features, const Mat<T> &global_feature) {
  ad::Graph<T> g;
  return relevance_scores(g.constant(description_features), g.constant(global_feature)).value();
}

template <class T>
Mat<T> mean_description_feature(const Mat<T> &description_image_features, const Mat<T> &relevance) {
  ad::Graph<T> g;
  return mean_description_feature(g.constant(description_image_features), g.constant(relevance)).value();
}

template <class T>
T specificity_alpha(const Mat<T> &attention_weights) {
  ad::Graph<T> g;
  return specificity_alpha(g.constant(attention_weights)).value()(0, 0);
}

// Convex combination followed by renormalization.
template <class T>
Mat<T> fuse_features(const Mat<T> &global, const Mat<T> &mean_desc, T alpha) {
  if (!(alpha >= T(0) && alpha <= T(1))) throw std::invalid_argument("fuse_features: alpha outside [0, 1]");
  ad::Graph<T> g;
  Mat<T> a(1, 1);
  a(0, 0) = alpha;
  return ad::normalize_rows(fuse_features(g.constant(global), g.constant(mean_desc), g.constant(a))).value();
}

template <class T>
T alignment_score(const Mat<T> &fused, const Mat<T> &text_features) {
  ad::Graph<T> g;
  return alignment_score(g.constant(fused), g.constant(text_features)).value()(0, 0);
}

// ---------------------------------------------------------------------------
// Label-space pipeline

template <class T>
struct AlignmentBundle {
  Mat<T> attention_weights;             // N x M
  Mat<T> description_image_features;    // N x d
  Mat<T> relevance;                     // 1 x N
  T alpha = T(0);
  Mat<T> mean_description_feature;      // 1 x d
  Mat<T> global_feature;                // 1 x d
  Mat<T> fused_feature;                 // 1 x d, (1 - alpha) global + alpha mean
  Mat<T> fused_normalized;              // fused_feature / |fused_feature|
};

// Text templates for one class under a variant and text mode.
inline std::vector<std::string> class_text_templates(const std::string &class_name, const DescriptionCatalog &catalog,
                                                     AlignmentVariant variant, TextMode mode,
                                                     const PromptTemplate &tmpl = {}) {
  const std::string shown = mode == TextMode::out_of_vocabulary ? std::string(kOutOfVocabularyName) : class_name;
  const auto &descriptions = catalog.descriptions(class_name);
  switch (variant) {
    case AlignmentVariant::no_text_guidance:
      return compose_class_templates(shown, {}, tmpl);
    case AlignmentVariant::aggregated_descriptions:
      return {compose_aggregated_template(shown, descriptions, tmpl)};
    default:
      return compose_class_templates(shown, descriptions, tmpl);
  }
}

// Process-wide cache of unprompted description features. The first caller
// for a key computes the matrix; concurrent callers wait for it.
template <class T>
class DescriptionFeatureCache {
 public:
  static DescriptionFeatureCache &shared() {
    static DescriptionFeatureCache instance;
    return instance;
  }

  std::shared_ptr<const Mat<T>> get(const std::string &key, const std::function<Mat<T>()> &compute) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(key);
    if (it != entries_.end()) return it->second;
    auto value = std::make_shared<const Mat<T>>(compute());
    entries_.emplace(key, value);
    return value;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::shared_ptr<const Mat<T>>> entries_;
};

template <class T>
struct AlignmentForward {
  ad::Var<T> scores;  // 1 x |Y|
  ad::Var<T> global_feature;
  ad::Var<T> fused;
  ad::Var<T> alpha;
  ad::Var<T> mean_description;
  std::optional<AttentionVars<T>> attention;
  std::optional<ad::Var<T>> relevance;
};

// Scores images against one label space. Text features and the description
// union are fixed at construction; per-image scoring is const and safe to
// call concurrently once set_prompts() has run.
template <class T>
class AlignmentModel {
 public:
  AlignmentModel(EncoderBundle<T> bundle, DescriptionCatalog catalog, std::vector<std::string> label_space,
                 AlignmentVariant variant, TextMode mode = TextMode::class_names, PromptTemplate tmpl = {})
      : bundle_(std::move(bundle)),
        catalog_(std::move(catalog)),
        label_space_(std::move(label_space)),
        variant_(variant),
        mode_(mode),
        template_(std::move(tmpl)) {
    if (label_space_.empty()) throw std::invalid_argument("class_alignments: empty label space");
    template_.validate();
    union_ = catalog_.union_over(label_space_);
    if (union_.empty() && variant_ != AlignmentVariant::global_only) {
      std::clog << "warning: no class descriptions for the label space; falling back to plain class templates\n";
      degenerate_ = true;
    }
    for (const auto &y : label_space_)
      if (!templates_.count(y)) templates_.emplace(y, class_text_templates(y, catalog_, effective_variant(), mode_, template_));
    if (!union_.empty()) {
      std::string ls;
      for (const auto &y : label_space_) ls += y + '\n';
      const std::string key = bundle_.backbone().name() + '|' + bundle_.config().hash() + '|' +
                              catalog_.content_hash() + '|' + sha256_hex(ls) + "|unprompted";
      description_features_ = DescriptionFeatureCache<T>::shared().get(
          key, [this] { return encode_text<T>(union_, bundle_, nullptr); });
    }
    for (const auto &[name, tmpls] : templates_) unprompted_text_.emplace(name, encode_text<T>(tmpls, bundle_, nullptr));
  }

  const std::vector<std::string> &label_space() const { return label_space_; }
  const std::vector<std::string> &description_union() const { return union_; }
  AlignmentVariant variant() const { return variant_; }
  bool degenerate() const { return degenerate_; }
  const EncoderBundle<T> &bundle() const { return bundle_; }
  const std::vector<std::string> &templates(const std::string &class_name) const { return templates_.at(class_name); }

  // phi(A), N x d; empty when N = 0.
  Mat<T> description_features() const {
    return description_features_ ? *description_features_ : Mat<T>(0, static_cast<Eigen::Index>(bundle_.config().d));
  }

  const Mat<T> &unprompted_text_features(const std::string &class_name) const {
    return unprompted_text_.at(class_name);
  }

  // Per-class text features on the graph, one entry per label-space position.
  std::vector<ad::Var<T>> class_text_features(ad::Graph<T> &g, const PromptVars<T> *prompts) const {
    std::map<std::string, ad::Var<T>> by_name;
    std::vector<ad::Var<T>> out;
    for (const auto &y : label_space_) {
      auto it = by_name.find(y);
      if (it == by_name.end()) {
        auto v = prompts ? encode_text(g, templates_.at(y), bundle_, prompts) : g.constant(unprompted_text_.at(y));
        it = by_name.emplace(y, v).first;
      }
      out.push_back(it->second);
    }
    return out;
  }

  // Scores for one image given its (prompted) features and the class text features.
  AlignmentForward<T> forward(ad::Graph<T> &g, const ImageFeatureVars<T> &image,
                              const std::vector<ad::Var<T>> &class_text) const {
    if (class_text.size() != label_space_.size()) throw std::invalid_argument("forward: class text count mismatch");
    const auto d = static_cast<Eigen::Index>(bundle_.config().d);
    AlignmentForward<T> out;
    out.global_feature = image.global_feature;
    const bool use_attention = !union_.empty() && variant_ != AlignmentVariant::global_only &&
                               variant_ != AlignmentVariant::global_local_avg;
    if (use_attention) {
      auto desc = g.constant(*description_features_);
      auto att = cross_attention(desc, image.local_features, image.local_features);
      auto r = relevance_scores(desc, image.global_feature);
      out.mean_description = mean_description_feature(att.features, r);
      out.alpha = specificity_alpha(att.weights);
      out.attention = att;
      out.relevance = r;
    } else if (variant_ == AlignmentVariant::global_local_avg) {
      out.mean_description = ad::mean_rows(image.local_features);
      out.alpha = g.constant(Mat<T>::Constant(1, 1, T(0.5)));
    } else {
      out.mean_description = g.constant(Mat<T>::Zero(1, d));
      out.alpha = g.constant(Mat<T>::Zero(1, 1));
    }
    out.fused = fuse_features(image.global_feature, out.mean_description, out.alpha);
    std::vector<ad::Var<T>> per_class;
    per_class.reserve(class_text.size());
    for (const auto &t : class_text)
      per_class.push_back(variant_ == AlignmentVariant::mean_text_feature ? mean_text_alignment(out.fused, t)
                                                                           : alignment_score(out.fused, t));
    out.scores = ad::hstack(std::span<const ad::Var<T>>(per_class));
    return out;
  }

  // Caches prompted text features for inference. Pass nullptr for the
  // unprompted model.
  void set_prompts(const PromptParameters<T> *prompts) {
    prompts_.reset();
    prompted_text_.clear();
    if (prompts) {
      prompts->validate(bundle_.config());
      prompts_ = *prompts;
      for (const auto &[name, tmpls] : templates_) prompted_text_.emplace(name, encode_text<T>(tmpls, bundle_, &*prompts_));
    }
  }

  // Scores of one image against every label-space class.
  std::pair<Mat<T>, AlignmentBundle<T>> scores(const Image &image) const {
    ad::Graph<T> g;
    std::optional<PromptVars<T>> vars;
    if (prompts_) vars = PromptVars<T>::bind(g, *prompts_, false);
    const auto feats = encode_image(g, image, bundle_, vars ? &*vars : nullptr);
    std::vector<ad::Var<T>> text;
    for (const auto &y : label_space_)
      text.push_back(g.constant(prompts_ ? prompted_text_.at(y) : unprompted_text_.at(y)));
    const auto f = forward(g, feats, text);
    AlignmentBundle<T> b;
    if (f.attention) {
      b.attention_weights = f.attention->weights.value();
      b.description_image_features = f.attention->features.value();
      b.relevance = f.relevance->value();
    }
    b.alpha = f.alpha.value()(0, 0);
    b.mean_description_feature = f.mean_description.value();
    b.global_feature = f.global_feature.value();
    b.fused_feature = f.fused.value();
    b.fused_normalized = b.fused_feature / b.fused_feature.norm();
    return {f.scores.value(), std::move(b)};
  }

 private:
  AlignmentVariant effective_variant() const {
    return degenerate_ ? AlignmentVariant::no_text_guidance : variant_;
  }

  EncoderBundle<T> bundle_;
  DescriptionCatalog catalog_;
  std::vector<std::string> label_space_;
  AlignmentVariant variant_;
  TextMode mode_;
  PromptTemplate template_;
  std::vector<std::string> union_;
  bool degenerate_ = false;
  std::map<std::string, std::vector<std::string>> templates_;
  std::shared_ptr<const Mat<T>> description_features_;
  std::map<std::string, Mat<T>> unprompted_text_;
  std::map<std::string, Mat<T>> prompted_text_;
  std::optional<PromptParameters<T>> prompts_;
};

// One-shot scoring of an image against a label space.
template <class T>
std::pair<Mat<T>, AlignmentBundle<T>> class_alignments(const Image &image, const std::vector<std::string> &label_space,
                                                       const DescriptionCatalog &catalog,
                                                       const EncoderBundle<T> &bundle,
                                                       const PromptParameters<T> *prompts, AlignmentVariant variant,
                                                       TextMode mode = TextMode::class_names) {
  AlignmentModel<T> model(bundle, catalog, label_space, variant, mode);
  model.set_prompts(prompts);
  return model.scores(image);
}

}  // namespace sap
