#pragma once

// Training objective: cross-entropy over alignment scores plus two L1
// steering terms that keep prompted features near their frozen versions.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "sap/autodiff.hpp"
#include "sap/linalg.hpp"

namespace sap {

template <class T>
struct LossBreakdown {
  T l_ce = T(0);
  T l_steer_v = T(0);
  T l_steer_t = T(0);
  T total = T(0);
  T lambda1 = T(0);
  T lambda2 = T(0);
};

// Mean over rows of -log softmax(scores / tau)[label].
template <class T>
ad::Var<T> classification_loss(ad::Var<T> scores, std::span<const std::size_t> labels, T tau) {
  if (!(tau > T(0))) throw std::invalid_argument("classification_loss: tau must be positive");
  if (!scores.value().allFinite()) throw std::domain_error("classification_loss: non-finite scores");
  return ad::cross_entropy(ad::scale(scores, T(1) / tau), labels);
}

// (1/B) sum_i |prompted_i - unprompted_i|_1 over global features.
template <class T>
ad::Var<T> visual_steering_loss(std::span<const ad::Var<T>> prompted, std::span<const ad::Var<T>> unprompted) {
  if (prompted.size() != unprompted.size() || prompted.empty())
    throw std::invalid_argument("visual_steering_loss: batch mismatch");
  std::vector<ad::Var<T>> diffs;
  for (std::size_t i = 0; i < prompted.size(); ++i) {
    if (prompted[i].rows() != unprompted[i].rows() || prompted[i].cols() != unprompted[i].cols())
      throw std::invalid_argument("visual_steering_loss: shape mismatch");
    diffs.push_back(ad::sub(prompted[i], unprompted[i]));
  }
  return ad::scale(ad::abs_sum(ad::vstack(std::span<const ad::Var<T>>(diffs))), T(1) / static_cast<T>(diffs.size()));
}

// (1/|Y|) sum_y |phi_p(y; A_y) - phi(y; A_y)|_1, entries summed per class.
template <class T>
ad::Var<T> text_steering_loss(std::span<const ad::Var<T>> prompted, std::span<const ad::Var<T>> unprompted) {
  if (prompted.size() != unprompted.size() || prompted.empty())
    throw std::invalid_argument("text_steering_loss: class set mismatch");
  std::vector<ad::Var<T>> terms;
  for (std::size_t y = 0; y < prompted.size(); ++y) {
    if (prompted[y].rows() != unprompted[y].rows() || prompted[y].cols() != unprompted[y].cols())
      throw std::invalid_argument("text_steering_loss: shape mismatch for class " + std::to_string(y));
    terms.push_back(ad::abs_sum(ad::sub(prompted[y], unprompted[y])));
  }
  return ad::scale(ad::sum(ad::vstack(std::span<const ad::Var<T>>(terms))), T(1) / static_cast<T>(terms.size()));
}

template <class T>
ad::Var<T> total_loss(ad::Var<T> l_ce, ad::Var<T> l_steer_v, ad::Var<T> l_steer_t, T lambda1, T lambda2) {
  if (lambda1 < T(0) || lambda2 < T(0)) throw std::invalid_argument("total_loss: lambdas must be non-negative");
  return ad::add(ad::add(l_ce, ad::scale(l_steer_v, lambda1)), ad::scale(l_steer_t, lambda2));
}

// ---------------------------------------------------------------------------
// Plain-matrix entry points

template <class T>
T classification_loss(const Mat<T> &scores, const std::vector<std::size_t> &labels, T tau) {
  ad::Graph<T> g;
  return classification_loss(g.constant(scores), std::span<const std::size_t>(labels), tau).value()(0, 0);
}

// Rows of the two matrices are the batch.
template <class T>
T visual_steering_loss(const Mat<T> &prompted, const Mat<T> &unprompted) {
  if (prompted.rows() != unprompted.rows() || prompted.cols() != unprompted.cols())
    throw std::invalid_argument("visual_steering_loss: shape mismatch");
  ad::Graph<T> g;
  std::vector<ad::Var<T>> p, u;
  for (Eigen::Index i = 0; i < prompted.rows(); ++i) {
    p.push_back(g.constant(prompted.row(i)));
    u.push_back(g.constant(unprompted.row(i)));
  }
  return visual_steering_loss<T>(p, u).value()(0, 0);
}

template <class T>
T text_steering_loss(const std::vector<Mat<T>> &prompted, const std::vector<Mat<T>> &unprompted) {
  ad::Graph<T> g;
  std::vector<ad::Var<T>> p, u;
  for (const auto &m : prompted) p.push_back(g.constant(m));
  for (const auto &m : unprompted) u.push_back(g.constant(m));
  return text_steering_loss<T>(p, u).value()(0, 0);
}

template <class T>
LossBreakdown<T> total_loss(T l_ce, T l_steer_v, T l_steer_t, T lambda1, T lambda2) {
  if (lambda1 < T(0) || lambda2 < T(0)) throw std::invalid_argument("total_loss: lambdas must be non-negative");
  return {l_ce, l_steer_v, l_steer_t, l_ce + lambda1 * l_steer_v + lambda2 * l_steer_t, lambda1, lambda2};
}

}  // namespace sap
