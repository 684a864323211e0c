#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Graph records every intermediate matrix of one forward pass. Leaves are
// either constants (frozen weights, cached features) or parameters (prompt
// tensors). backward() walks the tape in reverse and accumulates gradients
// only into nodes that transitively depend on a parameter, so frozen
// weights never receive a gradient buffer.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sap/linalg.hpp"

namespace sap::ad {

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T> *graph = nullptr;
  std::size_t id = 0;

  const Mat<T> &value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <class T>
class Graph {
 public:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    std::function<void(Graph &, std::size_t)> backward;
  };

  Graph() = default;
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  Var<T> constant(Mat<T> value) { return push(std::move(value), false, nullptr); }

  Var<T> parameter(Mat<T> value) { return push(std::move(value), true, nullptr); }

  // Used by operations: the node requires a gradient iff any input does.
  Var<T> push(Mat<T> value, bool requires_grad, std::function<void(Graph &, std::size_t)> backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Mat<T> &value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Mat<T> &value(std::size_t id) const { return nodes_[id].value; }
  const Mat<T> &upstream(std::size_t id) const { return nodes_[id].grad; }

  // Gradient of the last backward() root with respect to v. Zero-filled when
  // v does not influence the root.
  Mat<T> grad(Var<T> v) const {
    const Node &n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <class Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived> &g) {
    Node &n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(Var<T> root) {
    if (value(root).size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    for (auto &n : nodes_) n.grad.resize(0, 0);
    nodes_[root.id].grad = Mat<T>::Ones(1, 1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node &n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool is_parameter(std::size_t id) const { return nodes_[id].requires_grad && !nodes_[id].backward; }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
Graph<T> &same_graph(Var<T> a, Var<T> b) {
  if (a.graph != b.graph) throw std::invalid_argument("operands belong to different graphs");
  return *a.graph;
}

inline void require(bool ok, const char *what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto &g = detail::same_graph(a, b);
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  const std::size_t ia = a.id, ib = b.id;
  Mat<T> out = a.value() * b.value();
  return g.push(std::move(out), g.requires_grad(a) || g.requires_grad(b), [ia, ib](Graph<T> &gr, std::size_t self) {
    const Mat<T> &up = gr.upstream(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, up * gr.value(ib).transpose());
    if (gr.requires_grad(ib)) gr.accumulate(ib, gr.value(ia).transpose() * up);
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  Mat<T> out = a.value().transpose();
  return g.push(std::move(out), g.requires_grad(a), [ia](Graph<T> &gr, std::size_t self) {
    gr.accumulate(ia, gr.upstream(self).transpose());
  });
}

// Elementwise a + sign * b. A 1 x n right operand broadcasts over the rows of a.
template <class T>
Var<T> add_signed(Var<T> a, Var<T> b, T sign) {
  auto &g = detail::same_graph(a, b);
  const bool broadcast = b.rows() == 1 && a.rows() != 1;
  detail::require(a.cols() == b.cols() && (broadcast || a.rows() == b.rows()), "add: shape mismatch");
  const std::size_t ia = a.id, ib = b.id;
  Mat<T> out = a.value();
  if (broadcast) {
    out.rowwise() += sign * b.value().row(0);
  } else {
    out += sign * b.value();
  }
  return g.push(std::move(out), g.requires_grad(a) || g.requires_grad(b),
                [ia, ib, broadcast, sign](Graph<T> &gr, std::size_t self) {
                  const Mat<T> &up = gr.upstream(self);
                  gr.accumulate(ia, up);
                  if (!gr.requires_grad(ib)) return;
                  if (broadcast) {
                    gr.accumulate(ib, sign * up.colwise().sum());
                  } else {
                    gr.accumulate(ib, sign * up);
                  }
                });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return add_signed(a, b, T(1));
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add_signed(a, b, T(-1));
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  Mat<T> out = c * a.value();
  return g.push(std::move(out), g.requires_grad(a), [ia, c](Graph<T> &gr, std::size_t self) {
    gr.accumulate(ia, c * gr.upstream(self));
  });
}

// s * a where s is a 1 x 1 node.
template <class T>
Var<T> scale_by(Var<T> a, Var<T> s) {
  auto &g = detail::same_graph(a, s);
  detail::require(s.value().size() == 1, "scale_by: scale must be 1x1");
  const std::size_t ia = a.id, is = s.id;
  Mat<T> out = s.value()(0, 0) * a.value();
  return g.push(std::move(out), g.requires_grad(a) || g.requires_grad(s), [ia, is](Graph<T> &gr, std::size_t self) {
    const Mat<T> &up = gr.upstream(self);
    gr.accumulate(ia, gr.value(is)(0, 0) * up);
    if (gr.requires_grad(is)) {
      Mat<T> gs(1, 1);
      gs(0, 0) = up.cwiseProduct(gr.value(ia)).sum();
      gr.accumulate(is, gs);
    }
  });
}

// c - a for a 1 x 1 node.
template <class T>
Var<T> one_minus(Var<T> a) {
  auto &g = *a.graph;
  detail::require(a.value().size() == 1, "one_minus: expects 1x1");
  const std::size_t ia = a.id;
  Mat<T> out(1, 1);
  out(0, 0) = T(1) - a.value()(0, 0);
  return g.push(std::move(out), g.requires_grad(a), [ia](Graph<T> &gr, std::size_t self) {
    gr.accumulate(ia, -gr.upstream(self));
  });
}

template <class T>
Var<T> tanh(Var<T> a) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  Mat<T> out = a.value().array().tanh().matrix();
  return g.push(std::move(out), g.requires_grad(a), [ia](Graph<T> &gr, std::size_t self) {
    const Mat<T> &y = gr.value(self);
    Mat<T> d = gr.upstream(self).array() * (T(1) - y.array().square());
    gr.accumulate(ia, d);
  });
}

// Column-wise mean over rows: (r x c) -> (1 x c).
template <class T>
Var<T> mean_rows(Var<T> a) {
  auto &g = *a.graph;
  detail::require(a.rows() > 0, "mean_rows: empty input");
  const std::size_t ia = a.id;
  const T inv = T(1) / static_cast<T>(a.rows());
  Mat<T> out = a.value().colwise().sum() * inv;
  return g.push(std::move(out), g.requires_grad(a), [ia, inv](Graph<T> &gr, std::size_t self) {
    const Eigen::Index r = gr.value(ia).rows();
    Mat<T> d = gr.upstream(self).replicate(r, 1) * inv;
    gr.accumulate(ia, d);
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return g.push(std::move(out), g.requires_grad(a), [ia](Graph<T> &gr, std::size_t self) {
    const Mat<T> &v = gr.value(ia);
    gr.accumulate(ia, Mat<T>::Constant(v.rows(), v.cols(), gr.upstream(self)(0, 0)));
  });
}

// Mean of all entries, summed in ascending order so that the result does not
// depend on the order in which the entries are laid out.
template <class T>
Var<T> sorted_mean(Var<T> a) {
  auto &g = *a.graph;
  detail::require(a.value().size() > 0, "sorted_mean: empty input");
  const std::size_t ia = a.id;
  std::vector<T> entries(a.value().data(), a.value().data() + a.value().size());
  std::sort(entries.begin(), entries.end());
  T acc = T(0);
  for (T v : entries) acc += v;
  const T inv = T(1) / static_cast<T>(entries.size());
  Mat<T> out(1, 1);
  out(0, 0) = acc * inv;
  return g.push(std::move(out), g.requires_grad(a), [ia, inv](Graph<T> &gr, std::size_t self) {
    const Mat<T> &v = gr.value(ia);
    gr.accumulate(ia, Mat<T>::Constant(v.rows(), v.cols(), gr.upstream(self)(0, 0) * inv));
  });
}

// Sum of absolute values (entrywise L1 norm). The subgradient at 0 is 0.
template <class T>
Var<T> abs_sum(Var<T> a) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  Mat<T> out(1, 1);
  out(0, 0) = a.value().cwiseAbs().sum();
  return g.push(std::move(out), g.requires_grad(a), [ia](Graph<T> &gr, std::size_t self) {
    const T up = gr.upstream(self)(0, 0);
    Mat<T> d = gr.value(ia).unaryExpr([up](T x) { return x > T(0) ? up : (x < T(0) ? -up : T(0)); });
    gr.accumulate(ia, d);
  });
}

// Divides each row by its L2 norm.
template <class T>
Var<T> normalize_rows(Var<T> a) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  const Mat<T> &x = a.value();
  Mat<T> norms(x.rows(), 1);
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T n = x.row(r).norm();
    if (!(n > T(0))) throw std::domain_error("normalize_rows: zero-norm row");
    norms(r, 0) = n;
    out.row(r) = x.row(r) / n;
  }
  return g.push(std::move(out), g.requires_grad(a), [ia, norms](Graph<T> &gr, std::size_t self) {
    const Mat<T> &y = gr.value(self);
    const Mat<T> &up = gr.upstream(self);
    Mat<T> d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T proj = y.row(r).dot(up.row(r));
      d.row(r) = (up.row(r) - proj * y.row(r)) / norms(r, 0);
    }
    gr.accumulate(ia, d);
  });
}

// Row-wise softmax with max subtraction.
template <class T>
Var<T> softmax_rows(Var<T> a) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  const Mat<T> &x = a.value();
  detail::require(x.cols() > 0, "softmax_rows: empty rows");
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    T z = T(0);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      out(r, c) = std::exp(x(r, c) - m);
      z += out(r, c);
    }
    out.row(r) /= z;
  }
  return g.push(std::move(out), g.requires_grad(a), [ia](Graph<T> &gr, std::size_t self) {
    const Mat<T> &y = gr.value(self);
    const Mat<T> &up = gr.upstream(self);
    Mat<T> d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T inner = y.row(r).dot(up.row(r));
      d.row(r) = y.row(r).array() * (up.row(r).array() - inner);
    }
    gr.accumulate(ia, d);
  });
}

// Per-row maximum: (r x c) -> (r x 1). The gradient routes to the first
// maximal entry of each row.
template <class T>
Var<T> max_rows(Var<T> a) {
  auto &g = *a.graph;
  const std::size_t ia = a.id;
  const Mat<T> &x = a.value();
  detail::require(x.cols() > 0, "max_rows: empty rows");
  Mat<T> out(x.rows(), 1);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < x.cols(); ++c)
      if (x(r, c) > x(r, best)) best = c;
    arg[static_cast<std::size_t>(r)] = best;
    out(r, 0) = x(r, best);
  }
  return g.push(std::move(out), g.requires_grad(a), [ia, arg](Graph<T> &gr, std::size_t self) {
    const Mat<T> &up = gr.upstream(self);
    const Mat<T> &x = gr.value(ia);
    Mat<T> d = Mat<T>::Zero(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) d(r, arg[static_cast<std::size_t>(r)]) = up(r, 0);
    gr.accumulate(ia, d);
  });
}

// Dot product of every row of a with the single row b: (r x c), (1 x c) -> (r x 1).
// Each entry is an explicit left-to-right loop, so a row's result does not
// depend on its position in a.
template <class T>
Var<T> row_dots(Var<T> a, Var<T> b) {
  auto &g = detail::same_graph(a, b);
  detail::require(b.rows() == 1 && a.cols() == b.cols(), "row_dots: shape mismatch");
  const std::size_t ia = a.id, ib = b.id;
  const Mat<T> &x = a.value();
  const Mat<T> &y = b.value();
  Mat<T> out(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T acc = T(0);
    for (Eigen::Index c = 0; c < x.cols(); ++c) acc += x(r, c) * y(0, c);
    out(r, 0) = acc;
  }
  return g.push(std::move(out), g.requires_grad(a) || g.requires_grad(b), [ia, ib](Graph<T> &gr, std::size_t self) {
    const Mat<T> &up = gr.upstream(self);
    const Mat<T> &x = gr.value(ia);
    const Mat<T> &y = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Mat<T> d = up * y;
      gr.accumulate(ia, d);
    }
    if (gr.requires_grad(ib)) {
      Mat<T> d = up.transpose() * x;
      gr.accumulate(ib, d);
    }
  });
}

template <class T>
Var<T> slice_rows(Var<T> a, Eigen::Index begin, Eigen::Index count) {
  auto &g = *a.graph;
  detail::require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows: out of range");
  const std::size_t ia = a.id;
  Mat<T> out = a.value().middleRows(begin, count);
  return g.push(std::move(out), g.requires_grad(a), [ia, begin, count](Graph<T> &gr, std::size_t self) {
    const Mat<T> &x = gr.value(ia);
    Mat<T> d = Mat<T>::Zero(x.rows(), x.cols());
    d.middleRows(begin, count) = gr.upstream(self);
    gr.accumulate(ia, d);
  });
}

template <class T>
Var<T> vstack(std::span<const Var<T>> parts) {
  detail::require(!parts.empty(), "vstack: no inputs");
  auto &g = *parts.front().graph;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool needs = false;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  for (const auto &p : parts) {
    detail::require(p.graph == &g, "vstack: operands belong to different graphs");
    detail::require(p.cols() == cols, "vstack: column mismatch");
    ids.push_back(p.id);
    offsets.push_back(rows);
    rows += p.rows();
    needs = needs || g.requires_grad(p);
  }
  Mat<T> out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  return g.push(std::move(out), needs, [ids, offsets](Graph<T> &gr, std::size_t self) {
    const Mat<T> &up = gr.upstream(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.requires_grad(ids[i])) continue;
      gr.accumulate(ids[i], up.middleRows(offsets[i], gr.value(ids[i]).rows()));
    }
  });
}

template <class T>
Var<T> vstack(std::initializer_list<Var<T>> parts) {
  return vstack(std::span<const Var<T>>(parts.begin(), parts.size()));
}

template <class T>
Var<T> hstack(std::span<const Var<T>> parts) {
  detail::require(!parts.empty(), "hstack: no inputs");
  std::vector<Var<T>> columns;
  columns.reserve(parts.size());
  for (const auto &p : parts) columns.push_back(transpose(p));
  return transpose(vstack(std::span<const Var<T>>(columns)));
}

// Mean over rows of -log softmax(logits)[label], with row-max subtraction.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  auto &g = *logits.graph;
  const Mat<T> &z = logits.value();
  detail::require(static_cast<std::size_t>(z.rows()) == labels.size() && z.rows() > 0, "cross_entropy: label count");
  const std::size_t il = logits.id;
  Mat<T> probs(z.rows(), z.cols());
  T total = T(0);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const auto label = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]);
    detail::require(label < z.cols(), "cross_entropy: label out of range");
    const T m = z.row(r).maxCoeff();
    T s = T(0);
    for (Eigen::Index c = 0; c < z.cols(); ++c) s += std::exp(z(r, c) - m);
    total += std::log(s) - (z(r, label) - m);
    for (Eigen::Index c = 0; c < z.cols(); ++c) probs(r, c) = std::exp(z(r, c) - m) / s;
  }
  const T inv = T(1) / static_cast<T>(z.rows());
  Mat<T> out(1, 1);
  out(0, 0) = total * inv;
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return g.push(std::move(out), g.requires_grad(logits), [il, probs, lab, inv](Graph<T> &gr, std::size_t self) {
    Mat<T> d = probs;
    for (std::size_t r = 0; r < lab.size(); ++r) d(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(lab[r])) -= T(1);
    gr.accumulate(il, d * (inv * gr.upstream(self)(0, 0)));
  });
}

}  // namespace sap::ad
