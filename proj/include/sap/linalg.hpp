#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace sap {

// Row-major dense matrix. Row vectors are 1 x n matrices throughout the
// library so that every feature, bias and score row shares one type.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatD = Mat<double>;

// A raw toy image: one row per patch, one column per patch channel.
using Image = MatD;

template <class To, class From>
Mat<To> cast(const Mat<From> &m) {
  return m.template cast<To>();
}

template <class T>
Mat<T> row_vector(std::initializer_list<T> values) {
  Mat<T> out(1, static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (T v : values) out(0, i++) = v;
  return out;
}

template <class T>
bool all_finite(const Mat<T> &m) {
  return m.allFinite();
}

inline nlohmann::json matrix_to_json(const MatD &m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatD matrix_from_json(const nlohmann::json &j) {
  if (!j.is_array()) throw std::runtime_error("matrix: expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.front().size());
  MatD m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto &row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw std::runtime_error("matrix: ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline nlohmann::json row_to_json(const MatD &m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m(i));
  return out;
}

inline MatD row_from_json(const nlohmann::json &j) {
  if (!j.is_array()) throw std::runtime_error("vector: expected an array");
  MatD m(1, static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return m;
}

}  // namespace sap
