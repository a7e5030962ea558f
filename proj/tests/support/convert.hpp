#pragma once

#include <vector>

#include "oracles.hpp"
#include "rds/numcore.hpp"

inline oracle::Grid to_grid(const rds::Matrix& m) {
  oracle::Grid g(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) g[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return g;
}

inline rds::Matrix to_matrix(const oracle::Grid& g) {
  rds::Matrix m(static_cast<Eigen::Index>(g.size()), g.empty() ? 0 : static_cast<Eigen::Index>(g[0].size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = g[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

inline std::vector<double> to_std(const rds::Vector& v) { return {v.data(), v.data() + v.size()}; }

inline rds::Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const rds::Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}
