#pragma once

// Batched (row-wise) kernels shared by the training paths. Internal to rds_core.

#include <cmath>

#include "rds/toymodel.hpp"

namespace rds::detail {

// Row-wise layer norm over a T x d batch, keeping what the backward pass needs.
struct NormCache {
  Matrix normalized;  // x_hat
  Vector rstd;
};

inline Matrix layer_norm_rows(const Matrix& x, const LayerNormWeights& ln, NormCache& cache) {
  const Eigen::Index rows = x.rows();
  cache.normalized.resize(rows, x.cols());
  cache.rstd.resize(rows);
  Matrix y(rows, x.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[r] = rstd;
    cache.normalized.row(r) = (x.row(r).array() - mean) * rstd;
    y.row(r) = cache.normalized.row(r).array() * ln.gain.transpose().array() +
               ln.bias.transpose().array();
  }
  return y;
}

inline Matrix layer_norm_rows_backward(const Matrix& dy, const LayerNormWeights& ln,
                                const NormCache& cache, LayerNormWeights& grad) {
  grad.gain += (dy.array() * cache.normalized.array()).colwise().sum().transpose().matrix();
  grad.bias += dy.colwise().sum().transpose();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Eigen::RowVectorXd dxhat = dy.row(r).array() * ln.gain.transpose().array();
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = (dxhat.array() * cache.normalized.row(r).array()).mean();
    dx.row(r) = cache.rstd[r] * (dxhat.array() - mean_dxhat -
                                 cache.normalized.row(r).array() * mean_dxhat_xhat);
  }
  return dx;
}

}  // namespace rds::detail
