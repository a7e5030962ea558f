#include "rds/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "rds/errors.hpp"

namespace rds {

bool all_finite(const Vector& v) { return v.allFinite(); }
bool all_finite(const Matrix& m) { return m.allFinite(); }

Vector softmax(const Vector& v) {
  if (v.size() == 0) {
    throw std::invalid_argument("softmax: empty input");
  }
  if (!v.allFinite()) {
    throw std::invalid_argument("softmax: non-finite input");
  }
  const double max_value = v.maxCoeff();
  Vector out(v.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - max_value);
    total += out[i];
  }
  out /= total;
  return out;
}

TopK top_k(const Vector& v, std::size_t k) {
  const auto n = static_cast<std::size_t>(v.size());
  if (k < 1 || k > n) {
    throw std::invalid_argument("top_k: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(n) + "]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto by_value_then_index = [&v](std::size_t a, std::size_t b) {
    const double va = v[static_cast<Eigen::Index>(a)];
    const double vb = v[static_cast<Eigen::Index>(b)];
    if (va != vb) return va > vb;
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    by_value_then_index);
  TopK out;
  out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  out.values.resize(static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    out.values[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(out.indices[i])];
  }
  return out;
}

PcaBasis pca_fit(const Matrix& rows, std::size_t m) {
  const auto n = static_cast<std::size_t>(rows.rows());
  const auto d = static_cast<std::size_t>(rows.cols());
  if (n < 2) {
    throw std::invalid_argument("pca_fit: need at least two rows");
  }
  if (m < 1 || m > std::min(n, d)) {
    throw std::invalid_argument("pca_fit: component count " + std::to_string(m) +
                                " outside [1, min(n, d)]");
  }
  if (!rows.allFinite()) {
    throw std::invalid_argument("pca_fit: non-finite input");
  }

  PcaBasis basis;
  basis.mean = rows.colwise().mean().transpose();
  const Matrix centered = rows.rowwise() - basis.mean.transpose();
  if (centered.cwiseAbs().maxCoeff() == 0.0) {
    throw DegenerateDataError("pca_fit: all rows identical");
  }
  const Eigen::MatrixXd covariance =
      (centered.transpose() * centered) / static_cast<double>(n - 1);

  // Eigenvalues come back ascending.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(covariance);
  if (solver.info() != Eigen::Success) {
    throw DegenerateDataError("pca_fit: eigendecomposition failed");
  }
  const Eigen::MatrixXd& vectors = solver.eigenvectors();
  basis.components.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
  for (std::size_t j = 0; j < m; ++j) {
    Vector column = vectors.col(static_cast<Eigen::Index>(d - 1 - j));
    column.normalize();
    for (Eigen::Index i = 0; i < column.size(); ++i) {
      if (std::abs(column[i]) > 1e-12) {
        if (column[i] < 0.0) column = -column;
        break;
      }
    }
    basis.components.col(static_cast<Eigen::Index>(j)) = column;
  }
  return basis;
}

Vector pca_project(const Vector& h, const Vector& mean, const Matrix& components) {
  if (h.size() != mean.size() || h.size() != components.rows()) {
    throw std::invalid_argument("pca_project: dimension mismatch (h=" + std::to_string(h.size()) +
                                ", u=" + std::to_string(mean.size()) +
                                ", V rows=" + std::to_string(components.rows()) + ")");
  }
  const Vector centered = h - mean;
  Vector out(components.cols());
  for (Eigen::Index j = 0; j < components.cols(); ++j) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < centered.size(); ++i) acc += components(i, j) * centered[i];
    out[j] = acc;
  }
  return out;
}

Matrix pca_project_rows(const Matrix& rows, const Vector& mean, const Matrix& components) {
  Matrix out(rows.rows(), components.cols());
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    out.row(r) = pca_project(rows.row(r).transpose(), mean, components).transpose();
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

void check_targets(const Vector& yhat, const Vector& y, const char* who) {
  if (yhat.size() != y.size()) {
    throw std::invalid_argument(std::string(who) + ": length mismatch");
  }
  if (y.size() == 0) {
    throw std::invalid_argument(std::string(who) + ": empty input");
  }
}

}  // namespace

double bce_loss(const Vector& yhat, const Vector& y) {
  check_targets(yhat, y, "bce_loss");
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double p = std::clamp(yhat[i], kProbClamp, 1.0 - kProbClamp);
    total += y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  return -total / static_cast<double>(y.size());
}

Vector bce_grad(const Vector& yhat, const Vector& y) {
  check_targets(yhat, y, "bce_grad");
  return (yhat - y) / static_cast<double>(y.size());
}

LogisticGradient logistic_loss_and_grad(const Matrix& features, const Vector& labels,
                                        const Vector& weights, double bias) {
  if (features.rows() != labels.size() || features.cols() != weights.size()) {
    throw std::invalid_argument("logistic_loss_and_grad: dimension mismatch");
  }
  Vector probs(labels.size());
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    probs[i] = sigmoid(features.row(i).dot(weights) + bias);
  }
  const Vector dlogit = bce_grad(probs, labels);
  LogisticGradient out;
  out.loss = bce_loss(probs, labels);
  out.weights = features.transpose() * dlogit;
  out.bias = dlogit.sum();
  return out;
}

}  // namespace rds
