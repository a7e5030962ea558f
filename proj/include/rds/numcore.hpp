#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

namespace rds {

// Internal compute is 64-bit throughout; persistence narrows to 32-bit.
using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

bool all_finite(const Vector& v);
bool all_finite(const Matrix& m);

/// Numerically stable softmax (max-subtracted). Throws on empty or non-finite input.
Vector softmax(const Vector& v);

struct TopK {
  std::vector<std::size_t> indices;
  Vector values;
};

/// The k largest entries in descending order; equal values keep the lower index first.
TopK top_k(const Vector& v, std::size_t k);

/// Mean and leading principal axes of a set of row vectors.
///
/// `components` is d x m with unit-norm, mutually orthogonal columns ordered by
/// descending eigenvalue of the (n-1)-normalized sample covariance. Each column
/// is oriented so that its first nonzero coordinate is positive.
struct PcaBasis {
  Vector mean;
  Matrix components;
};

PcaBasis pca_fit(const Matrix& rows, std::size_t m);

/// components^T (h - mean)
Vector pca_project(const Vector& h, const Vector& mean, const Matrix& components);

/// Row-wise pca_project for a batch (n x d -> n x m).
Matrix pca_project_rows(const Matrix& rows, const Vector& mean, const Matrix& components);

double sigmoid(double x);

inline constexpr double kProbClamp = 1e-12;

/// Mean binary cross-entropy over probabilities `yhat` (clamped to
/// [kProbClamp, 1 - kProbClamp]) against 0/1 targets.
double bce_loss(const Vector& yhat, const Vector& y);

/// d(bce_loss)/d(logit_i) = (yhat_i - y_i) / n, where yhat = sigmoid(logit).
Vector bce_grad(const Vector& yhat, const Vector& y);

/// Loss and parameter gradients of a logistic model sigmoid(X w + b) under bce_loss.
struct LogisticGradient {
  double loss = 0.0;
  Vector weights;
  double bias = 0.0;
};

LogisticGradient logistic_loss_and_grad(const Matrix& features, const Vector& labels,
                                        const Vector& weights, double bias);

}  // namespace rds
