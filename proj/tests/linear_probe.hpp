#pragma once

#include <Eigen/Dense>

#include <vector>

namespace ule::testing {

/// Multinomial logistic regression without intercept, fitted by full-batch
/// gradient descent with Adam steps. Independent of the library's autodiff.
/// Returns the training accuracy of the fitted probe.
inline double fit_linear_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels, int classes,
                               int iterations = 2000, double lr = 0.1) {
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, classes);
  Eigen::MatrixXd m = w, v = w;
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  for (int t = 1; t <= iterations; ++t) {
    Eigen::MatrixXd z = features * w;
    z = z.colwise() - z.rowwise().maxCoeff();
    Eigen::MatrixXd p = z.array().exp().matrix();
    p = p.array().colwise() / p.rowwise().sum().array();
    const Eigen::MatrixXd g = features.transpose() * (p - y) / static_cast<double>(n);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
    w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + 1e-8);
  }
  const Eigen::MatrixXd scores = features * w;
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best;
    scores.row(i).maxCoeff(&best);
    hits += best == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace ule::testing
