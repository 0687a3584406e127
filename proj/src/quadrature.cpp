#include "mevs/quadrature.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include "mevs/errors.hpp"

namespace mevs {

namespace {

// Golub-Welsch: nodes are eigenvalues of the Jacobi matrix, weights are
// mu0 * (first eigenvector component)^2.
QuadRule golub_welsch(const Eigen::VectorXd& offdiag, double mu0) {
  const int n = static_cast<int>(offdiag.size()) + 1;
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < n - 1; ++k) {
    jacobi(k, k + 1) = offdiag(k);
    jacobi(k + 1, k) = offdiag(k);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);
  QuadRule rule;
  rule.nodes = es.eigenvalues();
  rule.weights.resize(n);
  for (int k = 0; k < n; ++k) {
    const double v0 = es.eigenvectors()(0, k);
    rule.weights(k) = mu0 * v0 * v0;
  }
  return rule;
}

std::mutex cache_mutex;
std::map<int, QuadRule> hermite_cache;
std::map<int, QuadRule> legendre_cache;

}  // namespace

QuadRule gauss_hermite(int n) {
  if (n < 1) throw ConfigError("gauss_hermite needs n >= 1");
  {
    std::lock_guard<std::mutex> lock(cache_mutex);
    auto it = hermite_cache.find(n);
    if (it != hermite_cache.end()) return it->second;
  }
  QuadRule rule;
  if (n == 1) {
    rule.nodes = Eigen::VectorXd::Zero(1);
    rule.weights = Eigen::VectorXd::Constant(1, std::sqrt(M_PI));
  } else {
    Eigen::VectorXd off(n - 1);
    for (int k = 1; k < n; ++k) off(k - 1) = std::sqrt(k / 2.0);
    rule = golub_welsch(off, std::sqrt(M_PI));
  }
  std::lock_guard<std::mutex> lock(cache_mutex);
  hermite_cache[n] = rule;
  return rule;
}

QuadRule gauss_legendre(int n) {
  if (n < 1) throw ConfigError("gauss_legendre needs n >= 1");
  {
    std::lock_guard<std::mutex> lock(cache_mutex);
    auto it = legendre_cache.find(n);
    if (it != legendre_cache.end()) return it->second;
  }
  QuadRule rule;
  if (n == 1) {
    rule.nodes = Eigen::VectorXd::Zero(1);
    rule.weights = Eigen::VectorXd::Constant(1, 2.0);
  } else {
    Eigen::VectorXd off(n - 1);
    for (int k = 1; k < n; ++k) off(k - 1) = k / std::sqrt(4.0 * k * k - 1.0);
    rule = golub_welsch(off, 2.0);
  }
  std::lock_guard<std::mutex> lock(cache_mutex);
  legendre_cache[n] = rule;
  return rule;
}

QuadRule normal_expectation_rule(double mean, double sd, int n) {
  if (sd < 0.0) throw ConfigError("normal_expectation_rule needs sd >= 0");
  QuadRule rule;
  if (sd == 0.0) {
    rule.nodes = Eigen::VectorXd::Constant(1, mean);
    rule.weights = Eigen::VectorXd::Constant(1, 1.0);
    return rule;
  }
  const QuadRule gh = gauss_hermite(n);
  rule.nodes = (gh.nodes.array() * (std::sqrt(2.0) * sd) + mean).matrix();
  rule.weights = gh.weights / std::sqrt(M_PI);
  return rule;
}

}  // namespace mevs
