#pragma once

#include <Eigen/Dense>

namespace mevs {

struct QuadRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
  int size() const { return static_cast<int>(nodes.size()); }
};

// Gauss-Hermite rule for integral f(t) exp(-t^2) dt (physicists' weight),
// computed by Golub-Welsch. Weights sum to sqrt(pi).
QuadRule gauss_hermite(int n);

// Gauss-Legendre rule on [-1,1]; weights sum to 2.
QuadRule gauss_legendre(int n);

// Rule for E[f(T)] with T ~ N(mean, sd^2): nodes mean + sqrt(2)*sd*t,
// weights normalized to sum to 1. sd = 0 degenerates to a single node.
QuadRule normal_expectation_rule(double mean, double sd, int n);

}  // namespace mevs
