#pragma once

#include <Eigen/Dense>
#include <optional>
#include <set>

namespace mevs {

enum class PenaltyFamily { SCAD, L1 };

// SCAD derivative: p'(g) = lambda*{ I(|g|<=lambda)
//   + (a*lambda-|g|)_+ / ((a-1)*lambda) * I(|g|>lambda) } * sign(g);
// L1 derivative: lambda * sign(g).
struct PenaltySpec {
  PenaltyFamily family = PenaltyFamily::SCAD;
  double lambda = 0.0;
  double a = 3.7;  // SCAD shape, a > 2

  static PenaltySpec scad(double lambda, double a = 3.7);
  static PenaltySpec l1(double lambda);
};

double penalty_prime(double gamma, const PenaltySpec& spec);

// Componentwise penalty_prime; indices in unpenalized_mask get exactly 0.
Eigen::VectorXd penalty_gradient(const Eigen::VectorXd& beta,
                                 const PenaltySpec& spec,
                                 const std::set<int>& unpenalized_mask = {});

// Local quadratic approximation weight p'(|b|)/|b|. Empty when |b| falls
// below zero_threshold: the coordinate is to be set to 0 and its covariate
// excluded from the model (ZERO_LOCK).
std::optional<double> lqa_weight(double beta_j, const PenaltySpec& spec,
                                 double zero_threshold);

}  // namespace mevs
