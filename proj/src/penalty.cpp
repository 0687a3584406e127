#include "mevs/penalty.hpp"

#include <cmath>

#include "mevs/errors.hpp"

namespace mevs {

namespace {
void validate(const PenaltySpec& spec) {
  if (spec.lambda < 0.0) throw ConfigError("penalty lambda must be >= 0");
  if (spec.family == PenaltyFamily::SCAD && spec.a <= 2.0)
    throw ConfigError("SCAD shape a must be > 2");
}
}  // namespace

PenaltySpec PenaltySpec::scad(double lambda, double a) {
  PenaltySpec spec{PenaltyFamily::SCAD, lambda, a};
  validate(spec);
  return spec;
}

PenaltySpec PenaltySpec::l1(double lambda) {
  PenaltySpec spec{PenaltyFamily::L1, lambda, 3.7};
  validate(spec);
  return spec;
}

double penalty_prime(double gamma, const PenaltySpec& spec) {
  const double sgn = (gamma > 0.0) - (gamma < 0.0);
  if (sgn == 0.0 || spec.lambda == 0.0) return 0.0;
  const double g = std::fabs(gamma);
  if (spec.family == PenaltyFamily::L1) return spec.lambda * sgn;
  if (g <= spec.lambda) return spec.lambda * sgn;
  const double top = spec.a * spec.lambda - g;
  if (top <= 0.0) return 0.0;
  return top / (spec.a - 1.0) * sgn;
}

Eigen::VectorXd penalty_gradient(const Eigen::VectorXd& beta,
                                 const PenaltySpec& spec,
                                 const std::set<int>& unpenalized_mask) {
  Eigen::VectorXd grad(beta.size());
  for (int j = 0; j < beta.size(); ++j)
    grad(j) = unpenalized_mask.count(j) ? 0.0 : penalty_prime(beta(j), spec);
  return grad;
}

std::optional<double> lqa_weight(double beta_j, const PenaltySpec& spec,
                                 double zero_threshold) {
  if (zero_threshold <= 0.0) throw ConfigError("zero_threshold must be > 0");
  const double b = std::fabs(beta_j);
  if (b < zero_threshold) return std::nullopt;
  return penalty_prime(b, spec) / b;
}

}  // namespace mevs
