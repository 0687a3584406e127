#include "mevs/kernel.hpp"

#include <cmath>

#include "mevs/errors.hpp"

namespace mevs {

namespace {
// Base kernels on [-1,1] with int K0 = 1.
double base_kernel(KernelFamily family, double u) {
  const double v = 1.0 - u * u;
  if (v <= 0.0) return 0.0;
  switch (family) {
    case KernelFamily::Quartic:
      return 15.0 / 16.0 * v * v;
    case KernelFamily::EpanechnikovSmooth:
      return 0.75 * v;
  }
  return 0.0;
}

// int u^2 K0(u) du on [-1,1]
double base_second_moment(KernelFamily family) {
  switch (family) {
    case KernelFamily::Quartic:
      return 1.0 / 7.0;
    case KernelFamily::EpanechnikovSmooth:
      return 1.0 / 5.0;
  }
  return 0.0;
}
}  // namespace

KernelSpec::KernelSpec(KernelFamily family, double bandwidth)
    : family_(family), h_(bandwidth) {
  if (h_ <= 0.0) throw ConfigError("kernel bandwidth must be > 0");
  scale_ = std::sqrt(base_second_moment(family_));
  support_ = 1.0 / scale_;
}

double KernelSpec::k(double t) const {
  return scale_ * base_kernel(family_, scale_ * t);
}

KernelFamily KernelSpec::parse_family(const std::string& name) {
  if (name == "quartic") return KernelFamily::Quartic;
  if (name == "epanechnikov" || name == "epanechnikov-smooth")
    return KernelFamily::EpanechnikovSmooth;
  throw ConfigError("unknown kernel family: " + name);
}

double default_bandwidth(const Eigen::VectorXd& z) {
  const long n = z.size();
  if (n < 2) throw ConfigError("default_bandwidth needs n >= 2");
  const double mean = z.mean();
  const double var = (z.array() - mean).square().sum() / (n - 1);
  return 1.2 * std::sqrt(var) * std::pow(static_cast<double>(n), -1.0 / 3.0);
}

}  // namespace mevs
