#pragma once

#include <Eigen/Dense>
#include <string>

namespace mevs {

enum class KernelFamily { Quartic, EpanechnikovSmooth };

// Compactly supported symmetric kernel rescaled so that int K = 1,
// int t K = 0 and int t^2 K = 1.
class KernelSpec {
 public:
  KernelSpec(KernelFamily family, double bandwidth);

  double k(double t) const;               // rescaled kernel density
  double kh(double dz) const {            // K_h(dz) = K(dz/h)/h
    return k(dz / h_) / h_;
  }
  double support_radius() const { return support_; }   // in t units
  double window_radius() const { return support_ * h_; }
  double bandwidth() const { return h_; }
  KernelFamily family() const { return family_; }

  KernelSpec with_bandwidth(double h) const { return {family_, h}; }

  static KernelFamily parse_family(const std::string& name);

 private:
  KernelFamily family_;
  double h_;
  double scale_;    // K(t) = scale * K0(scale * t)
  double support_;  // 1/scale
};

// h = 1.2 * SD(z) * n^(-1/3); sits inside the n*h^4 -> 0, n*h^2 -> inf window.
double default_bandwidth(const Eigen::VectorXd& z);

}  // namespace mevs
