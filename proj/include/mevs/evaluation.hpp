#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "mevs/model.hpp"
#include "mevs/rng.hpp"
#include "mevs/solver.hpp"

namespace mevs {

// One fresh covariate draw from a simulation design: latent x, surrogate w,
// error-free covariates and the true theta(zs) (0 for parametric designs).
struct DesignDraw {
  double x = 0.0;
  double w = 0.0;
  Eigen::RowVectorXd z;
  double zs = 0.0;     // smoothing covariate (semiparametric designs)
  double theta = 0.0;  // true theta(zs); 0 for parametric designs
};
using DesignSampler = std::function<DesignDraw(Rng&)>;

// C = E[(dmu/deta at theta + beta0'V)^2 V V'] by Monte Carlo with fresh
// draws; V uses W in place of X when use_w is set.
Eigen::MatrixXd estimate_C(const DesignSampler& sampler,
                           const DesignSpec& design, Family family,
                           const Eigen::VectorXd& beta0, long n_mc,
                           std::uint64_t seed, bool use_w);

// Disk cache: CSV with a comment header recording design name, seed, n_mc.
Eigen::MatrixXd load_or_estimate_C(const std::string& cache_dir,
                                   const std::string& design_name,
                                   const DesignSampler& sampler,
                                   const DesignSpec& design, Family family,
                                   const Eigen::VectorXd& beta0, long n_mc,
                                   std::uint64_t seed, bool use_w);

struct ErrorMetricContext {
  Eigen::MatrixXd c_x;
  Eigen::MatrixXd c_w;
  Eigen::VectorXd beta0;
  std::vector<int> true_zeros;
};

// AME = (beta_hat - beta0)' C (beta_hat - beta0)
double ame(const Eigen::VectorXd& beta_hat, const ErrorMetricContext& ctx,
           bool use_w);

// ame(selected)/ame(full); +infinity when the full-model AME is zero.
double rame(const FitResult& selected, const FitResult& full,
            const ErrorMetricContext& ctx, bool use_w);

// (C, E): correctly and erroneously zeroed coefficient counts.
std::pair<double, double> count_zeros(const FitResult& fit,
                                      const std::vector<int>& true_zeros);

}  // namespace mevs
