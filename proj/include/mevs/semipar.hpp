#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "mevs/kernel.hpp"
#include "mevs/model.hpp"
#include "mevs/penalty.hpp"
#include "mevs/score.hpp"
#include "mevs/solver.hpp"

namespace mevs {

// Semiparametric model: the augmented parametric model carries the beta
// terms first and the m theta terms last (theta replaced by a local
// parameter alpha at each smoothing point). Theta terms must not involve x.
struct SemiparModel {
  MEModelSpec augmented;
  int n_beta = 0;
  int m = 1;
  KernelSpec kernel;

  int d() const { return n_beta; }
  void validate() const;
};

// Convenience builder: base design over (x, s) plus a single local-intercept
// theta term (m = 1).
SemiparModel make_semipar_model(const MEModelSpec& base, KernelSpec kernel);

struct ThetaProfile {
  Eigen::MatrixXd theta;   // n x m profiled values
  Eigen::VectorXd h_used;  // per-target bandwidth after boundary fallback
};

// Split the augmented efficient score into (L, Psi): Psi is the last m
// components.
std::pair<Eigen::VectorXd, Eigen::VectorXd> partition_score(
    const Eigen::VectorXd& full_score, int m);

struct SemiparOptions {
  EngineOptions engine;
  double psi_spacing = 0.12;   // per-observation eta-mesh spacing
  double theta_pad = 0.75;     // mesh padding around the theta window
  double local_tol = 1e-9;     // local Newton residual target (forwarded)
  int local_max_iter = 60;
  int max_h_doublings = 3;     // boundary fallback
  bool fd_theta_sensitivity = false;  // finite-difference re-profiling for
                                      // every Jacobian column (slow path)
};

struct ProfileFitResult {
  FitResult fit;             // beta-level result (d coordinates)
  ThetaProfile profile;
  Eigen::MatrixXd dtheta_dbeta;  // n x (m*d), row-major blocks per obs
};

// Kernel-weighted local estimating equation at one target point.
Eigen::VectorXd local_theta_solve(const SemiparModel& model,
                                  const Dataset& data,
                                  const Eigen::VectorXd& beta, double z_target,
                                  const SemiparOptions& opts = {},
                                  const Eigen::VectorXd& theta_init = {});

// Alternating profile / LQA-Newton solve of the penalized semiparametric
// estimating equation. lambda = 0 gives the unpenalized fit.
ProfileFitResult profile_fit(const SemiparModel& model, const Dataset& data,
                             double lambda, const PenaltySpec& penalty,
                             const SolverConfig& config = {},
                             const SemiparOptions& opts = {},
                             const Eigen::VectorXd& beta_init = {});

// Sandwich (1/n)(A - Sigma_lambda)^-1 B (A - Sigma_lambda)^-T with
// A = E[L_Ibeta + L_Itheta theta_beta] and B = cov[L_I - U_I(Z) Psi],
// U_I(Z) = E(L_Itheta|Z) Omega^-1(Z), Omega(Z) = E(Psi_theta|Z) estimated by
// kernel regression at the fitted values.
Eigen::MatrixXd semipar_sandwich(const ProfileFitResult& result,
                                 const SemiparModel& model,
                                 const Dataset& data,
                                 const SemiparOptions& opts = {});

// Profiled per-observation L scores at (beta, theta_hat) - n x d.
Eigen::MatrixXd profiled_scores(const SemiparModel& model, const Dataset& data,
                                const Eigen::VectorXd& beta,
                                const ThetaProfile& profile,
                                const SemiparOptions& opts = {});

}  // namespace mevs
