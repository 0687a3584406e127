#pragma once

#include <Eigen/Dense>
#include <set>
#include <vector>

#include "mevs/model.hpp"
#include "mevs/penalty.hpp"
#include "mevs/score.hpp"

namespace mevs {

struct SolverConfig {
  double tol = 1e-6;          // infinity-norm step tolerance
  int max_iter = 100;
  double zero_threshold_scale = 1e-6;  // threshold = scale * max(1,|beta0|_inf)
  double ridge = 0.0;                  // Newton-matrix ridge, escalated on demand
  int max_halvings = 10;
  int max_restarts = 5;                // random restarts of the unpenalized solve
  std::uint64_t restart_seed = 0x9E3779B9;
  std::set<int> unpenalized_mask;      // coordinates kept out of the penalty
  EngineOptions engine;
};

struct FitResult {
  Eigen::VectorXd beta;          // inactive coordinates are exact zeros
  std::vector<int> active_set;   // indices with beta != 0
  Eigen::MatrixXd cov;           // d1 x d1 sandwich on the active set (may be empty)
  double lambda = 0.0;
  PenaltySpec penalty;           // penalty used (lambda 0 for unpenalized fits)
  std::set<int> unpenalized_mask;
  int iterations = 0;
  bool converged = false;
  bool empty_model = false;
  std::vector<double> trace;     // per-iteration |step|_inf
  double residual_inf = 0.0;     // |mean score - penalty gradient|_inf on active
  double zero_threshold = 0.0;

  int d1() const { return static_cast<int>(active_set.size()); }
};

// Naive initializer: fit the main model treating W as X (IRLS / least squares).
Eigen::VectorXd naive_fit(const MEModelSpec& model, const Dataset& data);

// Newton iteration on sum_i S*_eff(., beta) = 0. beta_init empty -> naive fit.
FitResult solve_unpenalized(const MEModelSpec& model, const Dataset& data,
                            const SolverConfig& config = {},
                            const Eigen::VectorXd& beta_init = {},
                            EffScoreEngine* engine = nullptr);

// LQA Newton on the penalized equations; starts from the unpenalized
// estimate (computed internally when beta_init is empty). Coordinates whose
// magnitude falls below the zero threshold are set to exact 0 and excluded
// for the rest of the solve.
FitResult solve_penalized(const MEModelSpec& model, const Dataset& data,
                          double lambda, const PenaltySpec& penalty,
                          const SolverConfig& config = {},
                          const Eigen::VectorXd& beta_init = {},
                          EffScoreEngine* engine = nullptr);

// cov(beta_I) = (1/n) (E - Sigma_lambda)^-1 F (E - Sigma_lambda)^-T on the
// active set, with E the sample score Jacobian, F the sample second moment
// and Sigma_lambda the LQA diagonal. Throws SingularBread.
Eigen::MatrixXd sandwich_cov(const FitResult& fit, const MEModelSpec& model,
                             const Dataset& data,
                             EffScoreEngine* engine = nullptr);

// Shared helper: linear solve with ridge escalation on the diagonal.
Eigen::MatrixXd solve_with_ridge(const Eigen::MatrixXd& a,
                                 const Eigen::MatrixXd& b, double base_ridge,
                                 const char* what);

}  // namespace mevs
