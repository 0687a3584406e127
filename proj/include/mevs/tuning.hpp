#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "mevs/model.hpp"
#include "mevs/solver.hpp"

namespace mevs {

enum class Criterion { EE, GCV, BIC };
Criterion parse_criterion(const std::string& name);
const char* criterion_name(Criterion c);

struct TuneEntry {
  double lambda = 0.0;
  FitResult fit;
  double df = 0.0;
  double deviance = 0.0;
  double gcv = 0.0;
  double bic = 0.0;
  bool scored = false;  // converged and scorable
};

struct TuningTrace {
  std::vector<TuneEntry> entries;
  int argmin_gcv = -1;
  int argmin_bic = -1;
  std::vector<std::string> warnings;

  double lambda_for(Criterion c) const;
  const TuneEntry& entry_for(Criterion c) const;
};

// mu_hat with W substituted for X in the design ("ignoring the measurement
// error effect"); offsets adds the profiled theta-hat in semiparametric fits.
Eigen::VectorXd fitted_means(const Eigen::VectorXd& beta,
                             const MEModelSpec& model, const Dataset& data,
                             const Eigen::VectorXd& offsets = {});

// df_lambda = trace{ I (I + Sigma_lambda)^-1 }, I = V'QV on the active set.
double effective_df(const FitResult& fit, const MEModelSpec& model,
                    const Dataset& data, const Eigen::VectorXd& offsets = {});

// Binary deviance with the 0*log0 convention and mu clamped to
// [1e-10, 1-1e-10]; -2 x gaussian log-likelihood for the gaussian family.
double deviance(const FitResult& fit, const MEModelSpec& model,
                const Dataset& data, const Eigen::VectorXd& offsets = {});
double deviance_of_means(const Eigen::VectorXd& mu, const Eigen::VectorXd& y,
                         Family family, double dispersion);

double gcv_from(double dev, double df, long n);  // D / {n (1 - df/n)^2}
double bic_from(double dev, double df, long n);  // D + 2 log(n) df

double gcv_score(const FitResult& fit, const MEModelSpec& model,
                 const Dataset& data, const Eigen::VectorXd& offsets = {});
double bic_score(const FitResult& fit, const MEModelSpec& model,
                 const Dataset& data, const Eigen::VectorXd& offsets = {});

// 40 log-spaced points in [1e-3, 1] * max|beta_unpenalized|
Eigen::VectorXd default_lambda_grid(double max_abs_beta, int points = 40,
                                    double lo_frac = 1e-3);

// Generic grid search: fit(lambda) produces the fit, offsets(fit) the
// profiled additive terms (empty for parametric models). Non-converged fits
// are excluded from the argmins with a warning; AllFitsFailed if none scores.
TuningTrace select_lambda_generic(
    const MEModelSpec& model, const Dataset& data,
    const Eigen::VectorXd& grid,
    const std::function<FitResult(double)>& fit,
    const std::function<Eigen::VectorXd(const FitResult&)>& offsets = {});

// Parametric path: every lambda refit from the unpenalized estimate.
TuningTrace select_lambda(const MEModelSpec& model, const Dataset& data,
                          const Eigen::VectorXd& grid,
                          const PenaltySpec& penalty,
                          const SolverConfig& config = {},
                          EffScoreEngine* engine = nullptr,
                          const Eigen::VectorXd& beta_unpen = {});

// Trace CSV (columns lambda, df, deviance, gcv, bic, n_active, converged).
std::string trace_to_csv(const TuningTrace& trace);

}  // namespace mevs
