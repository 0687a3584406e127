#include "mevs/solver.hpp"

#include <cmath>
#include <limits>

#include "mevs/errors.hpp"
#include "mevs/rng.hpp"

namespace mevs {

namespace {

Eigen::VectorXd subset(const Eigen::VectorXd& v, const std::vector<int>& idx) {
  Eigen::VectorXd out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out(i) = v(idx[i]);
  return out;
}

Eigen::MatrixXd subset_rows(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd out(idx.size(), m.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(i) = m.row(idx[i]);
  return out;
}

}  // namespace

Eigen::MatrixXd solve_with_ridge(const Eigen::MatrixXd& a,
                                 const Eigen::MatrixXd& b, double base_ridge,
                                 const char* what) {
  const int n = static_cast<int>(a.rows());
  const double scale = std::max(a.cwiseAbs().trace() / n, 1e-300);
  for (double delta : {base_ridge, 1e-10, 1e-8, 1e-6, 1e-4}) {
    Eigen::MatrixXd m = a;
    // keep the ridge sign-consistent with the diagonal (Newton matrices here
    // are negative definite)
    if (delta > 0.0) {
      const double sign = a.trace() >= 0.0 ? 1.0 : -1.0;
      m.diagonal().array() += sign * delta * scale;
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
    const Eigen::MatrixXd x = lu.solve(b);
    if (!x.allFinite()) continue;
    if ((m * x - b).cwiseAbs().maxCoeff() <=
        1e-6 * std::max(1.0, b.cwiseAbs().maxCoeff()))
      return x;
  }
  throw SingularBread(std::string("linear solve failed in ") + what);
}

Eigen::VectorXd naive_fit(const MEModelSpec& model, const Dataset& data) {
  const int d = model.design.dim();
  const long n = data.n();
  Eigen::MatrixXd v(n, d);
  for (long i = 0; i < n; ++i)
    v.row(i) = model.design.design_vector(data.w(i), data.z.row(i)).transpose();

  if (model.family == Family::GaussianLinear) {
    return (v.transpose() * v)
        .ldlt()
        .solve(v.transpose() * data.y);
  }

  // logistic IRLS with a floor on the working weights
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
  for (int iter = 0; iter < 50; ++iter) {
    Eigen::VectorXd mu(n), wts(n);
    for (long i = 0; i < n; ++i) {
      const double eta = v.row(i) * beta;
      mu(i) = sigmoid(eta);
      wts(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-10);
    }
    const Eigen::MatrixXd h = v.transpose() * wts.asDiagonal() * v;
    const Eigen::VectorXd g = v.transpose() * (data.y - mu);
    Eigen::MatrixXd hr = h;
    hr.diagonal().array() += 1e-10 * std::max(1.0, h.trace() / d);
    const Eigen::VectorXd step = hr.ldlt().solve(g);
    beta += step;
    if (step.cwiseAbs().maxCoeff() < 1e-10) break;
    if (beta.cwiseAbs().maxCoeff() > 50.0) break;  // separation guard
  }
  return beta;
}

namespace {

struct NewtonOutcome {
  FitResult fit;
};

// One Newton/LQA solve. penalize=false reproduces the unpenalized equations.
FitResult newton_solve(EffScoreEngine& engine, const MEModelSpec& model,
                       double lambda, const PenaltySpec& penalty,
                       const SolverConfig& config,
                       const Eigen::VectorXd& beta_init, bool penalize) {
  const int d = engine.dim();
  FitResult fit;
  fit.lambda = penalize ? lambda : 0.0;
  fit.penalty = penalty;
  fit.penalty.lambda = fit.lambda;
  fit.unpenalized_mask = config.unpenalized_mask;
  fit.zero_threshold =
      config.zero_threshold_scale *
      std::max(1.0, beta_init.cwiseAbs().maxCoeff());

  Eigen::VectorXd beta = beta_init;
  std::vector<bool> locked(d, false);

  auto active_of = [&]() {
    std::vector<int> act;
    for (int j = 0; j < d; ++j)
      if (!locked[j]) act.push_back(j);
    return act;
  };

  auto pen_residual = [&](const Eigen::VectorXd& b,
                          const std::vector<int>& act) {
    Eigen::VectorXd phi = engine.mean_score(b);
    if (penalize)
      phi -= penalty_gradient(b, fit.penalty, config.unpenalized_mask);
    return subset(phi, act);
  };

  double best_norm = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_beta = beta;

  for (int iter = 1; iter <= config.max_iter; ++iter) {
    fit.iterations = iter;

    if (penalize) {
      // LQA zero lock: coordinates too close to zero leave the model
      for (int j = 0; j < d; ++j) {
        if (locked[j] || config.unpenalized_mask.count(j)) continue;
        if (!lqa_weight(beta(j), fit.penalty, fit.zero_threshold)) {
          locked[j] = true;
          beta(j) = 0.0;
        }
      }
    }
    std::vector<int> act = active_of();
    if (act.empty()) {
      fit.empty_model = true;
      fit.converged = true;
      break;
    }

    const Eigen::VectorXd phi = engine.mean_score(beta);
    const Eigen::MatrixXd jac_cols = engine.jacobian_cols(beta, act);
    Eigen::MatrixXd jac = subset_rows(jac_cols, act);

    Eigen::VectorXd resid = subset(phi, act);
    if (penalize) {
      for (size_t i = 0; i < act.size(); ++i) {
        const int j = act[i];
        if (config.unpenalized_mask.count(j)) continue;
        const auto wgt = lqa_weight(beta(j), fit.penalty, fit.zero_threshold);
        const double sig = wgt ? *wgt : 0.0;
        jac(i, i) -= sig;
        resid(i) -= sig * beta(j);
      }
    }

    const Eigen::VectorXd delta =
        solve_with_ridge(jac, Eigen::MatrixXd(-resid), config.ridge,
                         "newton step");

    // step halving on the exact penalized estimating-function norm
    const double f0 = pen_residual(beta, act).cwiseAbs().maxCoeff();
    double scale = 1.0;
    Eigen::VectorXd cand = beta;
    double fnew = 0.0;
    for (int h = 0; h <= config.max_halvings; ++h) {
      cand = beta;
      for (size_t i = 0; i < act.size(); ++i) cand(act[i]) += scale * delta(i);
      fnew = pen_residual(cand, act).cwiseAbs().maxCoeff();
      if (fnew < f0 || !std::isfinite(f0)) break;
      scale *= 0.5;
    }
    const double step_norm = (scale * delta).cwiseAbs().maxCoeff();
    fit.trace.push_back(step_norm);
    beta = cand;

    if (fnew < best_norm) {
      best_norm = fnew;
      best_beta = beta;
    }

    if (step_norm < config.tol) {
      // re-check the zero lock so the reported active set is final
      if (penalize) {
        for (int j = 0; j < d; ++j) {
          if (locked[j] || config.unpenalized_mask.count(j)) continue;
          if (!lqa_weight(beta(j), fit.penalty, fit.zero_threshold)) {
            locked[j] = true;
            beta(j) = 0.0;
          }
        }
      }
      act = active_of();
      fit.converged = true;
      fit.residual_inf =
          act.empty() ? 0.0 : pen_residual(beta, act).cwiseAbs().maxCoeff();
      if (act.empty()) fit.empty_model = true;
      break;
    }
  }

  if (!fit.converged && !fit.empty_model) {
    beta = best_beta;
    std::vector<int> act = active_of();
    fit.residual_inf =
        act.empty() ? 0.0 : pen_residual(beta, act).cwiseAbs().maxCoeff();
  }

  fit.beta = beta;
  fit.active_set.clear();
  for (int j = 0; j < d; ++j)
    if (beta(j) != 0.0) fit.active_set.push_back(j);
  return fit;
}

}  // namespace

FitResult solve_unpenalized(const MEModelSpec& model, const Dataset& data,
                            const SolverConfig& config,
                            const Eigen::VectorXd& beta_init,
                            EffScoreEngine* engine) {
  std::unique_ptr<EffScoreEngine> own;
  if (!engine) {
    own = std::make_unique<EffScoreEngine>(model, data, config.engine);
    engine = own.get();
  }
  Eigen::VectorXd init =
      beta_init.size() ? beta_init : naive_fit(model, data);
  PenaltySpec none = PenaltySpec::scad(0.0);
  FitResult fit =
      newton_solve(*engine, model, 0.0, none, config, init, false);
  // random restarts around the initializer when Newton stalls
  Rng rng(config.restart_seed);
  for (int r = 0; r < config.max_restarts && !fit.converged; ++r) {
    Eigen::VectorXd jitter(init.size());
    for (int j = 0; j < init.size(); ++j) jitter(j) = rng.normal(0.0, 0.25);
    FitResult retry =
        newton_solve(*engine, model, 0.0, none, config, init + jitter, false);
    if (retry.converged || retry.residual_inf < fit.residual_inf) fit = retry;
  }
  return fit;
}

FitResult solve_penalized(const MEModelSpec& model, const Dataset& data,
                          double lambda, const PenaltySpec& penalty,
                          const SolverConfig& config,
                          const Eigen::VectorXd& beta_init,
                          EffScoreEngine* engine) {
  std::unique_ptr<EffScoreEngine> own;
  if (!engine) {
    own = std::make_unique<EffScoreEngine>(model, data, config.engine);
    engine = own.get();
  }
  Eigen::VectorXd init = beta_init;
  if (!init.size())
    init = solve_unpenalized(model, data, config, {}, engine).beta;
  return newton_solve(*engine, model, lambda, penalty, config, init, true);
}

Eigen::MatrixXd sandwich_cov(const FitResult& fit, const MEModelSpec& model,
                             const Dataset& data, EffScoreEngine* engine) {
  if (!fit.converged) throw Error("sandwich_cov needs a converged fit");
  if (fit.active_set.empty()) throw Error("sandwich_cov: empty active set");
  std::unique_ptr<EffScoreEngine> own;
  if (!engine) {
    own = std::make_unique<EffScoreEngine>(model, data);
    engine = own.get();
  }
  const auto& act = fit.active_set;
  const int d1 = fit.d1();
  const long n = data.n();

  Eigen::MatrixXd e = subset_rows(engine->jacobian_cols(fit.beta, act), act);
  const Eigen::MatrixXd scores = engine->scores(fit.beta);
  Eigen::MatrixXd s_act(n, d1);
  for (int i = 0; i < d1; ++i) s_act.col(i) = scores.col(act[i]);
  const Eigen::MatrixXd f = s_act.transpose() * s_act / static_cast<double>(n);

  for (int i = 0; i < d1; ++i) {
    const int j = act[i];
    if (fit.unpenalized_mask.count(j) || fit.lambda == 0.0) continue;
    e(i, i) -= penalty_prime(std::fabs(fit.beta(j)), fit.penalty) /
               std::fabs(fit.beta(j));
  }

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(e);
  const Eigen::MatrixXd inv = lu.solve(Eigen::MatrixXd::Identity(d1, d1));
  if (!inv.allFinite() ||
      (e * inv - Eigen::MatrixXd::Identity(d1, d1)).cwiseAbs().maxCoeff() > 1e-6)
    throw SingularBread("(E - Sigma_lambda) not invertible");

  Eigen::MatrixXd cov = inv * f * inv.transpose() / static_cast<double>(n);
  cov = 0.5 * (cov + cov.transpose().eval());
  return cov;
}

}  // namespace mevs
