#include "mevs/tuning.hpp"

#include <cmath>
#include <sstream>

#include "mevs/csv.hpp"
#include "mevs/errors.hpp"
#include "mevs/penalty.hpp"

namespace mevs {

Criterion parse_criterion(const std::string& name) {
  if (name == "ee" || name == "EE") return Criterion::EE;
  if (name == "gcv" || name == "GCV") return Criterion::GCV;
  if (name == "bic" || name == "BIC") return Criterion::BIC;
  throw ConfigError("unknown criterion '" + name + "' (want ee, gcv or bic)");
}

const char* criterion_name(Criterion c) {
  switch (c) {
    case Criterion::EE: return "EE";
    case Criterion::GCV: return "GCV";
    default: return "BIC";
  }
}

double TuningTrace::lambda_for(Criterion c) const {
  return entry_for(c).lambda;
}

const TuneEntry& TuningTrace::entry_for(Criterion c) const {
  const int idx = c == Criterion::GCV ? argmin_gcv : argmin_bic;
  if (c == Criterion::EE || idx < 0)
    throw Error("tuning trace has no selection for this criterion");
  return entries[idx];
}

Eigen::VectorXd fitted_means(const Eigen::VectorXd& beta,
                             const MEModelSpec& model, const Dataset& data,
                             const Eigen::VectorXd& offsets) {
  const long n = data.n();
  Eigen::VectorXd mu(n);
  for (long i = 0; i < n; ++i) {
    double eta = model.design.design_vector(data.w(i), data.z.row(i))
                     .dot(beta);
    if (offsets.size()) eta += offsets(i);
    mu(i) = family_mean(model.family, eta);
  }
  return mu;
}

double effective_df(const FitResult& fit, const MEModelSpec& model,
                    const Dataset& data, const Eigen::VectorXd& offsets) {
  const auto& act = fit.active_set;
  if (act.empty()) return 0.0;
  const long n = data.n();
  const int d1 = fit.d1();

  const Eigen::VectorXd mu = fitted_means(fit.beta, model, data, offsets);
  Eigen::MatrixXd v(n, d1);
  for (long i = 0; i < n; ++i) {
    const Eigen::VectorXd row =
        model.design.design_vector(data.w(i), data.z.row(i));
    for (int c = 0; c < d1; ++c) v(i, c) = row(act[c]);
  }
  Eigen::VectorXd q(n);
  for (long i = 0; i < n; ++i)
    q(i) = model.family == Family::Logistic
               ? mu(i) * (1.0 - mu(i))
               : 1.0 / (model.dispersion * model.dispersion);

  const Eigen::MatrixXd info = v.transpose() * q.asDiagonal() * v;
  Eigen::MatrixXd shifted = info;
  for (int c = 0; c < d1; ++c) {
    const int j = act[c];
    if (fit.lambda == 0.0 || fit.unpenalized_mask.count(j)) continue;
    shifted(c, c) += penalty_prime(std::fabs(fit.beta(j)), fit.penalty) /
                     std::fabs(fit.beta(j));
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(shifted);
  const Eigen::MatrixXd x = lu.solve(info);
  if (!x.allFinite()) throw SingularInfo("df computation");
  return x.trace();
}

double deviance_of_means(const Eigen::VectorXd& mu, const Eigen::VectorXd& y,
                         Family family, double dispersion) {
  const long n = y.size();
  double dev = 0.0;
  if (family == Family::Logistic) {
    for (long i = 0; i < n; ++i) {
      const double m = std::min(std::max(mu(i), 1e-10), 1.0 - 1e-10);
      if (y(i) > 0.0) dev += 2.0 * y(i) * std::log(y(i) / m);
      if (y(i) < 1.0) dev += 2.0 * (1.0 - y(i)) * std::log((1.0 - y(i)) / (1.0 - m));
    }
    return dev;
  }
  for (long i = 0; i < n; ++i) {
    const double r = (y(i) - mu(i)) / dispersion;
    dev += r * r;
  }
  return dev + n * std::log(2.0 * M_PI * dispersion * dispersion);
}

double deviance(const FitResult& fit, const MEModelSpec& model,
                const Dataset& data, const Eigen::VectorXd& offsets) {
  return deviance_of_means(fitted_means(fit.beta, model, data, offsets),
                           data.y, model.family, model.dispersion);
}

double gcv_from(double dev, double df, long n) {
  if (df >= static_cast<double>(n)) throw DfSaturated("gcv");
  const double denom = 1.0 - df / static_cast<double>(n);
  return dev / (static_cast<double>(n) * denom * denom);
}

double bic_from(double dev, double df, long n) {
  if (df >= static_cast<double>(n)) throw DfSaturated("bic");
  return dev + 2.0 * std::log(static_cast<double>(n)) * df;
}

double gcv_score(const FitResult& fit, const MEModelSpec& model,
                 const Dataset& data, const Eigen::VectorXd& offsets) {
  return gcv_from(deviance(fit, model, data, offsets),
                  effective_df(fit, model, data, offsets), data.n());
}

double bic_score(const FitResult& fit, const MEModelSpec& model,
                 const Dataset& data, const Eigen::VectorXd& offsets) {
  return bic_from(deviance(fit, model, data, offsets),
                  effective_df(fit, model, data, offsets), data.n());
}

Eigen::VectorXd default_lambda_grid(double max_abs_beta, int points,
                                    double lo_frac) {
  if (points < 1) throw ConfigError("lambda grid needs >= 1 point");
  const double scale = std::max(max_abs_beta, 1e-8);
  Eigen::VectorXd grid(points);
  if (points == 1) {
    grid(0) = scale;
    return grid;
  }
  const double log_lo = std::log(lo_frac * scale);
  const double log_hi = std::log(scale);
  for (int i = 0; i < points; ++i)
    grid(i) = std::exp(log_lo + (log_hi - log_lo) * i / (points - 1));
  return grid;
}

TuningTrace select_lambda_generic(
    const MEModelSpec& model, const Dataset& data, const Eigen::VectorXd& grid,
    const std::function<FitResult(double)>& fit,
    const std::function<Eigen::VectorXd(const FitResult&)>& offsets) {
  if (grid.size() == 0) throw ConfigError("empty lambda grid");
  for (int i = 0; i + 1 < grid.size(); ++i)
    if (!(grid(i) < grid(i + 1)))
      throw ConfigError("lambda grid must be strictly increasing");

  TuningTrace trace;
  for (int i = 0; i < grid.size(); ++i) {
    TuneEntry entry;
    entry.lambda = grid(i);
    try {
      entry.fit = fit(grid(i));
      if (entry.fit.converged) {
        const Eigen::VectorXd off =
            offsets ? offsets(entry.fit) : Eigen::VectorXd();
        entry.df = effective_df(entry.fit, model, data, off);
        entry.deviance = deviance(entry.fit, model, data, off);
        entry.gcv = gcv_from(entry.deviance, entry.df, data.n());
        entry.bic = bic_from(entry.deviance, entry.df, data.n());
        entry.scored = std::isfinite(entry.gcv) && std::isfinite(entry.bic);
      }
      if (!entry.scored)
        trace.warnings.push_back("lambda=" + format_double(grid(i)) +
                                 " fit not converged; excluded from argmin");
    } catch (const Error& err) {
      trace.warnings.push_back("lambda=" + format_double(grid(i)) +
                               " failed: " + err.what());
    }
    trace.entries.push_back(std::move(entry));
  }

  for (size_t i = 0; i < trace.entries.size(); ++i) {
    const auto& entry = trace.entries[i];
    if (!entry.scored) continue;
    if (trace.argmin_gcv < 0 || entry.gcv < trace.entries[trace.argmin_gcv].gcv)
      trace.argmin_gcv = static_cast<int>(i);
    if (trace.argmin_bic < 0 || entry.bic < trace.entries[trace.argmin_bic].bic)
      trace.argmin_bic = static_cast<int>(i);
  }
  if (trace.argmin_gcv < 0 || trace.argmin_bic < 0)
    throw AllFitsFailed("lambda grid of size " + std::to_string(grid.size()));
  return trace;
}

TuningTrace select_lambda(const MEModelSpec& model, const Dataset& data,
                          const Eigen::VectorXd& grid,
                          const PenaltySpec& penalty,
                          const SolverConfig& config, EffScoreEngine* engine,
                          const Eigen::VectorXd& beta_unpen) {
  std::unique_ptr<EffScoreEngine> own;
  if (!engine) {
    own = std::make_unique<EffScoreEngine>(model, data, config.engine);
    engine = own.get();
  }
  Eigen::VectorXd init = beta_unpen;
  if (!init.size()) {
    const FitResult unpen = solve_unpenalized(model, data, config, {}, engine);
    if (!unpen.converged)
      throw AllFitsFailed("unpenalized estimate did not converge");
    init = unpen.beta;
  }
  return select_lambda_generic(
      model, data, grid,
      [&](double lambda) {
        return solve_penalized(model, data, lambda, penalty, config, init,
                               engine);
      });
}

std::string trace_to_csv(const TuningTrace& trace) {
  std::ostringstream out;
  out << "lambda,df,deviance,gcv,bic,n_active,converged\n";
  for (const auto& entry : trace.entries) {
    out << format_double(entry.lambda) << ',' << format_double(entry.df) << ','
        << format_double(entry.deviance) << ',' << format_double(entry.gcv)
        << ',' << format_double(entry.bic) << ',' << entry.fit.active_set.size()
        << ',' << (entry.fit.converged ? 1 : 0) << "\n";
  }
  return out.str();
}

}  // namespace mevs
