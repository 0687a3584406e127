#include "mevs/score.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mevs/errors.hpp"

namespace mevs {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double gaussian_log_density(double r, double sd) {
  const double t = r / sd;
  return -0.5 * t * t - std::log(sd) - 0.5 * std::log(2.0 * M_PI);
}

// log P(W=w | X=x) for a discrete error model; -inf when w is not an atom
double discrete_error_log_density(const DiscreteErrorModel& de, double w,
                                  double x) {
  for (int k = 0; k < de.atoms.size(); ++k) {
    if (std::fabs(w - de.atoms(k)) <= 1e-9 * std::max(1.0, std::fabs(de.atoms(k)))) {
      const double p = de.prob(x, k);
      return p > 0.0 ? std::log(p) : kNegInf;
    }
  }
  return kNegInf;
}

}  // namespace

XGrid build_x_grid(const PositedModel& posited, int g) {
  XGrid grid;
  if (const auto* gp = std::get_if<GaussianPosited>(&posited)) {
    const QuadRule rule = normal_expectation_rule(gp->mean, gp->sd, g);
    grid.nodes = rule.nodes;
    grid.weights = rule.weights;
  } else {
    const auto& dp = std::get<DiscretePosited>(posited);
    grid.nodes = dp.atoms;
    grid.weights = dp.mass;
  }
  return grid;
}

Eigen::MatrixXd AFunction::full_values(
    const DesignSpec& design,
    const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
  Eigen::MatrixXd out(grid_values_b.rows(), design.dim());
  for (int g = 0; g < grid_values_b.rows(); ++g)
    out.row(g) = design.lift(grid_values_b.row(g).transpose(), z).transpose();
  return out;
}

ScoreCore::ScoreCore(const MEModelSpec& model)
    : model_(model),
      grid_(build_x_grid(model.posited, model.quad.x_grid_size)) {
  model_.validate();
  if (const auto* gp = std::get_if<GaussianPosited>(&model_.posited)) {
    continuous_posited_ = true;
    const double half = model_.quad.a_rep_halfwidth * gp->sd;
    const double spacing = model_.quad.a_rep_spacing * gp->sd;
    const int r = std::max(4, static_cast<int>(std::round(2.0 * half / spacing)) + 1);
    interp_basis_ = std::make_unique<SplineBasis>(
        Eigen::VectorXd::LinSpaced(r, gp->mean - half, gp->mean + half));
    const double chalf = model_.quad.a_colloc_halfwidth * gp->sd;
    const double cspace = model_.quad.a_colloc_spacing * gp->sd;
    const int rows =
        std::max(r, static_cast<int>(std::round(2.0 * chalf / cspace)) + 1);
    colloc_nodes_ = Eigen::VectorXd::LinSpaced(rows, gp->mean - chalf,
                                               gp->mean + chalf);
    colloc_weights_.resize(rows);
    for (int j = 0; j < rows; ++j) {
      const double t = (colloc_nodes_(j) - gp->mean) / gp->sd;
      colloc_weights_(j) = std::exp(-0.5 * t * t);
    }
    colloc_weights_ /= colloc_weights_.sum();
  } else {
    interp_basis_ = std::make_unique<SplineBasis>(grid_.nodes);
    colloc_nodes_ = grid_.nodes;
    colloc_weights_ = grid_.weights;
  }
  const int rows = static_cast<int>(colloc_nodes_.size());
  outer_rules_.reserve(rows);
  if (const auto* ge = std::get_if<GaussianErrorModel>(&model_.error)) {
    for (int j = 0; j < rows; ++j)
      outer_rules_.push_back(normal_expectation_rule(
          colloc_nodes_(j), ge->sigma_u, model_.quad.w_quad_size));
    if (const auto* gp = std::get_if<GaussianPosited>(&model_.posited)) {
      if (ge->sigma_u > 0.0) {
        product_rule_ = true;
        const double s2 = gp->sd * gp->sd + ge->sigma_u * ge->sigma_u;
        marg_sd_ = std::sqrt(s2);
        post_slope_ = gp->sd * gp->sd / s2;
        post_sd_ = gp->sd * ge->sigma_u / marg_sd_;
        inner_gh_ = gauss_hermite(model_.quad.inner_size);
      }
    }
  } else {
    const auto& de = std::get<DiscreteErrorModel>(model_.error);
    for (int j = 0; j < rows; ++j) {
      QuadRule rule;
      rule.nodes = de.atoms;
      rule.weights.resize(de.atoms.size());
      for (int k = 0; k < de.atoms.size(); ++k)
        rule.weights(k) = de.prob(colloc_nodes_(j), k);
      outer_rules_.push_back(std::move(rule));
    }
  }
  build_skeleton();
}

void ScoreCore::build_skeleton() {
  skel_points_.clear();
  skel_outer_.clear();
  skel_row_offset_.clear();
  const int rows = static_cast<int>(colloc_nodes_.size());
  for (int j = 0; j < rows; ++j) {
    skel_row_offset_.push_back(static_cast<int>(skel_outer_.size()));
    const QuadRule& w_rule = outer_rules_[j];
    for (int l = 0; l < w_rule.size(); ++l) {
      SkelOuter outer{w_rule.weights(l), static_cast<int>(skel_points_.size()), 0};
      if (outer.weight > 0.0) {
        const InnerRule rule = inner_rule(w_rule.nodes(l));
        for (int k = 0; k < rule.xi.size(); ++k) {
          if (rule.log_alpha(k) == kNegInf) continue;
          skel_points_.push_back(
              {rule.xi(k), rule.log_alpha(k), interp_basis_->coef(rule.xi(k))});
        }
        outer.count = static_cast<int>(skel_points_.size()) - outer.offset;
      }
      skel_outer_.push_back(outer);
    }
  }
}

double ScoreCore::eta_at(const Eigen::VectorXd& c, double x) {
  double eta = c(c.size() - 1);
  for (int p = static_cast<int>(c.size()) - 2; p >= 0; --p)
    eta = eta * x + c(p);
  return eta;
}

ScoreCore::InnerRule ScoreCore::inner_rule(double w) const {
  InnerRule rule;
  if (const auto* gp = std::get_if<GaussianPosited>(&model_.posited)) {
    const auto* ge = std::get_if<GaussianErrorModel>(&model_.error);
    if (product_rule_) {
      // p_W(w|x) p*(x) = N(w; mu*, s) x N(x; m(w), c_post): Gauss-Hermite in x
      const int k = inner_gh_.size();
      const double m_w = gp->mean + post_slope_ * (w - gp->mean);
      const double log_marg = gaussian_log_density(w - gp->mean, marg_sd_);
      rule.xi = (inner_gh_.nodes.array() * (std::sqrt(2.0) * post_sd_) + m_w).matrix();
      rule.log_alpha.resize(k);
      for (int i = 0; i < k; ++i)
        rule.log_alpha(i) =
            std::log(inner_gh_.weights(i)) - 0.5 * std::log(M_PI) + log_marg;
      return rule;
    }
    if (ge && ge->sigma_u == 0.0) {
      // no measurement error: the posited posterior degenerates at x = w
      rule.xi = Eigen::VectorXd::Constant(1, w);
      rule.log_alpha =
          Eigen::VectorXd::Constant(1, gaussian_log_density(w - gp->mean, gp->sd));
      return rule;
    }
    // generic fallback: posited-measure grid with error-density weights
    const auto& de = std::get<DiscreteErrorModel>(model_.error);
    rule.xi = grid_.nodes;
    rule.log_alpha.resize(grid_size());
    for (int j = 0; j < grid_size(); ++j)
      rule.log_alpha(j) = std::log(grid_.weights(j)) +
                          discrete_error_log_density(de, w, grid_.nodes(j));
    return rule;
  }
  const auto& dp = std::get<DiscretePosited>(model_.posited);
  rule.xi = dp.atoms;
  rule.log_alpha.resize(dp.atoms.size());
  for (int k = 0; k < dp.atoms.size(); ++k) {
    double log_pw;
    if (const auto* ge = std::get_if<GaussianErrorModel>(&model_.error)) {
      log_pw = ge->sigma_u > 0.0
                   ? gaussian_log_density(w - dp.atoms(k), ge->sigma_u)
                   : (w == dp.atoms(k) ? 0.0 : kNegInf);
    } else {
      log_pw = discrete_error_log_density(std::get<DiscreteErrorModel>(model_.error),
                                          w, dp.atoms(k));
    }
    rule.log_alpha(k) = std::log(dp.mass(k)) + log_pw;
  }
  return rule;
}

namespace {

// Posterior weights pi_k over inner nodes at one (w,y); false when the
// observed-data likelihood underflows entirely.
bool posterior_weights(const ScoreCore::InnerRule& rule,
                       const Eigen::VectorXd& log_py, Eigen::VectorXd& pi) {
  const int k = static_cast<int>(rule.xi.size());
  pi.resize(k);
  double max_log = kNegInf;
  for (int i = 0; i < k; ++i) {
    pi(i) = rule.log_alpha(i) + log_py(i);
    max_log = std::max(max_log, pi(i));
  }
  if (max_log == kNegInf) return false;
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    pi(i) = std::exp(pi(i) - max_log);
    sum += pi(i);
  }
  pi /= sum;
  return true;
}

}  // namespace

Eigen::VectorXd ScoreCore::eff_b(double w, double y, const Eigen::VectorXd& c,
                                 const Eigen::Ref<const Eigen::MatrixXd>& a_values,
                                 const Eigen::Ref<const Eigen::MatrixXd>& a_xsig,
                                 long obs_idx) const {
  const InnerRule rule = inner_rule(w);
  const int k = static_cast<int>(rule.xi.size());
  const int nq = q();
  Eigen::VectorXd log_py(k);
  for (int i = 0; i < k; ++i)
    log_py(i) = family_log_density(model_.family, y, eta_at(c, rule.xi(i)),
                                   model_.dispersion);
  Eigen::VectorXd pi;
  if (!posterior_weights(rule, log_py, pi))
    throw DegenerateLikelihood(obs_idx, "posited-likelihood underflow");

  const bool have_a = a_values.size() > 0;
  const int r = rep_size();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(nq);
  for (int i = 0; i < k; ++i) {
    if (pi(i) == 0.0) continue;
    const double xi = rule.xi(i);
    const double rho =
        family_residual(model_.family, y, eta_at(c, xi), model_.dispersion);
    double xp = 1.0;
    for (int p = 0; p < nq; ++p) {
      out(p) += pi(i) * rho * xp;
      xp *= xi;
    }
    if (have_a) {
      const auto cf = interp_basis_->coef(xi);
      if (r == 1) {
        out -= pi(i) * a_values.row(0).transpose();
      } else {
        out -= pi(i) * (cf.a * a_values.row(cf.i) + cf.b * a_values.row(cf.i + 1) +
                        cf.ca * a_xsig.row(cf.i) + cf.cb * a_xsig.row(cf.i + 1))
                           .transpose();
      }
    }
  }
  return out;
}

Eigen::VectorXd ScoreCore::purported_b(double w, double y,
                                       const Eigen::VectorXd& c,
                                       long obs_idx) const {
  return eff_b(w, y, c, Eigen::MatrixXd(), Eigen::MatrixXd(), obs_idx);
}

ScoreCore::ObsRule ScoreCore::make_obs_rule(double w) const {
  const InnerRule rule = inner_rule(w);
  ObsRule out;
  out.xi = rule.xi;
  out.log_alpha = rule.log_alpha;
  out.coef.reserve(rule.xi.size());
  for (int k = 0; k < rule.xi.size(); ++k)
    out.coef.push_back(interp_basis_->coef(rule.xi(k)));
  return out;
}

Eigen::VectorXd ScoreCore::eff_b_cached(
    const ObsRule& rule, double y, const Eigen::VectorXd& c,
    const Eigen::Ref<const Eigen::MatrixXd>& a_values,
    const Eigen::Ref<const Eigen::MatrixXd>& a_xsig, long obs_idx) const {
  const int k = static_cast<int>(rule.xi.size());
  const int nq = q();
  const bool have_a = a_values.size() > 0;
  const int r = rep_size();

  double max_log = kNegInf;
  static thread_local std::vector<double> logt, etas;
  logt.resize(k);
  etas.resize(k);
  for (int i = 0; i < k; ++i) {
    etas[i] = eta_at(c, rule.xi(i));
    logt[i] = rule.log_alpha(i) +
              family_log_density(model_.family, y, etas[i], model_.dispersion);
    max_log = std::max(max_log, logt[i]);
  }
  if (max_log == kNegInf)
    throw DegenerateLikelihood(obs_idx, "posited-likelihood underflow");
  double denom = 0.0;
  for (int i = 0; i < k; ++i) {
    logt[i] = std::exp(logt[i] - max_log);
    denom += logt[i];
  }

  Eigen::VectorXd out = Eigen::VectorXd::Zero(nq);
  for (int i = 0; i < k; ++i) {
    const double pi = logt[i] / denom;
    if (pi == 0.0) continue;
    const double rho =
        family_residual(model_.family, y, etas[i], model_.dispersion);
    double xp = 1.0;
    for (int p = 0; p < nq; ++p) {
      out(p) += pi * rho * xp;
      xp *= rule.xi(i);
    }
    if (have_a) {
      const auto& cf = rule.coef[i];
      if (r == 1) {
        out -= pi * a_values.row(0).transpose();
      } else {
        out -= pi * (cf.a * a_values.row(cf.i) + cf.b * a_values.row(cf.i + 1) +
                     cf.ca * a_xsig.row(cf.i) + cf.cb * a_xsig.row(cf.i + 1))
                        .transpose();
      }
    }
  }
  return out;
}

AFunction ScoreCore::solve_a(const Eigen::VectorXd& c) const {
  const int g = grid_size();
  const int rows = static_cast<int>(colloc_nodes_.size());
  const int r = rep_size();
  const int nq = q();
  Eigen::MatrixXd m_sparse = Eigen::MatrixXd::Zero(rows, r);
  Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(rows, r);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(rows, nq);

  std::vector<double> eta_buf, logt_buf;
  for (int j = 0; j < rows; ++j) {
    const double eta_j = eta_at(c, colloc_nodes_(j));
    const QuadRule y_rule = family_y_rule(model_.family, eta_j,
                                          model_.dispersion,
                                          model_.quad.y_quad_size);
    const QuadRule& w_rule = outer_rules_[j];
    const int row_off = skel_row_offset_[j];
    for (int l = 0; l < w_rule.size(); ++l) {
      const SkelOuter& outer = skel_outer_[row_off + l];
      if (outer.weight <= 0.0 || outer.count == 0) continue;
      const SkelPoint* pts = skel_points_.data() + outer.offset;
      const int k = outer.count;
      eta_buf.resize(k);
      logt_buf.resize(k);
      for (int i = 0; i < k; ++i) eta_buf[i] = eta_at(c, pts[i].xi);
      for (int m = 0; m < y_rule.size(); ++m) {
        const double wt = outer.weight * y_rule.weights(m);
        if (wt < 1e-15) continue;
        const double y = y_rule.nodes(m);
        double max_log = kNegInf;
        for (int i = 0; i < k; ++i) {
          logt_buf[i] = pts[i].log_alpha +
                        family_log_density(model_.family, y, eta_buf[i],
                                           model_.dispersion);
          max_log = std::max(max_log, logt_buf[i]);
        }
        if (max_log == kNegInf) continue;
        double denom = 0.0;
        for (int i = 0; i < k; ++i) {
          logt_buf[i] = std::exp(logt_buf[i] - max_log);
          denom += logt_buf[i];
        }
        for (int i = 0; i < k; ++i) {
          const double wp = wt * logt_buf[i] / denom;
          if (wp < 1e-17) continue;
          const double rho =
              family_residual(model_.family, y, eta_buf[i], model_.dispersion);
          double xp = 1.0;
          for (int p = 0; p < nq; ++p) {
            rhs(j, p) += wp * rho * xp;
            xp *= pts[i].xi;
          }
          const auto& cf = pts[i].coef;
          m_sparse(j, cf.i) += wp * cf.a;
          gamma(j, cf.i) += wp * cf.ca;
          if (r > 1) {
            m_sparse(j, cf.i + 1) += wp * cf.b;
            gamma(j, cf.i + 1) += wp * cf.cb;
          }
        }
      }
    }
  }

  const Eigen::MatrixXd kernel =
      m_sparse + gamma * interp_basis_->value_to_second();
  const double rhs_scale = std::max(rhs.cwiseAbs().maxCoeff(), 1e-300);

  // Discrete posited models: square collocation solve on the atoms with
  // ridge escalation. Continuous models: the fixed-knot representation is
  // fit by posited-mass-weighted least squares over the collocation rows,
  // the quadrature form of the projection min int (Ta - r)^2 dmu*.
  Eigen::MatrixXd lhs, target;
  double base_ridge;
  if (continuous_posited_) {
    lhs = kernel.transpose() * colloc_weights_.asDiagonal() * kernel;
    target = kernel.transpose() * colloc_weights_.asDiagonal() * rhs;
    base_ridge = model_.quad.a_ridge;
  } else {
    lhs = kernel;
    target = rhs;
    base_ridge = 0.0;
  }
  const double target_scale = std::max(target.cwiseAbs().maxCoeff(), 1e-300);

  double cond_estimate = 0.0;
  const double deltas[4] = {base_ridge, std::max(1e-10, 100.0 * base_ridge),
                            std::max(1e-8, 1e4 * base_ridge),
                            std::max(1e-6, 1e6 * base_ridge)};
  for (double delta : deltas) {
    Eigen::MatrixXd solve_mat = lhs;
    if (delta > 0.0)
      solve_mat.diagonal().array() += delta * lhs.trace() / r;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(solve_mat);
    const Eigen::MatrixXd a = lu.solve(target);
    if (!a.allFinite()) continue;
    const double resid = (solve_mat * a - target).cwiseAbs().maxCoeff();
    const Eigen::VectorXd udiag = lu.matrixLU().diagonal().cwiseAbs();
    cond_estimate = udiag.maxCoeff() / std::max(udiag.minCoeff(), 1e-300);
    if (resid <= 1e-8 * target_scale) {
      AFunction out;
      out.c = c;
      out.values_b = a;
      out.xsig_b.resizeLike(a);
      for (int p = 0; p < nq; ++p)
        out.xsig_b.col(p) = interp_basis_->second_derivs(a.col(p));
      out.ridge_delta = delta;
      out.residual_rel = resid / target_scale;
      out.collocation_mismatch =
          (kernel * a - rhs).cwiseAbs().maxCoeff() / rhs_scale;
      out.grid_values_b.resize(g, nq);
      for (int j = 0; j < g; ++j) {
        const auto cf = interp_basis_->coef(grid_.nodes(j));
        if (r == 1) {
          out.grid_values_b.row(j) = a.row(0);
        } else {
          out.grid_values_b.row(j) =
              cf.a * a.row(cf.i) + cf.b * a.row(cf.i + 1) +
              cf.ca * out.xsig_b.row(cf.i) + cf.cb * out.xsig_b.row(cf.i + 1);
        }
      }
      return out;
    }
  }
  throw SingularKernel(cond_estimate,
                       "integral-equation kernel not solvable to tolerance");
}

// ---- OffsetTable ----

OffsetTable::OffsetTable(const ScoreCore& core, Eigen::VectorXd c_fixed,
                         int swept_power, double lo, double hi, double spacing,
                         int max_nodes)
    : core_(&core), c_fixed_(std::move(c_fixed)), swept_(swept_power) {
  if (hi < lo) std::swap(lo, hi);
  if (hi - lo < 1e-8) {  // degenerate range: widen so the cubic has room
    const double mid = 0.5 * (lo + hi);
    lo = mid - 1e-4;
    hi = mid + 1e-4;
  }
  int m = static_cast<int>(std::ceil((hi - lo) / spacing)) + 1;
  m = std::clamp(m, 4, max_nodes);
  lo_ = lo;
  hi_ = hi;
  Eigen::VectorXd nodes = Eigen::VectorXd::LinSpaced(m, lo, hi);

  const int r = core_->rep_size();
  const int nq = core_->q();
  val_.resize(r * nq, m);
  xsig_.resize(r * nq, m);
  Eigen::VectorXd c = c_fixed_;
  for (int i = 0; i < m; ++i) {
    c(swept_) = nodes(i);
    const AFunction a = core_->solve_a(c);
    val_.col(i) = Eigen::Map<const Eigen::VectorXd>(a.values_b.data(), r * nq);
    xsig_.col(i) = Eigen::Map<const Eigen::VectorXd>(a.xsig_b.data(), r * nq);
  }
  mesh_ = std::make_unique<SplineBasis>(nodes);
  val_eta_ = val_ * mesh_->value_to_second().transpose();
  xsig_eta_ = xsig_ * mesh_->value_to_second().transpose();
}

void OffsetTable::a_at(double eta, Scratch& scratch) const {
  const int r = core_->rep_size();
  const int nq = core_->q();
  const auto cf = mesh_->coef(eta);
  scratch.values.resize(r, nq);
  scratch.xsig.resize(r, nq);
  Eigen::Map<Eigen::VectorXd> v(scratch.values.data(), r * nq);
  Eigen::Map<Eigen::VectorXd> x(scratch.xsig.data(), r * nq);
  v = cf.a * val_.col(cf.i) + cf.b * val_.col(cf.i + 1) +
      cf.ca * val_eta_.col(cf.i) + cf.cb * val_eta_.col(cf.i + 1);
  x = cf.a * xsig_.col(cf.i) + cf.b * xsig_.col(cf.i + 1) +
      cf.ca * xsig_eta_.col(cf.i) + cf.cb * xsig_eta_.col(cf.i + 1);
}

Eigen::VectorXd OffsetTable::eff_b(double w, double y, double eta, long obs_idx,
                                   Scratch& scratch) const {
  a_at(eta, scratch);
  Eigen::VectorXd c = c_fixed_;
  c(swept_) = eta;
  return core_->eff_b(w, y, c, scratch.values, scratch.xsig, obs_idx);
}

Eigen::VectorXd OffsetTable::eff_b(const ScoreCore::ObsRule& rule, double y,
                                   double eta, long obs_idx,
                                   Scratch& scratch) const {
  a_at(eta, scratch);
  Eigen::VectorXd c = c_fixed_;
  c(swept_) = eta;
  return core_->eff_b_cached(rule, y, c, scratch.values, scratch.xsig, obs_idx);
}

// ---- spec-level operations ----

Eigen::VectorXd purported_score(const Observation& obs,
                                const Eigen::VectorXd& beta,
                                const MEModelSpec& model, long obs_idx) {
  ScoreCore core(model);
  const Eigen::VectorXd c = model.design.collapse(beta, obs.z);
  return model.design.lift(core.purported_b(obs.w, obs.y, c, obs_idx), obs.z);
}

AFunction solve_a_function(const Eigen::RowVectorXd& z,
                           const Eigen::VectorXd& beta,
                           const MEModelSpec& model) {
  ScoreCore core(model);
  return core.solve_a(model.design.collapse(beta, z));
}

Eigen::VectorXd eff_score(const Observation& obs, const Eigen::VectorXd& beta,
                          const MEModelSpec& model, const AFunction& a,
                          long obs_idx) {
  ScoreCore core(model);
  const Eigen::VectorXd c = model.design.collapse(beta, obs.z);
  return model.design.lift(core.eff_b(obs.w, obs.y, c, a, obs_idx), obs.z);
}

Eigen::MatrixXd eff_score_jacobian(const Dataset& data,
                                   const Eigen::VectorXd& beta,
                                   const MEModelSpec& model) {
  EffScoreEngine engine(model, data);
  return engine.jacobian(beta);
}

// ---- EffScoreEngine ----

EffScoreEngine::EffScoreEngine(const MEModelSpec& model, const Dataset& data,
                               EngineOptions opts)
    : model_(model), data_(data), opts_(opts), core_(model) {
  if (data_.n() < 1) throw ConfigError("empty dataset");
  if (data_.z.rows() != data_.n() || data_.y.size() != data_.n())
    throw ConfigError("dataset shape mismatch");

  // which b-powers vary across rows
  std::vector<bool> varies(model_.design.q(), false);
  for (const auto& term : model_.design.terms()) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (long i = 0; i < data_.n(); ++i) {
      const double m = term.z_monomial(data_.z.row(i));
      lo = std::min(lo, m);
      hi = std::max(hi, m);
    }
    if (hi - lo > 1e-12 * std::max(1.0, std::fabs(hi)))
      varies[term.x_pow] = true;
  }
  const int n_vary =
      static_cast<int>(std::count(varies.begin(), varies.end(), true));
  if (opts_.mode != EngineOptions::Mode::Auto) {
    mode_ = opts_.mode;
  } else if (n_vary == 0) {
    mode_ = EngineOptions::Mode::Single;
  } else if (n_vary == 1) {
    mode_ = EngineOptions::Mode::Table;
  } else {
    mode_ = EngineOptions::Mode::PerObs;
  }
  if (mode_ == EngineOptions::Mode::Table)
    swept_power_ = static_cast<int>(std::find(varies.begin(), varies.end(), true) -
                                    varies.begin());
  obs_rules_.reserve(data_.n());
  for (long i = 0; i < data_.n(); ++i)
    obs_rules_.push_back(core_.make_obs_rule(data_.w(i)));
}

const char* EffScoreEngine::mode_name() const {
  switch (mode_) {
    case EngineOptions::Mode::Single: return "single";
    case EngineOptions::Mode::Table: return "table";
    case EngineOptions::Mode::PerObs: return "per-obs";
    default: return "auto";
  }
}

Eigen::MatrixXd EffScoreEngine::collapse_all(const Eigen::VectorXd& beta) const {
  Eigen::MatrixXd c(data_.n(), model_.design.q());
  for (long i = 0; i < data_.n(); ++i)
    c.row(i) = model_.design.collapse(beta, data_.z.row(i)).transpose();
  return c;
}

void EffScoreEngine::ensure_table(const Eigen::VectorXd& beta) {
  const Eigen::MatrixXd c_all = collapse_all(beta);
  Eigen::VectorXd fixed = c_all.row(0).transpose();
  fixed(swept_power_) = 0.0;
  const double lo = c_all.col(swept_power_).minCoeff() - opts_.table_pad;
  const double hi = c_all.col(swept_power_).maxCoeff() + opts_.table_pad;
  const bool same_fixed = table_ && table_c_fixed_.size() == fixed.size() &&
                          (table_c_fixed_ - fixed).cwiseAbs().maxCoeff() == 0.0;
  if (same_fixed && table_->covers(lo) && table_->covers(hi)) return;
  const double table_lo = same_fixed ? std::min(lo, table_->lo()) : lo;
  const double table_hi = same_fixed ? std::max(hi, table_->hi()) : hi;
  table_ = std::make_unique<OffsetTable>(
      core_, fixed, swept_power_, table_lo, table_hi,
      opts_.table_spacing * table_spacing_mult_, opts_.max_table_nodes);
  table_c_fixed_ = fixed;
}

Eigen::MatrixXd EffScoreEngine::scores_at(const Eigen::VectorXd& beta) {
  const long n = data_.n();
  const int d = dim();
  Eigen::MatrixXd s(n, d);
  switch (mode_) {
    case EngineOptions::Mode::Single: {
      const Eigen::VectorXd c = model_.design.collapse(beta, data_.z.row(0));
      const AFunction a = core_.solve_a(c);
      for (long i = 0; i < n; ++i)
        s.row(i) = model_.design
                       .lift(core_.eff_b_cached(obs_rules_[i], data_.y(i), c,
                                                a.values_b, a.xsig_b, i),
                             data_.z.row(i))
                       .transpose();
      return s;
    }
    case EngineOptions::Mode::Table: {
      ensure_table(beta);
      const Eigen::MatrixXd c_all = collapse_all(beta);
      for (long i = 0; i < n; ++i)
        s.row(i) = model_.design
                       .lift(table_->eff_b(obs_rules_[i], data_.y(i),
                                           c_all(i, swept_power_), i, scratch_),
                             data_.z.row(i))
                       .transpose();
      return s;
    }
    default: {
      for (long i = 0; i < n; ++i) {
        const Eigen::VectorXd c = model_.design.collapse(beta, data_.z.row(i));
        const AFunction a = core_.solve_a(c);
        s.row(i) = model_.design
                       .lift(core_.eff_b_cached(obs_rules_[i], data_.y(i), c,
                                                a.values_b, a.xsig_b, i),
                             data_.z.row(i))
                       .transpose();
      }
      return s;
    }
  }
}

Eigen::MatrixXd EffScoreEngine::scores(const Eigen::VectorXd& beta) {
  return scores_at(beta);
}

Eigen::VectorXd EffScoreEngine::mean_score(const Eigen::VectorXd& beta) {
  return scores_at(beta).colwise().mean().transpose();
}

Eigen::MatrixXd EffScoreEngine::jacobian_cols(const Eigen::VectorXd& beta,
                                              const std::vector<int>& cols) {
  const double step_scale = std::cbrt(std::numeric_limits<double>::epsilon());
  Eigen::MatrixXd jac(dim(), cols.size());
  // offset-type directions reuse the cached table; do them while it is live
  std::vector<size_t> order(cols.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (mode_ == EngineOptions::Mode::Table) {
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b2) {
      const int pa = model_.design.terms()[cols[a]].x_pow;
      const int pb = model_.design.terms()[cols[b2]].x_pow;
      return (pa == swept_power_) > (pb == swept_power_);
    });
  }
  Eigen::VectorXd b = beta;
  for (size_t idx : order) {
    const int j = cols[idx];
    const bool structural =
        mode_ == EngineOptions::Mode::Table &&
        model_.design.terms()[j].x_pow != swept_power_;
    if (structural) table_spacing_mult_ = opts_.fd_table_factor;
    const double h = step_scale * std::max(1.0, std::fabs(beta(j)));
    b(j) = beta(j) + h;
    const Eigen::VectorXd up = mean_score(b);
    b(j) = beta(j) - h;
    const Eigen::VectorXd dn = mean_score(b);
    b(j) = beta(j);
    jac.col(idx) = (up - dn) / (2.0 * h);
    table_spacing_mult_ = 1.0;
  }
  return jac;
}

Eigen::MatrixXd EffScoreEngine::jacobian(const Eigen::VectorXd& beta) {
  std::vector<int> cols(dim());
  for (int j = 0; j < dim(); ++j) cols[j] = j;
  return jacobian_cols(beta, cols);
}

}  // namespace mevs
