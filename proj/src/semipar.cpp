#include "mevs/semipar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "mevs/errors.hpp"

namespace mevs {

void SemiparModel::validate() const {
  augmented.validate();
  if (m < 1) throw ConfigError("semipar model needs m >= 1");
  if (n_beta < 1) throw ConfigError("semipar model needs beta terms");
  if (augmented.design.dim() != n_beta + m)
    throw ConfigError("augmented design must hold beta terms then theta terms");
  for (int r = 0; r < m; ++r)
    if (augmented.design.terms()[n_beta + r].x_pow != 0)
      throw ConfigError("theta terms must not involve the error-prone covariate");
}

SemiparModel make_semipar_model(const MEModelSpec& base, KernelSpec kernel) {
  SemiparModel sm{base, base.design.dim(), 1, kernel};
  std::vector<Term> terms = base.design.terms();
  terms.push_back({0, {}, "theta"});
  sm.augmented.design = DesignSpec(std::move(terms), base.design.n_z_cols());
  sm.validate();
  return sm;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> partition_score(
    const Eigen::VectorXd& full_score, int m) {
  if (m < 0 || m > full_score.size())
    throw ConfigError("partition_score: bad m");
  const long d = full_score.size() - m;
  return {full_score.head(d), full_score.tail(m)};
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Per-observation cubic tabulation of the collapsed efficient score along
// the linear-predictor offset, shared basis per node count.
struct ObsMesh {
  double eta0 = 0.0;
  const SplineBasis* basis = nullptr;
  Eigen::MatrixXd val;  // q x nodes
  Eigen::MatrixXd sig;  // q x nodes
};

// Work space for one (model, data) pair holding the current beta state.
class SemiparWork {
 public:
  SemiparWork(const SemiparModel& model, const Dataset& data,
              const SemiparOptions& opts)
      : sm_(model), data_(data), opts_(opts), core_(model.augmented) {
    sm_.validate();
    if (data_.zs.size() != data_.n())
      throw ConfigError("semipar data needs the scalar smoothing covariate");
    const auto& terms = sm_.augmented.design.terms();
    const int d = sm_.n_beta;
    const long n = data_.n();
    // u_j: theta-term monomials; offs0_j: beta-driven offset base filled by
    // set_beta; fast path needs constant monomials on every x power >= 1.
    u_.resize(n, sm_.m);
    for (long j = 0; j < n; ++j)
      for (int r = 0; r < sm_.m; ++r)
        u_(j, r) = terms[d + r].z_monomial(data_.z.row(j));
    fast_path_ = true;
    for (int t = 0; t < d; ++t) {
      if (terms[t].x_pow == 0) continue;
      double lo = kInf, hi = -kInf;
      for (long j = 0; j < n; ++j) {
        const double m0 = terms[t].z_monomial(data_.z.row(j));
        lo = std::min(lo, m0);
        hi = std::max(hi, m0);
      }
      if (hi - lo > 1e-12 * std::max(1.0, std::fabs(hi))) fast_path_ = false;
    }
    meshes_.resize(n);
    kernel_h_ = sm_.kernel.bandwidth();
    obs_rules_.reserve(n);
    for (long j = 0; j < n; ++j)
      obs_rules_.push_back(core_.make_obs_rule(data_.w(j)));
  }

  const ScoreCore& core() const { return core_; }
  long n() const { return data_.n(); }
  int d() const { return sm_.n_beta; }
  int m() const { return sm_.m; }
  int q() const { return sm_.augmented.design.q(); }

  void set_theta_window(double lo, double hi) {
    theta_lo_ = lo - opts_.theta_pad;
    theta_hi_ = hi + opts_.theta_pad;
  }

  // Rebuild offsets, the a-solve table and the per-observation meshes.
  void set_beta(const Eigen::VectorXd& beta) {
    beta_ = beta;
    Eigen::VectorXd aug = Eigen::VectorXd::Zero(d() + m());
    aug.head(d()) = beta;
    const long nn = n();
    offs0_.resize(nn);
    Eigen::VectorXd c0 = sm_.augmented.design.collapse(aug, data_.z.row(0));
    c_fixed_ = c0;
    c_fixed_(0) = 0.0;
    for (long j = 0; j < nn; ++j)
      offs0_(j) = sm_.augmented.design.collapse(aug, data_.z.row(j))(0);

    // window of eta values each observation can see during local solves
    double lo = kInf, hi = -kInf;
    for (long j = 0; j < nn; ++j) {
      double ulo = 0.0, uhi = 0.0;
      for (int r = 0; r < m(); ++r) {
        const double a = u_(j, r) * theta_lo_, b = u_(j, r) * theta_hi_;
        ulo += std::min(a, b);
        uhi += std::max(a, b);
      }
      lo = std::min(lo, offs0_(j) + ulo);
      hi = std::max(hi, offs0_(j) + uhi);
    }
    if (fast_path_) {
      const bool reuse = table_ &&
                         (table_->c_fixed() - c_fixed_).cwiseAbs().maxCoeff() == 0.0 &&
                         table_->covers(lo) && table_->covers(hi);
      if (!reuse)
        table_ = std::make_unique<OffsetTable>(core_, c_fixed_, 0, lo, hi,
                                               opts_.engine.table_spacing,
                                               opts_.engine.max_table_nodes);
    }
    for (long j = 0; j < nn; ++j) build_mesh(j);
  }

  const Eigen::VectorXd& beta() const { return beta_; }

  // collapsed efficient score (q-vector) and its eta derivative
  Eigen::VectorXd effb(long j, double eta) const {
    const auto& mesh = meshes_[j];
    const auto cf = mesh.basis->coef(eta - mesh.eta0);
    return mesh.val.col(cf.i) * cf.a + mesh.val.col(cf.i + 1) * cf.b +
           mesh.sig.col(cf.i) * cf.ca + mesh.sig.col(cf.i + 1) * cf.cb;
  }
  Eigen::VectorXd effb_deriv(long j, double eta) const {
    const auto& mesh = meshes_[j];
    const auto cf = mesh.basis->deriv_coef(eta - mesh.eta0);
    return mesh.val.col(cf.i) * cf.a + mesh.val.col(cf.i + 1) * cf.b +
           mesh.sig.col(cf.i) * cf.ca + mesh.sig.col(cf.i + 1) * cf.cb;
  }

  double eta_of(long j, const Eigen::Ref<const Eigen::VectorXd>& theta) const {
    return offs0_(j) + u_.row(j).dot(theta);
  }

  // lift a collapsed vector to the beta coordinates for observation j
  Eigen::VectorXd lift_beta(long j,
                            const Eigen::Ref<const Eigen::VectorXd>& v) const {
    const auto& terms = sm_.augmented.design.terms();
    Eigen::VectorXd out(d());
    for (int t = 0; t < d(); ++t)
      out(t) = terms[t].z_monomial(data_.z.row(j)) * v(terms[t].x_pow);
    return out;
  }

  // Solve the kernel-weighted local equation at target i. Returns the
  // bandwidth actually used (boundary fallback doubles it).
  double local_solve(long i, Eigen::Ref<Eigen::VectorXd> theta) const {
    const long nn = n();
    double h = kernel_h_;
    std::vector<long> nbr;
    std::vector<double> wts;
    for (int attempt = 0;; ++attempt) {
      nbr.clear();
      wts.clear();
      const KernelSpec kern = sm_.kernel.with_bandwidth(h);
      double wsum = 0.0;
      for (long j = 0; j < nn; ++j) {
        const double k = kern.kh(data_.zs(j) - data_.zs(i));
        if (k > 0.0) {
          nbr.push_back(j);
          wts.push_back(k);
          wsum += k;
        }
      }
      if (static_cast<int>(nbr.size()) >= std::max(sm_.m, 2) && wsum > 0.0) {
        for (auto& w : wts) w /= wsum;
        break;
      }
      if (attempt >= opts_.max_h_doublings)
        throw EmptyWindow(data_.zs(i), "no observations in the kernel window");
      h *= 2.0;
    }

    // Newton on the normalized weighted equation
    Eigen::VectorXd f(m());
    Eigen::MatrixXd jac(m(), m());
    double fnorm = kInf;
    for (int iter = 0; iter < opts_.local_max_iter; ++iter) {
      f.setZero();
      jac.setZero();
      for (size_t idx = 0; idx < nbr.size(); ++idx) {
        const long j = nbr[idx];
        const double eta = eta_of(j, theta);
        const double phi = effb(j, eta)(0);
        const double dphi = effb_deriv(j, eta)(0);
        f += wts[idx] * phi * u_.row(j).transpose();
        jac += wts[idx] * dphi * u_.row(j).transpose() * u_.row(j);
      }
      fnorm = f.cwiseAbs().maxCoeff();
      if (fnorm <= opts_.local_tol) break;
      Eigen::MatrixXd jr = jac;
      jr.diagonal().array() +=
          (jac.trace() >= 0 ? 1.0 : -1.0) * 1e-12 * std::max(1.0, std::fabs(jac.trace()));
      Eigen::VectorXd step = jr.partialPivLu().solve(-f);
      if (!step.allFinite())
        throw Error("local theta solve produced a singular system");
      // damping on the weighted-equation norm
      double scale = 1.0;
      for (int hlv = 0; hlv < 8; ++hlv) {
        Eigen::VectorXd cand = theta + scale * step;
        double cnorm = 0.0;
        Eigen::VectorXd fc = Eigen::VectorXd::Zero(m());
        for (size_t idx = 0; idx < nbr.size(); ++idx) {
          const long j = nbr[idx];
          fc += wts[idx] * effb(j, eta_of(j, cand))(0) * u_.row(j).transpose();
        }
        cnorm = fc.cwiseAbs().maxCoeff();
        if (cnorm < fnorm || !std::isfinite(fnorm)) break;
        scale *= 0.5;
      }
      theta += scale * step;
      if ((scale * step).cwiseAbs().maxCoeff() < 1e-12) break;
    }
    if (!(fnorm <= std::max(opts_.local_tol * 10.0, 1e-8)))
      throw Error("local theta solve did not converge at z=" +
                  std::to_string(data_.zs(i)));
    return h;
  }

  void profile(ThetaProfile& prof) const {
    const long nn = n();
    if (prof.theta.rows() != nn) {
      prof.theta = Eigen::MatrixXd::Zero(nn, m());
      prof.h_used = Eigen::VectorXd::Constant(nn, kernel_h_);
    }
    for (long i = 0; i < nn; ++i) {
      Eigen::VectorXd th = prof.theta.row(i).transpose();
      prof.h_used(i) = local_solve(i, th);
      prof.theta.row(i) = th.transpose();
    }
  }

  // L_i at (beta, theta_i): n x d
  Eigen::MatrixXd scores(const ThetaProfile& prof) const {
    Eigen::MatrixXd out(n(), d());
    for (long j = 0; j < n(); ++j) {
      const double eta = eta_of(j, prof.theta.row(j).transpose());
      out.row(j) = lift_beta(j, effb(j, eta)).transpose();
    }
    return out;
  }

  Eigen::VectorXd mean_score(const ThetaProfile& prof) const {
    return scores(prof).colwise().mean().transpose();
  }

  // theta sensitivities d theta_i / d beta_t for offset-type columns by the
  // implicit function theorem; filled into dtheta (n x m*d blocks).
  // Jacobian of the profiled mean score for the requested columns.
  Eigen::MatrixXd profiled_jacobian(const ThetaProfile& prof,
                                    const std::vector<int>& cols,
                                    Eigen::MatrixXd* dtheta);

  bool is_offset_col(int t) const {
    return sm_.augmented.design.terms()[t].x_pow == 0;
  }

  const SemiparModel& model() const { return sm_; }
  const Dataset& data() const { return data_; }
  const SemiparOptions& options() const { return opts_; }

 private:
  void build_mesh(long j) {
    double ulo = 0.0, uhi = 0.0;
    for (int r = 0; r < m(); ++r) {
      const double a = u_(j, r) * theta_lo_, b = u_(j, r) * theta_hi_;
      ulo += std::min(a, b);
      uhi += std::max(a, b);
    }
    const double lo = offs0_(j) + ulo;
    const double hi = offs0_(j) + uhi;
    const double spacing = opts_.psi_spacing;
    int count =
        std::clamp(static_cast<int>(std::ceil((hi - lo) / spacing)) + 1, 4, 400);
    ObsMesh& mesh = meshes_[j];
    mesh.eta0 = lo;
    mesh.basis = shared_basis(count, spacing);
    mesh.val.resize(q(), count);
    Eigen::VectorXd c = c_fixed_;
    OffsetTable::Scratch scratch;
    for (int k = 0; k < count; ++k) {
      const double eta = lo + k * spacing;
      if (table_) {
        mesh.val.col(k) =
            table_->eff_b(obs_rules_[j], data_.y(j), eta, j, scratch);
      } else {
        c(0) = eta;
        const AFunction a = core_.solve_a(c);
        mesh.val.col(k) = core_.eff_b_cached(obs_rules_[j], data_.y(j), c,
                                             a.values_b, a.xsig_b, j);
      }
    }
    mesh.sig.resize(q(), count);
    for (int p = 0; p < q(); ++p)
      mesh.sig.row(p) =
          mesh.basis->second_derivs(mesh.val.row(p).transpose()).transpose();
  }

  const SplineBasis* shared_basis(int count, double spacing) {
    const long key = count;
    auto it = basis_cache_.find(key);
    if (it == basis_cache_.end()) {
      Eigen::VectorXd nodes =
          Eigen::VectorXd::LinSpaced(count, 0.0, spacing * (count - 1));
      it = basis_cache_
               .emplace(key, std::make_unique<SplineBasis>(std::move(nodes)))
               .first;
    }
    return it->second.get();
  }

  SemiparModel sm_;
  Dataset data_;
  SemiparOptions opts_;
  ScoreCore core_;
  Eigen::MatrixXd u_;        // n x m theta-term monomials
  Eigen::VectorXd offs0_;    // beta-driven offsets (theta = 0)
  Eigen::VectorXd c_fixed_;  // non-offset collapsed coordinates
  Eigen::VectorXd beta_;
  bool fast_path_ = false;
  std::unique_ptr<OffsetTable> table_;
  std::vector<ObsMesh> meshes_;
  std::vector<ScoreCore::ObsRule> obs_rules_;
  std::map<long, std::unique_ptr<SplineBasis>> basis_cache_;
  double theta_lo_ = -1.0, theta_hi_ = 1.0;
  double kernel_h_ = 0.0;
};

Eigen::MatrixXd SemiparWork::profiled_jacobian(const ThetaProfile& prof,
                                               const std::vector<int>& cols,
                                               Eigen::MatrixXd* dtheta) {
  const long nn = n();
  const int dd = d(), mm = m();
  const auto& terms = sm_.augmented.design.terms();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(dd, cols.size());
  if (dtheta) *dtheta = Eigen::MatrixXd::Zero(nn, mm * dd);

  std::vector<int> offset_cols, fd_cols;
  for (int c : cols)
    (is_offset_col(c) && !opts_.fd_theta_sensitivity ? offset_cols : fd_cols)
        .push_back(c);

  if (!offset_cols.empty()) {
    // monomial values per offset column
    Eigen::MatrixXd mono(nn, offset_cols.size());
    for (size_t c = 0; c < offset_cols.size(); ++c)
      for (long j = 0; j < nn; ++j)
        mono(j, c) = terms[offset_cols[c]].z_monomial(data_.z.row(j));

    // theta sensitivities per target via the local equations
    Eigen::MatrixXd theta_sens(nn, mm * offset_cols.size());
    for (long i = 0; i < nn; ++i) {
      const KernelSpec kern = sm_.kernel.with_bandwidth(prof.h_used(i));
      Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(mm, mm);
      Eigen::MatrixXd bmat = Eigen::MatrixXd::Zero(mm, offset_cols.size());
      const Eigen::VectorXd theta_i = prof.theta.row(i).transpose();
      double wsum = 0.0;
      for (long j = 0; j < nn; ++j) {
        const double k = kern.kh(data_.zs(j) - data_.zs(i));
        if (k <= 0.0) continue;
        wsum += k;
        const double eta = eta_of(j, theta_i);
        const double dphi = effb_deriv(j, eta)(0);
        omega += k * dphi * u_.row(j).transpose() * u_.row(j);
        bmat += k * dphi * u_.row(j).transpose() * mono.row(j);
      }
      omega /= wsum;
      bmat /= wsum;
      Eigen::MatrixXd sens = omega.partialPivLu().solve(-bmat);
      if (!sens.allFinite())
        throw SingularOmega("theta sensitivity at z=" +
                            std::to_string(data_.zs(i)));
      theta_sens.row(i) =
          Eigen::Map<Eigen::VectorXd>(sens.data(), mm * offset_cols.size())
              .transpose();
    }

    for (long j = 0; j < nn; ++j) {
      const double eta = eta_of(j, prof.theta.row(j).transpose());
      const Eigen::VectorXd de = effb_deriv(j, eta);
      const Eigen::VectorXd lift_de = lift_beta(j, de);  // d-vector
      const Eigen::Map<const Eigen::MatrixXd> sens(theta_sens.row(j).data(), mm,
                                                   offset_cols.size());
      for (size_t c = 0; c < offset_cols.size(); ++c) {
        // dL_j/dbeta_t + dL_j/dtheta * dtheta_j/dbeta_t
        const double dir = mono(j, c) + u_.row(j).dot(sens.col(c));
        const int col_pos =
            static_cast<int>(std::find(cols.begin(), cols.end(), offset_cols[c]) -
                             cols.begin());
        jac.col(col_pos) += lift_de * dir / static_cast<double>(nn);
        if (dtheta)
          for (int r = 0; r < mm; ++r)
            dtheta->operator()(j, r * dd + offset_cols[c]) = sens(r, c);
      }
    }
  }

  // finite-difference re-profiling for the remaining columns
  const double step_scale = std::cbrt(std::numeric_limits<double>::epsilon());
  for (int t : fd_cols) {
    const double h = step_scale * std::max(1.0, std::fabs(beta_(t)));
    const Eigen::VectorXd beta0 = beta_;
    ThetaProfile up = prof, dn = prof;

    Eigen::VectorXd b = beta0;
    b(t) += h;
    set_beta(b);
    profile(up);
    const Eigen::VectorXd mu = mean_score(up);

    b(t) = beta0(t) - h;
    set_beta(b);
    profile(dn);
    const Eigen::VectorXd md = mean_score(dn);

    set_beta(beta0);  // restore state
    const int col_pos = static_cast<int>(
        std::find(cols.begin(), cols.end(), t) - cols.begin());
    jac.col(col_pos) = (mu - md) / (2.0 * h);
    if (dtheta)
      for (long j = 0; j < nn; ++j)
        for (int r = 0; r < mm; ++r)
          dtheta->operator()(j, r * dd + t) =
              (up.theta(j, r) - dn.theta(j, r)) / (2.0 * h);
  }
  return jac;
}

Eigen::VectorXd initial_beta_theta(const SemiparModel& sm, const Dataset& data) {
  return naive_fit(sm.augmented, data);
}

}  // namespace

Eigen::VectorXd local_theta_solve(const SemiparModel& model,
                                  const Dataset& data,
                                  const Eigen::VectorXd& beta, double z_target,
                                  const SemiparOptions& opts,
                                  const Eigen::VectorXd& theta_init) {
  SemiparWork work(model, data, opts);
  Eigen::VectorXd theta =
      theta_init.size() ? theta_init : Eigen::VectorXd::Zero(model.m);
  work.set_theta_window(theta.minCoeff() - 1.0, theta.maxCoeff() + 1.0);
  work.set_beta(beta);

  for (long i = 0; i < data.n(); ++i) {
    if (data.zs(i) == z_target) {
      Eigen::VectorXd th = theta;
      work.local_solve(i, th);
      return th;
    }
  }

  // off-sample target: Newton on the kernel-weighted equation at z_target
  double h = model.kernel.bandwidth();
  for (int attempt = 0;; ++attempt) {
    const KernelSpec kern = model.kernel.with_bandwidth(h);
    double wsum = 0.0;
    long count = 0;
    for (long j = 0; j < data.n(); ++j) {
      const double k = kern.kh(data.zs(j) - z_target);
      if (k > 0.0) { wsum += k; ++count; }
    }
    if (count >= std::max(model.m, 2) && wsum > 0.0) break;
    if (attempt >= opts.max_h_doublings)
      throw EmptyWindow(z_target, "no observations in the kernel window");
    h *= 2.0;
  }
  const KernelSpec kern = model.kernel.with_bandwidth(h);
  for (int iter = 0; iter < opts.local_max_iter; ++iter) {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(model.m);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(model.m, model.m);
    double wsum = 0.0;
    for (long j = 0; j < data.n(); ++j) {
      const double k = kern.kh(data.zs(j) - z_target);
      if (k <= 0.0) continue;
      wsum += k;
      Eigen::VectorXd u(model.m);
      for (int r = 0; r < model.m; ++r)
        u(r) = model.augmented.design.terms()[model.n_beta + r].z_monomial(
            data.z.row(j));
      const double eta = work.eta_of(j, theta);
      f += k * work.effb(j, eta)(0) * u;
      jac += k * work.effb_deriv(j, eta)(0) * u * u.transpose();
    }
    f /= wsum;
    jac /= wsum;
    if (f.cwiseAbs().maxCoeff() <= opts.local_tol) break;
    const Eigen::VectorXd step = jac.partialPivLu().solve(-f);
    if (!step.allFinite()) throw Error("local theta solve singular");
    theta += step;
    if (step.cwiseAbs().maxCoeff() < 1e-12) break;
  }
  return theta;
}

Eigen::MatrixXd profiled_scores(const SemiparModel& model, const Dataset& data,
                                const Eigen::VectorXd& beta,
                                const ThetaProfile& profile,
                                const SemiparOptions& opts) {
  SemiparWork work(model, data, opts);
  work.set_theta_window(profile.theta.minCoeff(), profile.theta.maxCoeff());
  work.set_beta(beta);
  return work.scores(profile);
}

ProfileFitResult profile_fit(const SemiparModel& model, const Dataset& data,
                             double lambda, const PenaltySpec& penalty,
                             const SolverConfig& config,
                             const SemiparOptions& opts,
                             const Eigen::VectorXd& beta_init) {
  model.validate();
  const int d = model.n_beta;
  const bool penalize = lambda > 0.0;

  SemiparWork work(model, data, opts);

  // naive initializer: treat W as X and theta as a global parameter
  Eigen::VectorXd beta(d);
  ThetaProfile prof;
  {
    const Eigen::VectorXd aug0 = initial_beta_theta(model, data);
    beta = beta_init.size() ? beta_init : aug0.head(d);
    prof.theta = Eigen::MatrixXd::Zero(data.n(), model.m);
    for (long i = 0; i < data.n(); ++i)
      prof.theta.row(i) = aug0.tail(model.m).transpose();
    prof.h_used = Eigen::VectorXd::Constant(data.n(), model.kernel.bandwidth());
  }

  ProfileFitResult out;
  FitResult& fit = out.fit;
  fit.lambda = penalize ? lambda : 0.0;
  fit.penalty = penalty;
  fit.penalty.lambda = fit.lambda;
  fit.unpenalized_mask = config.unpenalized_mask;
  fit.zero_threshold = config.zero_threshold_scale *
                       std::max(1.0, beta.cwiseAbs().maxCoeff());

  std::vector<bool> locked(d, false);
  auto active_of = [&]() {
    std::vector<int> act;
    for (int j = 0; j < d; ++j)
      if (!locked[j]) act.push_back(j);
    return act;
  };

  auto window_update = [&]() {
    work.set_theta_window(prof.theta.minCoeff(), prof.theta.maxCoeff());
  };

  auto pen_residual = [&](const std::vector<int>& act) {
    Eigen::VectorXd phi = work.mean_score(prof);
    if (penalize)
      phi -= penalty_gradient(beta, fit.penalty, config.unpenalized_mask);
    Eigen::VectorXd out_r(act.size());
    for (size_t i = 0; i < act.size(); ++i) out_r(i) = phi(act[i]);
    return out_r;
  };

  window_update();
  work.set_beta(beta);
  work.profile(prof);
  window_update();

  double best_norm = kInf;
  Eigen::VectorXd best_beta = beta;
  ThetaProfile best_prof = prof;

  for (int iter = 1; iter <= config.max_iter; ++iter) {
    fit.iterations = iter;
    if (penalize) {
      for (int j = 0; j < d; ++j) {
        if (locked[j] || config.unpenalized_mask.count(j)) continue;
        if (!lqa_weight(beta(j), fit.penalty, fit.zero_threshold)) {
          locked[j] = true;
          beta(j) = 0.0;
        }
      }
      work.set_beta(beta);
      work.profile(prof);
    }
    std::vector<int> act = active_of();
    if (act.empty()) {
      fit.empty_model = true;
      fit.converged = true;
      break;
    }

    const Eigen::VectorXd phi_full = work.mean_score(prof);
    Eigen::MatrixXd jac_cols = work.profiled_jacobian(prof, act, nullptr);
    Eigen::MatrixXd jac(act.size(), act.size());
    for (size_t r = 0; r < act.size(); ++r) jac.row(r) = jac_cols.row(act[r]);

    Eigen::VectorXd resid(act.size());
    for (size_t i = 0; i < act.size(); ++i) resid(i) = phi_full(act[i]);
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
                         "semipar newton step");

    const double f0 = pen_residual(act).cwiseAbs().maxCoeff();
    double scale = 1.0;
    Eigen::VectorXd cand;
    double fnew = 0.0;
    for (int h = 0; h <= config.max_halvings; ++h) {
      cand = beta;
      for (size_t i = 0; i < act.size(); ++i) cand(act[i]) += scale * delta(i);
      work.set_beta(cand);
      work.profile(prof);
      window_update();
      Eigen::VectorXd phi = work.mean_score(prof);
      if (penalize)
        phi -= penalty_gradient(cand, fit.penalty, config.unpenalized_mask);
      fnew = 0.0;
      for (size_t i = 0; i < act.size(); ++i)
        fnew = std::max(fnew, std::fabs(phi(act[i])));
      if (fnew < f0 || !std::isfinite(f0)) break;
      scale *= 0.5;
    }
    const double step_norm = (scale * delta).cwiseAbs().maxCoeff();
    fit.trace.push_back(step_norm);
    beta = cand;

    if (fnew < best_norm) {
      best_norm = fnew;
      best_beta = beta;
      best_prof = prof;
    }

    if (step_norm < config.tol) {
      if (penalize) {
        for (int j = 0; j < d; ++j) {
          if (locked[j] || config.unpenalized_mask.count(j)) continue;
          if (!lqa_weight(beta(j), fit.penalty, fit.zero_threshold)) {
            locked[j] = true;
            beta(j) = 0.0;
          }
        }
        work.set_beta(beta);
        work.profile(prof);
      }
      act = active_of();
      fit.converged = true;
      fit.residual_inf =
          act.empty() ? 0.0 : pen_residual(act).cwiseAbs().maxCoeff();
      if (act.empty()) fit.empty_model = true;
      break;
    }
  }

  if (!fit.converged && !fit.empty_model) {
    beta = best_beta;
    prof = best_prof;
    work.set_beta(beta);
    work.profile(prof);
    const std::vector<int> act = active_of();
    fit.residual_inf =
        act.empty() ? 0.0 : pen_residual(act).cwiseAbs().maxCoeff();
  }

  fit.beta = beta;
  fit.active_set.clear();
  for (int j = 0; j < d; ++j)
    if (beta(j) != 0.0) fit.active_set.push_back(j);

  out.profile = prof;
  // final theta sensitivities for downstream use
  std::vector<int> all(d);
  for (int j = 0; j < d; ++j) all[j] = j;
  work.profiled_jacobian(prof, all, &out.dtheta_dbeta);
  return out;
}

Eigen::MatrixXd semipar_sandwich(const ProfileFitResult& result,
                                 const SemiparModel& model,
                                 const Dataset& data,
                                 const SemiparOptions& opts) {
  const FitResult& fit = result.fit;
  if (!fit.converged) throw Error("semipar_sandwich needs a converged fit");
  if (fit.active_set.empty()) throw Error("semipar_sandwich: empty active set");
  const int d = model.n_beta;
  const int mm = model.m;
  const long n = data.n();
  const auto& act = fit.active_set;
  const int d1 = fit.d1();

  SemiparWork work(model, data, opts);
  work.set_theta_window(result.profile.theta.minCoeff(),
                        result.profile.theta.maxCoeff());
  work.set_beta(fit.beta);
  ThetaProfile prof = result.profile;

  // per-observation pieces at the fitted values
  Eigen::MatrixXd l_all(n, d);        // L_i
  Eigen::MatrixXd psi_all(n, mm);     // Psi_i
  Eigen::MatrixXd ltheta(n, d * mm);  // dL/dtheta blocks
  Eigen::MatrixXd psitheta(n, mm * mm);
  for (long j = 0; j < n; ++j) {
    const Eigen::VectorXd theta_j = prof.theta.row(j).transpose();
    const double eta = work.eta_of(j, theta_j);
    const Eigen::VectorXd e = work.effb(j, eta);
    const Eigen::VectorXd de = work.effb_deriv(j, eta);
    l_all.row(j) = work.lift_beta(j, e).transpose();
    const Eigen::VectorXd lde = work.lift_beta(j, de);
    Eigen::VectorXd u(mm);
    for (int r = 0; r < mm; ++r)
      u(r) = model.augmented.design.terms()[d + r].z_monomial(data.z.row(j));
    psi_all.row(j) = (e(0) * u).transpose();
    for (int r = 0; r < mm; ++r) {
      ltheta.block(j, r * d, 1, d) = (lde * u(r)).transpose();
      for (int r2 = 0; r2 < mm; ++r2)
        psitheta(j, r * mm + r2) = de(0) * u(r) * u(r2);
    }
  }

  // kernel regressions of Psi_theta and L_Itheta on z
  Eigen::MatrixXd b_acc = Eigen::MatrixXd::Zero(d1, d1);
  Eigen::MatrixXd psi_corr(n, d1);
  for (long i = 0; i < n; ++i) {
    const KernelSpec kern = model.kernel.with_bandwidth(prof.h_used(i));
    Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(mm, mm);
    Eigen::MatrixXd lth = Eigen::MatrixXd::Zero(d1, mm);
    double wsum = 0.0;
    for (long j = 0; j < n; ++j) {
      const double k = kern.kh(data.zs(j) - data.zs(i));
      if (k <= 0.0) continue;
      wsum += k;
      for (int r = 0; r < mm; ++r) {
        for (int r2 = 0; r2 < mm; ++r2)
          omega(r, r2) += k * psitheta(j, r * mm + r2);
        for (int c = 0; c < d1; ++c)
          lth(c, r) += k * ltheta(j, r * d + act[c]);
      }
    }
    if (wsum <= 0.0) throw EmptyWindow(data.zs(i), "sandwich kernel window");
    omega /= wsum;
    lth /= wsum;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(omega);
    const Eigen::MatrixXd u_i = lu.solve(lth.transpose()).transpose();
    if (!u_i.allFinite())
      throw SingularOmega("Omega(z) singular at z=" + std::to_string(data.zs(i)));
    Eigen::VectorXd li(d1);
    for (int c = 0; c < d1; ++c) li(c) = l_all(i, act[c]);
    psi_corr.row(i) = (li - u_i * psi_all.row(i).transpose()).transpose();
  }
  const Eigen::RowVectorXd mean_corr = psi_corr.colwise().mean();
  for (long i = 0; i < n; ++i) {
    const Eigen::VectorXd v = (psi_corr.row(i) - mean_corr).transpose();
    b_acc.selfadjointView<Eigen::Lower>().rankUpdate(v, 1.0);
  }
  Eigen::MatrixXd b = b_acc.selfadjointView<Eigen::Lower>();
  b /= static_cast<double>(n);

  // A on the active set from the profiled Jacobian
  Eigen::MatrixXd jac_cols = work.profiled_jacobian(prof, act, nullptr);
  Eigen::MatrixXd a(d1, d1);
  for (int r = 0; r < d1; ++r) a.row(r) = jac_cols.row(act[r]);
  for (int c = 0; c < d1; ++c) {
    const int j = act[c];
    if (fit.lambda == 0.0 || fit.unpenalized_mask.count(j)) continue;
    a(c, c) -= penalty_prime(std::fabs(fit.beta(j)), fit.penalty) /
               std::fabs(fit.beta(j));
  }

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  const Eigen::MatrixXd inv = lu.solve(Eigen::MatrixXd::Identity(d1, d1));
  if (!inv.allFinite() ||
      (a * inv - Eigen::MatrixXd::Identity(d1, d1)).cwiseAbs().maxCoeff() > 1e-6)
    throw SingularBread("(A - Sigma_lambda) not invertible");
  Eigen::MatrixXd cov = inv * b * inv.transpose() / static_cast<double>(n);
  cov = 0.5 * (cov + cov.transpose().eval());
  return cov;
}

}  // namespace mevs
