#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "mevs/model.hpp"
#include "mevs/spline.hpp"

namespace mevs {

// Collocation grid for a(.): the posited measure discretized into nodes and
// masses (Gauss-Hermite for a normal posited model, the atoms themselves for
// a discrete one).
struct XGrid {
  Eigen::VectorXd nodes;    // strictly increasing
  Eigen::VectorXd weights;  // positive posited-measure masses
};

XGrid build_x_grid(const PositedModel& posited, int g);

// a(.) solved in collapsed b-space. values_b/xsig_b hold the nodal values
// and spline curvature of the solution representation (the posited atoms
// for discrete models, the fixed knot set otherwise); grid_values_b is the
// solution evaluated at the collocation grid nodes. Full d-vectors are
// realized against a conditioning covariate row via DesignSpec::lift.
struct AFunction {
  Eigen::VectorXd c;              // collapsed coefficients used by the solve
  Eigen::MatrixXd values_b;       // R x q representation values
  Eigen::MatrixXd xsig_b;         // R x q spline second derivatives
  Eigen::MatrixXd grid_values_b;  // G x q values at the x-grid nodes
  double ridge_delta = 0.0;
  double residual_rel = 0.0;           // linear-system residual (enforced)
  double collocation_mismatch = 0.0;   // |Ma - r|_inf / |r|_inf diagnostic

  // a(x_g, .) as d-vectors (G x d) for a conditioning row z
  Eigen::MatrixXd full_values(const DesignSpec& design,
                              const Eigen::Ref<const Eigen::RowVectorXd>& z) const;
};

struct Observation {
  double w;
  Eigen::RowVectorXd z;
  double y;
};

// Numerics shared by every score evaluation for one model: the x grid, its
// spline basis, the per-node W rules for the outer expectation, and the
// posited-measure quadrature for the per-observation integrals.
class ScoreCore {
 public:
  explicit ScoreCore(const MEModelSpec& model);

  const MEModelSpec& model() const { return model_; }
  const XGrid& grid() const { return grid_; }
  // interpolation basis of the a(.) representation
  const SplineBasis& basis() const { return *interp_basis_; }
  int q() const { return model_.design.q(); }
  int grid_size() const { return static_cast<int>(grid_.nodes.size()); }
  int rep_size() const { return interp_basis_->size(); }

  // Quadrature for integrals f(x) p_W(w|x) p*(x) dmu(x): nodes xi and
  // log-weights absorbing every factor except f.
  struct InnerRule {
    Eigen::VectorXd xi;
    Eigen::VectorXd log_alpha;
  };
  InnerRule inner_rule(double w) const;

  // Per-observation cache: the inner rule plus interpolation coefficients,
  // all independent of the model coefficients.
  struct ObsRule {
    Eigen::VectorXd xi;
    Eigen::VectorXd log_alpha;
    std::vector<SplineBasis::EvalCoef> coef;
  };
  ObsRule make_obs_rule(double w) const;
  Eigen::VectorXd eff_b_cached(const ObsRule& rule, double y,
                               const Eigen::VectorXd& c,
                               const Eigen::Ref<const Eigen::MatrixXd>& a_values,
                               const Eigen::Ref<const Eigen::MatrixXd>& a_xsig,
                               long obs_idx) const;

  // linear predictor sum_p c_p x^p
  static double eta_at(const Eigen::VectorXd& c, double x);

  // Solve the discretized integral equation for a at coefficients c.
  // Throws SingularKernel if conditioning fails after ridge escalation.
  AFunction solve_a(const Eigen::VectorXd& c) const;

  // Purported score in b-space. obs_idx only labels errors.
  Eigen::VectorXd purported_b(double w, double y, const Eigen::VectorXd& c,
                              long obs_idx) const;

  // Efficient score in b-space; a_values/a_xsig give the nodal values and
  // spline curvature of the a function to subtract (pass empty matrices for
  // the purported score itself).
  Eigen::VectorXd eff_b(double w, double y, const Eigen::VectorXd& c,
                        const Eigen::Ref<const Eigen::MatrixXd>& a_values,
                        const Eigen::Ref<const Eigen::MatrixXd>& a_xsig,
                        long obs_idx) const;

  Eigen::VectorXd eff_b(double w, double y, const Eigen::VectorXd& c,
                        const AFunction& a, long obs_idx) const {
    return eff_b(w, y, c, a.values_b, a.xsig_b, obs_idx);
  }

 private:
  MEModelSpec model_;
  XGrid grid_;
  std::unique_ptr<SplineBasis> interp_basis_;
  bool continuous_posited_ = false;
  Eigen::VectorXd colloc_nodes_;    // collocation rows of the a-solve
  Eigen::VectorXd colloc_weights_;  // posited masses at the rows
  std::vector<QuadRule> outer_rules_;  // W | X = x_j, per collocation row

  // coefficient-independent assembly skeleton for the continuous path
  struct SkelPoint {
    double xi;
    double log_alpha;
    SplineBasis::EvalCoef coef;
  };
  struct SkelOuter {
    double weight;  // outer W-rule weight
    int offset;     // into skel_points_
    int count;
  };
  std::vector<SkelPoint> skel_points_;
  std::vector<SkelOuter> skel_outer_;
  std::vector<int> skel_row_offset_;  // start of each row's outer entries
  void build_skeleton();
  // gaussian-gaussian posterior geometry
  bool product_rule_ = false;
  double post_slope_ = 0.0, post_sd_ = 0.0, marg_sd_ = 0.0;
  QuadRule inner_gh_;  // normalized Gauss-Hermite for the product rule

  friend class OffsetTable;
};

// a(.) solutions tabulated along one collapsed coefficient (the linear
// predictor offset in every supported model), cubic in the swept coordinate.
// Implements the per-conditioning-value cache for data sets whose rows only
// differ through that offset.
class OffsetTable {
 public:
  OffsetTable(const ScoreCore& core, Eigen::VectorXd c_fixed, int swept_power,
              double lo, double hi, double spacing, int max_nodes = 4000);

  bool covers(double eta, double margin = 0.0) const {
    return eta >= lo_ + margin_guard_ - margin && eta <= hi_ - margin_guard_ + margin;
  }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  int swept_power() const { return swept_; }
  const Eigen::VectorXd& c_fixed() const { return c_fixed_; }

  struct Scratch {
    Eigen::MatrixXd values;  // G x q
    Eigen::MatrixXd xsig;    // G x q
  };

  // Efficient score in b-space at offset eta (swept coordinate replaced).
  Eigen::VectorXd eff_b(double w, double y, double eta, long obs_idx,
                        Scratch& scratch) const;
  Eigen::VectorXd eff_b(const ScoreCore::ObsRule& rule, double y, double eta,
                        long obs_idx, Scratch& scratch) const;

  // Interpolated a-solution at eta (for tests / diagnostics).
  void a_at(double eta, Scratch& scratch) const;

 private:
  const ScoreCore* core_;
  Eigen::VectorXd c_fixed_;
  int swept_;
  double lo_, hi_;
  double margin_guard_ = 0.0;
  std::unique_ptr<SplineBasis> mesh_;
  // stacked G*q slabs per mesh node, plus eta-direction spline curvature
  Eigen::MatrixXd val_, val_eta_;    // M x (G*q)
  Eigen::MatrixXd xsig_, xsig_eta_;  // M x (G*q)
};

// ---- spec-level operations ----

// S*_beta(W,Z,Y): gradient of the log observed-data likelihood under the
// posited model, evaluated by posited-measure quadrature.
Eigen::VectorXd purported_score(const Observation& obs,
                                const Eigen::VectorXd& beta,
                                const MEModelSpec& model, long obs_idx = -1);

// Solve E[E*{a(X,Z)|W,Z,Y}|X,Z] = E{S*_beta|X,Z} on the grid for the
// conditioning row z.
AFunction solve_a_function(const Eigen::RowVectorXd& z,
                           const Eigen::VectorXd& beta,
                           const MEModelSpec& model);

// S*_eff = S*_beta - E*{a|W,Z,Y}
Eigen::VectorXd eff_score(const Observation& obs, const Eigen::VectorXd& beta,
                          const MEModelSpec& model, const AFunction& a,
                          long obs_idx = -1);

// (1/n) sum_i dS*_eff(obs_i)/dbeta' by central finite differences with step
// cbrt(eps)*max(1,|beta_j|), re-solving a at every perturbed beta.
Eigen::MatrixXd eff_score_jacobian(const Dataset& data,
                                   const Eigen::VectorXd& beta,
                                   const MEModelSpec& model);

// ---- data-set-bound evaluator ----

struct EngineOptions {
  enum class Mode { Auto, Single, Table, PerObs };
  Mode mode = Mode::Auto;
  double table_spacing = 0.1;
  double table_pad = 1.0;
  int max_table_nodes = 4000;
  // spacing multiplier for the short-lived tables built inside
  // finite-difference sweeps (interpolation errors cancel in the quotient)
  double fd_table_factor = 2.0;
};

// Evaluates per-observation efficient scores and their finite-difference
// Jacobian for a fixed data set, picking the cheapest exact strategy the
// design structure allows:
//   Single - collapsed coefficients identical across rows: one a-solve;
//   Table  - rows differ only through the linear-predictor offset: a-solves
//            tabulated over the offset range (the conditioning cache);
//   PerObs - general case: one a-solve per row.
class EffScoreEngine {
 public:
  EffScoreEngine(const MEModelSpec& model, const Dataset& data,
                 EngineOptions opts = {});

  int dim() const { return model_.design.dim(); }
  long n() const { return data_.n(); }
  const ScoreCore& core() const { return core_; }
  const char* mode_name() const;

  Eigen::MatrixXd scores(const Eigen::VectorXd& beta);  // n x d
  Eigen::VectorXd mean_score(const Eigen::VectorXd& beta);
  // full d x d Jacobian of mean_score
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& beta);
  // Jacobian columns for a coordinate subset (rows stay full-d)
  Eigen::MatrixXd jacobian_cols(const Eigen::VectorXd& beta,
                                const std::vector<int>& cols);

 private:
  Eigen::MatrixXd scores_at(const Eigen::VectorXd& beta);
  void ensure_table(const Eigen::VectorXd& beta);
  Eigen::MatrixXd collapse_all(const Eigen::VectorXd& beta) const;  // n x q

  MEModelSpec model_;
  Dataset data_;
  EngineOptions opts_;
  ScoreCore core_;
  EngineOptions::Mode mode_;
  int swept_power_ = 0;
  std::unique_ptr<OffsetTable> table_;
  Eigen::VectorXd table_c_fixed_;
  OffsetTable::Scratch scratch_;
  std::vector<ScoreCore::ObsRule> obs_rules_;
  double table_spacing_mult_ = 1.0;
};

}  // namespace mevs
