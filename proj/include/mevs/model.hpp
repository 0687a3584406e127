#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "mevs/quadrature.hpp"

namespace mevs {

enum class Family { Logistic, GaussianLinear };

// One design column: x^x_pow times a monomial in the error-free covariates.
struct Term {
  int x_pow = 0;
  std::vector<std::pair<int, int>> z_pows;  // (column, power) factors
  std::string label;

  double z_monomial(const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
    double m = 1.0;
    for (const auto& [col, pow] : z_pows)
      for (int p = 0; p < pow; ++p) m *= z(col);
    return m;
  }
};

// Design vector v(x,z) with the error-prone covariate entering through
// powers of x. Everything downstream uses the collapsed representation
// beta' v(x,z) = c(z,beta)' b(x) with b(x) = (1, x, ..., x^(q-1)).
class DesignSpec {
 public:
  DesignSpec() = default;
  DesignSpec(std::vector<Term> terms, int n_z_cols);

  int dim() const { return static_cast<int>(terms_.size()); }
  int q() const { return q_; }
  int n_z_cols() const { return n_z_cols_; }
  const std::vector<Term>& terms() const { return terms_; }

  Eigen::VectorXd design_vector(double x,
                                const Eigen::Ref<const Eigen::RowVectorXd>& z) const;

  // c(z,beta): c_p = sum over terms with x_pow=p of beta_t * m_t(z)
  Eigen::VectorXd collapse(const Eigen::Ref<const Eigen::VectorXd>& beta,
                           const Eigen::Ref<const Eigen::RowVectorXd>& z) const;

  // T(z) * w_b, the d-vector with entries m_t(z) * w_b[x_pow(t)]
  Eigen::VectorXd lift(const Eigen::Ref<const Eigen::VectorXd>& w_b,
                       const Eigen::Ref<const Eigen::RowVectorXd>& z) const;

  // Term list like {"1","w","w*z1","z2^2"}; x_name marks the error-prone
  // variable, z_names the error-free columns.
  static DesignSpec parse(const std::vector<std::string>& term_strs,
                          const std::string& x_name,
                          const std::vector<std::string>& z_names);

 private:
  std::vector<Term> terms_;
  int n_z_cols_ = 0;
  int q_ = 1;
};

// Registered main-model designs, addressable from CLI configs.
DesignSpec make_logistic_linear_design(int n_z_cols);     // 1, x, z1..zp
DesignSpec make_logistic_quadratic_design(int n_z_cols);  // 1, x, x^2, z1..zp
DesignSpec make_linear_normal_design(int n_z_cols);       // 1, x, z1..zp

// ---- error model p(W|X,Z) ----

struct GaussianErrorModel {
  double sigma_u = 0.0;  // W = X + U, U ~ N(0, sigma_u^2); 0 means no error
};

struct DiscreteErrorModel {
  Eigen::VectorXd atoms;                               // W support
  std::function<double(double x, int k)> prob;         // P(W = atoms[k] | X=x)
};

using ErrorModel = std::variant<GaussianErrorModel, DiscreteErrorModel>;

// ---- posited model p*(X|Z) ----

struct GaussianPosited {
  double mean = 0.0;
  double sd = 1.0;
};

struct DiscretePosited {
  Eigen::VectorXd atoms;  // strictly increasing
  Eigen::VectorXd mass;   // positive, summing to 1
};

using PositedModel = std::variant<GaussianPosited, DiscretePosited>;

struct QuadratureSettings {
  int x_grid_size = 25;  // collocation grid for the a(.) solve
  int w_quad_size = 20;  // E over W|X in the outer expectation
  int inner_size = 20;   // posited-measure integrals per observation
  int y_quad_size = 20;  // continuous-Y expectation (gaussian family)
  // a(.) solve for continuous posited models: nodal spline values on fixed
  // knots mu* +/- a_rep_halfwidth*sd (spacing a_rep_spacing*sd) fit by
  // posited-mass-weighted least squares over a fixed fine set of collocation
  // rows (spacing a_colloc_spacing*sd over +/- a_colloc_halfwidth*sd). The
  // fixed basis and row set keep the solve well posed and independent of the
  // x-grid size below the measurement-error scale, where the collocated
  // kernel loses rank. Discrete posited models solve exactly on the atoms.
  double a_rep_spacing = 0.75;
  double a_rep_halfwidth = 6.0;
  double a_colloc_spacing = 0.15;
  double a_colloc_halfwidth = 6.5;
  double a_ridge = 1e-8;  // base Tikhonov level on the normal equations
};

struct MEModelSpec {
  Family family = Family::Logistic;
  DesignSpec design;
  ErrorModel error = GaussianErrorModel{0.0};
  PositedModel posited = GaussianPosited{};
  QuadratureSettings quad;
  double dispersion = 1.0;  // sigma_e for the gaussian family

  void validate() const;  // throws ConfigError
};

// Observed rows. z holds the error-free design covariates (the paper's Z in
// the parametric case, S in the semiparametric case); zs is the scalar
// smoothing covariate and has size 0 for parametric data.
struct Dataset {
  Eigen::VectorXd w;
  Eigen::MatrixXd z;
  Eigen::VectorXd y;
  Eigen::VectorXd zs;

  long n() const { return w.size(); }
};

// ---- family helpers ----

inline double sigmoid(double t) {
  return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

// log p(y|eta) for one observation
double family_log_density(Family family, double y, double eta, double dispersion);
// d/deta log p(y|eta), the scalar residual multiplying the design vector
double family_residual(Family family, double y, double eta, double dispersion);
// E(Y|eta)
double family_mean(Family family, double eta);
// nodes/probabilities for E over Y given eta (exact 2-point for logistic)
QuadRule family_y_rule(Family family, double eta, double dispersion, int n);

}  // namespace mevs
