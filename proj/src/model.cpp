#include "mevs/model.hpp"

#include <algorithm>
#include <cmath>

#include "mevs/errors.hpp"

namespace mevs {

DesignSpec::DesignSpec(std::vector<Term> terms, int n_z_cols)
    : terms_(std::move(terms)), n_z_cols_(n_z_cols) {
  if (terms_.empty()) throw ConfigError("design needs at least one term");
  int max_pow = 0;
  for (const auto& t : terms_) {
    if (t.x_pow < 0) throw ConfigError("negative x power in term " + t.label);
    max_pow = std::max(max_pow, t.x_pow);
    for (const auto& [col, pow] : t.z_pows) {
      if (col < 0 || col >= n_z_cols_)
        throw ConfigError("term " + t.label + " references z column " +
                          std::to_string(col) + " out of range");
      if (pow < 1) throw ConfigError("bad power in term " + t.label);
    }
  }
  q_ = max_pow + 1;
}

Eigen::VectorXd DesignSpec::design_vector(
    double x, const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
  Eigen::VectorXd v(dim());
  for (int t = 0; t < dim(); ++t)
    v(t) = std::pow(x, terms_[t].x_pow) * terms_[t].z_monomial(z);
  return v;
}

Eigen::VectorXd DesignSpec::collapse(
    const Eigen::Ref<const Eigen::VectorXd>& beta,
    const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(q_);
  for (int t = 0; t < dim(); ++t)
    c(terms_[t].x_pow) += beta(t) * terms_[t].z_monomial(z);
  return c;
}

Eigen::VectorXd DesignSpec::lift(
    const Eigen::Ref<const Eigen::VectorXd>& w_b,
    const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
  Eigen::VectorXd out(dim());
  for (int t = 0; t < dim(); ++t)
    out(t) = terms_[t].z_monomial(z) * w_b(terms_[t].x_pow);
  return out;
}

DesignSpec DesignSpec::parse(const std::vector<std::string>& term_strs,
                             const std::string& x_name,
                             const std::vector<std::string>& z_names) {
  auto find_col = [&](const std::string& name) -> int {
    for (size_t i = 0; i < z_names.size(); ++i)
      if (z_names[i] == name) return static_cast<int>(i);
    return -1;
  };
  std::vector<Term> terms;
  for (const auto& s : term_strs) {
    Term term;
    term.label = s;
    size_t pos = 0;
    while (pos < s.size()) {
      size_t star = s.find('*', pos);
      std::string factor = s.substr(pos, star == std::string::npos
                                             ? std::string::npos
                                             : star - pos);
      pos = (star == std::string::npos) ? s.size() : star + 1;
      int pow = 1;
      size_t caret = factor.find('^');
      if (caret != std::string::npos) {
        pow = std::stoi(factor.substr(caret + 1));
        factor = factor.substr(0, caret);
      }
      // trim spaces
      while (!factor.empty() && factor.front() == ' ') factor.erase(0, 1);
      while (!factor.empty() && factor.back() == ' ') factor.pop_back();
      if (factor == "1" || factor.empty()) continue;
      if (factor == x_name) {
        term.x_pow += pow;
      } else {
        const int col = find_col(factor);
        if (col < 0)
          throw ConfigError("term '" + s + "' references unknown column '" +
                            factor + "'");
        term.z_pows.emplace_back(col, pow);
      }
    }
    terms.push_back(std::move(term));
  }
  return DesignSpec(std::move(terms), static_cast<int>(z_names.size()));
}

namespace {
DesignSpec linear_in_z(int n_z_cols, bool quadratic_x) {
  std::vector<Term> terms;
  terms.push_back({0, {}, "1"});
  terms.push_back({1, {}, "x"});
  if (quadratic_x) terms.push_back({2, {}, "x^2"});
  for (int j = 0; j < n_z_cols; ++j)
    terms.push_back({0, {{j, 1}}, "z" + std::to_string(j + 1)});
  return DesignSpec(std::move(terms), n_z_cols);
}
}  // namespace

DesignSpec make_logistic_linear_design(int n_z_cols) {
  return linear_in_z(n_z_cols, false);
}
DesignSpec make_logistic_quadratic_design(int n_z_cols) {
  return linear_in_z(n_z_cols, true);
}
DesignSpec make_linear_normal_design(int n_z_cols) {
  return linear_in_z(n_z_cols, false);
}

void MEModelSpec::validate() const {
  if (design.dim() < 1) throw ConfigError("empty design");
  if (quad.w_quad_size < 1 || quad.inner_size < 1 || quad.y_quad_size < 1)
    throw ConfigError("quadrature sizes must be >= 1");
  if (family == Family::GaussianLinear && dispersion <= 0.0)
    throw ConfigError("gaussian family needs dispersion > 0");
  if (const auto* ge = std::get_if<GaussianErrorModel>(&error)) {
    if (ge->sigma_u < 0.0) throw ConfigError("sigma_u must be >= 0");
  } else {
    const auto& de = std::get<DiscreteErrorModel>(error);
    if (de.atoms.size() < 1 || !de.prob)
      throw ConfigError("discrete error model needs atoms and probabilities");
  }
  if (const auto* gp = std::get_if<GaussianPosited>(&posited)) {
    if (gp->sd <= 0.0) throw ConfigError("posited sd must be > 0");
    if (quad.x_grid_size < 2)
      throw ConfigError("x_grid_size must be >= 2 for a continuous posited model");
  } else {
    const auto& dp = std::get<DiscretePosited>(posited);
    if (dp.atoms.size() < 1 || dp.mass.size() != dp.atoms.size())
      throw ConfigError("discrete posited model needs matching atoms/mass");
    if (dp.mass.minCoeff() <= 0.0)
      throw ConfigError("posited masses must be positive");
    if (std::fabs(dp.mass.sum() - 1.0) > 1e-6)
      throw ConfigError("posited masses must sum to 1 within 1e-6");
    for (int i = 0; i + 1 < dp.atoms.size(); ++i)
      if (!(dp.atoms(i) < dp.atoms(i + 1)))
        throw ConfigError("posited atoms must be strictly increasing");
  }
}

double family_log_density(Family family, double y, double eta,
                          double dispersion) {
  if (family == Family::Logistic) {
    // -log(1 + exp((1-2y) eta)), stable for large |eta|
    const double t = (1.0 - 2.0 * y) * eta;
    return t > 0.0 ? -t - std::log1p(std::exp(-t)) : -std::log1p(std::exp(t));
  }
  const double r = (y - eta) / dispersion;
  return -0.5 * r * r - std::log(dispersion) - 0.5 * std::log(2.0 * M_PI);
}

double family_residual(Family family, double y, double eta, double dispersion) {
  if (family == Family::Logistic) return y - sigmoid(eta);
  return (y - eta) / (dispersion * dispersion);
}

double family_mean(Family family, double eta) {
  return family == Family::Logistic ? sigmoid(eta) : eta;
}

QuadRule family_y_rule(Family family, double eta, double dispersion, int n) {
  if (family == Family::Logistic) {
    QuadRule rule;
    const double mu = sigmoid(eta);
    rule.nodes = Eigen::Vector2d(0.0, 1.0);
    rule.weights = Eigen::Vector2d(1.0 - mu, mu);
    return rule;
  }
  return normal_expectation_rule(eta, dispersion, n);
}

}  // namespace mevs
