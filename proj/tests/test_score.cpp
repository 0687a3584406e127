#include <doctest.h>

#include <cmath>

#include "mevs/errors.hpp"
#include "mevs/rng.hpp"
#include "mevs/score.hpp"
#include "mevs/simharness.hpp"

using namespace mevs;

TEST_SUITE_BEGIN("score");

namespace {

// logistic complete-data score (y - mu(eta)) v
Eigen::VectorXd logistic_score(const DesignSpec& design, double x,
                               const Eigen::RowVectorXd& z, double y,
                               const Eigen::VectorXd& beta) {
  const Eigen::VectorXd v = design.design_vector(x, z);
  return (y - sigmoid(beta.dot(v))) * v;
}

MEModelSpec toy_discrete_model() {
  // two posited atoms, two W atoms, logistic main model with design (1, x)
  MEModelSpec model;
  model.family = Family::Logistic;
  model.design = make_logistic_linear_design(0);
  DiscretePosited posited;
  posited.atoms = Eigen::Vector2d(-1.0, 1.0);
  posited.mass = Eigen::Vector2d(0.5, 0.5);
  model.posited = posited;
  DiscreteErrorModel error;
  error.atoms = Eigen::Vector2d(-1.0, 1.0);
  error.prob = [](double x, int k) {
    const double same = 0.8;
    const bool match = (x < 0.0) == (k == 0);
    return match ? same : 1.0 - same;
  };
  model.error = error;
  model.quad.x_grid_size = 2;
  return model;
}

MEModelSpec plain_logistic_me(double sigma_u, int n_z, QuadratureSettings quad = {}) {
  MEModelSpec model;
  model.family = Family::Logistic;
  model.design = make_logistic_linear_design(n_z);
  model.error = GaussianErrorModel{sigma_u};
  model.posited = GaussianPosited{0.0, 1.0};
  model.quad = quad;
  return model;
}

double gamma4_shifted(Rng& rng) {
  // Gamma(shape=4, scale=0.5) - 2: mean 0, variance 1, skewed
  double s = 0.0;
  for (int i = 0; i < 4; ++i) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    s += -std::log(u);
  }
  return 0.5 * s - 2.0;
}

}  // namespace

TEST_CASE("single-atom posited model collapses to the complete-data score") {
  MEModelSpec model;
  model.family = Family::Logistic;
  model.design = make_logistic_linear_design(0);
  DiscretePosited posited;
  posited.atoms = Eigen::VectorXd::Constant(1, 0.4);
  posited.mass = Eigen::VectorXd::Constant(1, 1.0);
  model.posited = posited;
  model.error = GaussianErrorModel{0.3};
  model.quad.x_grid_size = 1;

  Eigen::VectorXd beta(2);
  beta << 0.2, -0.7;
  Observation obs{0.9, Eigen::RowVectorXd(0), 1.0};
  const Eigen::VectorXd s = purported_score(obs, beta, model);
  const Eigen::VectorXd ref =
      logistic_score(model.design, 0.4, obs.z, 1.0, beta);
  CHECK((s - ref).cwiseAbs().maxCoeff() < 1e-14);

  // a at the single node equals E{S_beta | X = x1}: brute-force the outer
  // expectation with the same W rule the core uses
  const AFunction a = solve_a_function(Eigen::RowVectorXd(0), beta, model);
  const QuadRule wrule = normal_expectation_rule(0.4, 0.3, model.quad.w_quad_size);
  Eigen::VectorXd ref_a = Eigen::VectorXd::Zero(2);
  const double eta1 = beta(0) + beta(1) * 0.4;
  for (int l = 0; l < wrule.size(); ++l) {
    for (double y : {0.0, 1.0}) {
      const double py = y == 1.0 ? sigmoid(eta1) : 1.0 - sigmoid(eta1);
      Observation o{wrule.nodes(l), Eigen::RowVectorXd(0), y};
      ref_a += wrule.weights(l) * py * purported_score(o, beta, model);
    }
  }
  const Eigen::MatrixXd av = a.full_values(model.design, Eigen::RowVectorXd(0));
  CHECK((av.row(0).transpose() - ref_a).cwiseAbs().maxCoeff() < 1e-12);

  // efficient score has mean zero over (W,Y) | X = x1
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(2);
  for (int l = 0; l < wrule.size(); ++l) {
    for (double y : {0.0, 1.0}) {
      const double py = y == 1.0 ? sigmoid(eta1) : 1.0 - sigmoid(eta1);
      Observation o{wrule.nodes(l), Eigen::RowVectorXd(0), y};
      mean += wrule.weights(l) * py * eff_score(o, beta, model, a);
    }
  }
  CHECK(mean.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("two-atom toy model matches an independent brute-force 2x2 solve") {
  const MEModelSpec model = toy_discrete_model();
  Eigen::VectorXd beta(2);
  beta << 0.3, 0.9;

  // brute force, written directly from the defining equation
  const Eigen::Vector2d atoms(-1.0, 1.0);
  const Eigen::Vector2d mass(0.5, 0.5);
  auto pw = [](double x, double w) {
    const bool match = (x < 0.0) == (w < 0.0);
    return match ? 0.8 : 0.2;
  };
  auto py = [&](double y, double x) {
    const double mu = sigmoid(beta(0) + beta(1) * x);
    return y == 1.0 ? mu : 1.0 - mu;
  };
  // S*_beta(w,y) and posterior weights by enumeration
  auto posterior = [&](double w, double y) {
    Eigen::Vector2d t;
    for (int g = 0; g < 2; ++g) t(g) = mass(g) * pw(atoms(g), w) * py(y, atoms(g));
    return Eigen::Vector2d(t / t.sum());
  };
  auto s_beta = [&](double w, double y) {
    const Eigen::Vector2d pi = posterior(w, y);
    Eigen::Vector2d s = Eigen::Vector2d::Zero();
    for (int g = 0; g < 2; ++g) {
      const double mu = sigmoid(beta(0) + beta(1) * atoms(g));
      s += pi(g) * (y - mu) * Eigen::Vector2d(1.0, atoms(g));
    }
    return s;
  };
  Eigen::Matrix2d m_ref = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d r_ref = Eigen::Matrix2d::Zero();  // rows j, cols = components
  for (int j = 0; j < 2; ++j) {
    for (double w : {-1.0, 1.0}) {
      for (double y : {0.0, 1.0}) {
        const double wt = pw(atoms(j), w) * py(y, atoms(j));
        const Eigen::Vector2d pi = posterior(w, y);
        for (int g = 0; g < 2; ++g) m_ref(j, g) += wt * pi(g);
        r_ref.row(j) += wt * s_beta(w, y).transpose();
      }
    }
  }
  const Eigen::Matrix2d a_ref = m_ref.fullPivLu().solve(r_ref);

  const AFunction a = solve_a_function(Eigen::RowVectorXd(0), beta, model);
  const Eigen::MatrixXd a_got = a.full_values(model.design, Eigen::RowVectorXd(0));
  CHECK((a_got - a_ref).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(a.residual_rel <= 1e-8);
}

TEST_CASE("near-zero measurement error reduces to the complete-data score") {
  // sigma_u = 1e-3: S*_eff at 100 points within 1e-3 of the logistic score
  const MEModelSpec model = plain_logistic_me(1e-3, 1);
  Eigen::VectorXd beta(3);
  beta << 0.4, 1.2, -0.8;
  Rng rng(99);
  Dataset data;
  const int n = 100;
  data.w.resize(n);
  data.y.resize(n);
  data.z.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    data.z(i, 0) = rng.normal();
    data.w(i) = x + rng.normal(0.0, 1e-3);
    data.y(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  EffScoreEngine engine(model, data);
  const Eigen::MatrixXd scores = engine.scores(beta);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd ref =
        logistic_score(model.design, data.w(i), data.z.row(i), data.y(i), beta);
    CHECK((scores.row(i).transpose() - ref).cwiseAbs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("linear-normal model: symmetric configuration gives zero score") {
  MEModelSpec model;
  model.family = Family::GaussianLinear;
  model.dispersion = 1.0;
  std::vector<Term> terms = {{1, {}, "x"}};
  model.design = DesignSpec(terms, 0);
  model.error = GaussianErrorModel{0.4};
  model.posited = GaussianPosited{0.0, 1.0};

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(1);
  Observation obs{0.0, Eigen::RowVectorXd(0), 0.0};
  const Eigen::VectorXd s = purported_score(obs, beta, model);
  CHECK(std::fabs(s(0)) < 1e-12);
}

TEST_CASE("purported equals efficient when a is zero") {
  const MEModelSpec model = plain_logistic_me(0.3, 0);
  Eigen::VectorXd beta(2);
  beta << 0.1, 0.8;
  AFunction zero;
  zero.c = model.design.collapse(beta, Eigen::RowVectorXd(0));
  const int g = model.quad.x_grid_size;
  zero.values_b = Eigen::MatrixXd::Zero(g, 2);
  zero.xsig_b = Eigen::MatrixXd::Zero(g, 2);
  Observation obs{0.7, Eigen::RowVectorXd(0), 1.0};
  const Eigen::VectorXd eff = eff_score(obs, beta, model, zero);
  const Eigen::VectorXd pur = purported_score(obs, beta, model);
  CHECK((eff - pur).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("efficient score is mean zero under a misspecified posited model") {
  // true X ~ shifted Gamma, posited standard normal
  const MEModelSpec model = plain_logistic_me(0.5, 0);
  Eigen::VectorXd beta(2);
  beta << 0.3, 1.0;
  const long n = 20000;
  Dataset data;
  data.w.resize(n);
  data.y.resize(n);
  data.z.resize(n, 0);
  Rng rng(2024);
  for (long i = 0; i < n; ++i) {
    const double x = gamma4_shifted(rng);
    data.w(i) = x + rng.normal(0.0, 0.5);
    data.y(i) = rng.bernoulli(sigmoid(beta(0) + beta(1) * x)) ? 1.0 : 0.0;
  }
  EffScoreEngine engine(model, data);
  CHECK(std::string(engine.mode_name()) == "single");
  const Eigen::MatrixXd scores = engine.scores(beta);
  const Eigen::VectorXd mean = scores.colwise().mean();
  for (int j = 0; j < 2; ++j) {
    const double sd = std::sqrt(
        (scores.col(j).array() - mean(j)).square().sum() / (n - 1));
    CHECK(std::fabs(mean(j)) <= 4.0 * sd / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("offset table agrees with per-observation direct solves") {
  const MEModelSpec model = plain_logistic_me(0.2, 2);
  Eigen::VectorXd beta(4);
  beta << 0.3, 1.1, -0.6, 0.9;
  Rng rng(5);
  const int n = 40;
  Dataset data;
  data.w.resize(n);
  data.y.resize(n);
  data.z.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    data.z(i, 0) = rng.normal();
    data.z(i, 1) = rng.normal();
    data.w(i) = x + rng.normal(0.0, 0.2);
    data.y(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  EngineOptions table_opts;
  table_opts.mode = EngineOptions::Mode::Table;
  EffScoreEngine fast(model, data, table_opts);
  EngineOptions direct_opts;
  direct_opts.mode = EngineOptions::Mode::PerObs;
  EffScoreEngine slow(model, data, direct_opts);
  const Eigen::MatrixXd s_fast = fast.scores(beta);
  const Eigen::MatrixXd s_slow = slow.scores(beta);
  CHECK((s_fast - s_slow).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("grid refinement: doubling G leaves the efficient score stable") {
  // Example-1 model, sigma_u = 0.1, 100 test observations
  QuadratureSettings q20;
  q20.x_grid_size = 20;
  QuadratureSettings q40;
  q40.x_grid_size = 40;
  const SimDesign d20 = example1_design(0.1, q20);
  const SimDesign d40 = example1_design(0.1, q40);
  const Dataset data = gen_example1(100, 314159);
  EffScoreEngine e20(d20.model, data);
  EffScoreEngine e40(d40.model, data);
  const Eigen::MatrixXd s20 = e20.scores(d20.beta0);
  const Eigen::MatrixXd s40 = e40.scores(d40.beta0);
  CHECK((s20 - s40).cwiseAbs().maxCoeff() <= 1e-3);
}

TEST_CASE("zero-error logistic jacobian matches the analytic hessian") {
  const MEModelSpec model = plain_logistic_me(0.0, 1);
  Eigen::VectorXd beta(3);
  beta << 0.2, 0.9, -0.5;
  Rng rng(7);
  const int n = 200;
  Dataset data;
  data.w.resize(n);
  data.y.resize(n);
  data.z.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    data.w(i) = rng.normal();
    data.z(i, 0) = rng.normal();
    data.y(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  const Eigen::MatrixXd jac = eff_score_jacobian(data, beta, model);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(3, 3);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd v = model.design.design_vector(data.w(i), data.z.row(i));
    const double mu = sigmoid(beta.dot(v));
    ref -= mu * (1.0 - mu) * v * v.transpose();
  }
  ref /= n;
  CHECK((jac - ref).cwiseAbs().maxCoeff() <
        1e-5 * std::max(1.0, ref.cwiseAbs().maxCoeff()));
}

TEST_CASE("jacobian is symmetric under mirrored data") {
  const MEModelSpec model = plain_logistic_me(0.3, 0);
  Eigen::VectorXd beta(2);
  beta << 0.0, 1.0;
  Rng rng(11);
  const int half = 30;
  Dataset data;
  data.w.resize(2 * half);
  data.y.resize(2 * half);
  data.z.resize(2 * half, 0);
  for (int i = 0; i < half; ++i) {
    const double w = rng.normal();
    const double y = rng.bernoulli(0.6) ? 1.0 : 0.0;
    data.w(i) = w;
    data.y(i) = y;
    data.w(half + i) = -w;     // mirrored observation
    data.y(half + i) = 1.0 - y;
  }
  const Eigen::MatrixXd jac = eff_score_jacobian(data, beta, model);
  // mirroring kills the intercept-slope cross derivative at beta0 = 0
  CHECK(std::fabs(jac(0, 1)) < 1e-8);
  CHECK(std::fabs(jac(1, 0)) < 1e-8);
}

TEST_CASE("finite-difference self-consistency under step halving") {
  const MEModelSpec model = plain_logistic_me(0.3, 0);
  Eigen::VectorXd beta(2);
  beta << 0.2, 0.7;
  const Dataset data = [&] {
    Rng rng(3);
    Dataset d;
    const int n = 50;
    d.w.resize(n);
    d.y.resize(n);
    d.z.resize(n, 0);
    for (int i = 0; i < n; ++i) {
      d.w(i) = rng.normal();
      d.y(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    return d;
  }();
  EffScoreEngine engine(model, data);
  auto fd_jac = [&](double h_scale) {
    Eigen::MatrixXd jac(2, 2);
    Eigen::VectorXd b = beta;
    for (int j = 0; j < 2; ++j) {
      const double h = h_scale * std::max(1.0, std::fabs(beta(j)));
      b(j) = beta(j) + h;
      const Eigen::VectorXd up = engine.mean_score(b);
      b(j) = beta(j) - h;
      const Eigen::VectorXd dn = engine.mean_score(b);
      b(j) = beta(j);
      jac.col(j) = (up - dn) / (2.0 * h);
    }
    return jac;
  };
  const double h0 = 1e-4;
  const Eigen::MatrixXd j1 = fd_jac(h0);
  const Eigen::MatrixXd j2 = fd_jac(h0 / 2.0);
  const Eigen::MatrixXd j3 = fd_jac(h0 / 4.0);
  // central differences are O(h^2): the Richardson error estimate from the
  // first halving bounds the next one
  const double est = (j1 - j2).cwiseAbs().maxCoeff() / 3.0;
  CHECK((j2 - j3).cwiseAbs().maxCoeff() <= 4.0 * est + 1e-12);
}

TEST_CASE("degenerate likelihood carries the observation index") {
  MEModelSpec model = toy_discrete_model();
  Eigen::VectorXd beta(2);
  beta << 0.0, 0.5;
  // W value outside the discrete support has zero likelihood
  Observation obs{0.5, Eigen::RowVectorXd(0), 1.0};
  CHECK_THROWS_AS(purported_score(obs, beta, model, 17), DegenerateLikelihood);
  try {
    purported_score(obs, beta, model, 17);
  } catch (const DegenerateLikelihood& err) {
    CHECK(err.obs_index == 17);
  }
}

TEST_CASE("singular kernel reports a condition estimate") {
  MEModelSpec model = toy_discrete_model();
  auto& error = std::get<DiscreteErrorModel>(model.error);
  error.prob = [](double, int) { return 0.0; };  // no data channel at all
  Eigen::VectorXd beta(2);
  beta << 0.0, 0.5;
  CHECK_THROWS_AS(solve_a_function(Eigen::RowVectorXd(0), beta, model),
                  SingularKernel);
}

TEST_CASE("integral equation residual meets the relative tolerance") {
  const SimDesign design = example1_design(0.1);
  const Dataset data = gen_example1(5, 2718);
  for (int i = 0; i < 5; ++i) {
    const AFunction a =
        solve_a_function(data.z.row(i), design.beta0, design.model);
    CHECK(a.residual_rel <= 1e-8);
  }
}

TEST_SUITE_END();
