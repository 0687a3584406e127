#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "mevs/csv.hpp"
#include "mevs/kernel.hpp"
#include "mevs/quadrature.hpp"
#include "mevs/rng.hpp"
#include "mevs/spline.hpp"

using namespace mevs;

TEST_SUITE_BEGIN("numerics");

TEST_CASE("gauss-hermite integrates polynomials against exp(-t^2)") {
  // moments of the physicists' weight: int t^{2k} e^{-t^2} = sqrt(pi) (2k-1)!! / 2^k
  const QuadRule rule = gauss_hermite(12);
  CHECK(rule.weights.sum() == doctest::Approx(std::sqrt(M_PI)).epsilon(1e-13));
  double m2 = 0.0, m4 = 0.0, m6 = 0.0, odd = 0.0;
  for (int i = 0; i < rule.size(); ++i) {
    const double t = rule.nodes(i), w = rule.weights(i);
    m2 += w * t * t;
    m4 += w * t * t * t * t;
    m6 += w * std::pow(t, 6);
    odd += w * std::pow(t, 5);
  }
  const double sp = std::sqrt(M_PI);
  CHECK(m2 == doctest::Approx(sp * 0.5).epsilon(1e-12));
  CHECK(m4 == doctest::Approx(sp * 0.75).epsilon(1e-12));
  CHECK(m6 == doctest::Approx(sp * 15.0 / 8.0).epsilon(1e-12));
  CHECK(std::fabs(odd) < 1e-12);
}

TEST_CASE("normal expectation rule reproduces N(mean, sd) moments") {
  const QuadRule rule = normal_expectation_rule(1.5, 2.0, 20);
  CHECK(rule.weights.sum() == doctest::Approx(1.0).epsilon(1e-13));
  double mean = 0.0, var = 0.0;
  for (int i = 0; i < rule.size(); ++i) {
    mean += rule.weights(i) * rule.nodes(i);
    var += rule.weights(i) * (rule.nodes(i) - 1.5) * (rule.nodes(i) - 1.5);
  }
  CHECK(mean == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(var == doctest::Approx(4.0).epsilon(1e-12));

  const QuadRule degenerate = normal_expectation_rule(0.7, 0.0, 20);
  CHECK(degenerate.size() == 1);
  CHECK(degenerate.nodes(0) == 0.7);
}

TEST_CASE("gauss-legendre integrates exactly to degree 2n-1") {
  const QuadRule rule = gauss_legendre(8);
  double m0 = 0.0, m2 = 0.0, m14 = 0.0;
  for (int i = 0; i < rule.size(); ++i) {
    m0 += rule.weights(i);
    m2 += rule.weights(i) * rule.nodes(i) * rule.nodes(i);
    m14 += rule.weights(i) * std::pow(rule.nodes(i), 14);
  }
  CHECK(m0 == doctest::Approx(2.0).epsilon(1e-13));
  CHECK(m2 == doctest::Approx(2.0 / 3.0).epsilon(1e-13));
  CHECK(m14 == doctest::Approx(2.0 / 15.0).epsilon(1e-12));
}

TEST_CASE("normal inverse cdf round-trips the normal cdf") {
  auto norm_cdf = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  for (double p : {1e-10, 1e-4, 0.025, 0.31, 0.5, 0.68, 0.975, 1 - 1e-6}) {
    const double x = Rng::norm_inv_cdf(p);
    CHECK(norm_cdf(x) == doctest::Approx(p).epsilon(1e-10));
  }
  CHECK(Rng::norm_inv_cdf(0.5) == doctest::Approx(0.0));
}

TEST_CASE("rng streams are deterministic and splittable") {
  Rng a(42), b(42);
  for (int i = 0; i < 5; ++i) CHECK(a.normal() == b.normal());
  CHECK(split_seed(7, 0) != split_seed(7, 1));
  CHECK(split_seed(7, 3) == split_seed(7, 3));
}

TEST_CASE("rng normal moments") {
  Rng rng(123);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sum2 += v * v;
  }
  CHECK(std::fabs(sum / n) < 0.01);
  CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("natural spline reproduces smooth functions") {
  const int g = 25;
  Eigen::VectorXd nodes = Eigen::VectorXd::LinSpaced(g, -3.0, 3.0);
  SplineBasis basis(nodes);
  Eigen::MatrixXd values(g, 1);
  for (int i = 0; i < g; ++i) values(i, 0) = std::sin(nodes(i));
  Spline spline(&basis, values);
  for (double x : {-2.7, -1.3, 0.05, 0.9, 2.2}) {
    CHECK(spline.eval(0, x) == doctest::Approx(std::sin(x)).epsilon(1e-5));
  }
  // exact at the nodes
  CHECK(spline.eval(0, nodes(7)) == doctest::Approx(values(7, 0)).epsilon(1e-14));
  // linear extrapolation stays finite and continuous
  CHECK(std::isfinite(spline.eval(0, 5.0)));
}

TEST_CASE("spline derivative coefficients match finite differences") {
  Eigen::VectorXd nodes = Eigen::VectorXd::LinSpaced(30, -2.0, 4.0);
  SplineBasis basis(nodes);
  Eigen::VectorXd values(30);
  for (int i = 0; i < 30; ++i) values(i) = std::exp(-0.3 * nodes(i));
  const Eigen::VectorXd sig = basis.second_derivs(values);
  for (double x : {-1.1, 0.4, 2.3, 3.7}) {
    const auto dc = basis.deriv_coef(x);
    const double deriv = dc.a * values(dc.i) + dc.b * values(dc.i + 1) +
                         dc.ca * sig(dc.i) + dc.cb * sig(dc.i + 1);
    const double h = 1e-6;
    const double fd = (basis.eval(values, sig, x + h) -
                       basis.eval(values, sig, x - h)) / (2 * h);
    CHECK(deriv == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("kernel contract: unit mass, zero mean, unit second moment") {
  for (KernelFamily family :
       {KernelFamily::Quartic, KernelFamily::EpanechnikovSmooth}) {
    KernelSpec kern(family, 0.7);
    const QuadRule gl = gauss_legendre(64);
    const double r = kern.support_radius();
    double m0 = 0.0, m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < gl.size(); ++i) {
      const double t = r * gl.nodes(i);
      const double w = r * gl.weights(i);
      const double k = kern.k(t);
      m0 += w * k;
      m1 += w * t * k;
      m2 += w * t * t * k;
    }
    CHECK(m0 == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::fabs(m1) < 1e-12);
    CHECK(m2 == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(kern.k(r + 1e-9) == 0.0);
    CHECK(kern.kh(0.35) == doctest::Approx(kern.k(0.5) / 0.7));
  }
}

TEST_CASE("csv round-trip with quoting") {
  CsvTable table;
  table.header = {"name", "value"};
  table.rows.push_back({"plain", format_double(1.5)});
  table.rows.push_back({"with,comma", format_double(-0.125)});
  table.rows.push_back({"with\"quote", "x"});
  const std::string path = "test_roundtrip.csv";
  write_csv(path, table);
  const CsvTable back = read_csv(path);
  REQUIRE(back.header == table.header);
  REQUIRE(back.rows.size() == table.rows.size());
  CHECK(back.rows[1][0] == "with,comma");
  CHECK(back.rows[2][0] == "with\"quote");
  CHECK(back.num(0, 1) == 1.5);
  std::remove(path.c_str());
}

TEST_SUITE_END();
