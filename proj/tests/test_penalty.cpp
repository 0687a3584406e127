#include <doctest.h>

#include <cmath>

#include "mevs/errors.hpp"
#include "mevs/penalty.hpp"

using namespace mevs;

TEST_SUITE_BEGIN("penalty");

// hand evaluation of the three-branch SCAD derivative
static double scad_prime_ref(double g, double lambda, double a) {
  const double sgn = (g > 0) - (g < 0);
  const double ag = std::fabs(g);
  if (lambda == 0.0 || sgn == 0.0) return 0.0;
  if (ag <= lambda) return lambda * sgn;
  const double top = std::max(a * lambda - ag, 0.0);
  return lambda * (top / ((a - 1.0) * lambda)) * sgn;
}

TEST_CASE("scad derivative branch values") {
  const PenaltySpec spec = PenaltySpec::scad(1.0, 3.7);
  CHECK(penalty_prime(0.5, spec) == doctest::Approx(1.0));
  CHECK(penalty_prime(0.0, spec) == 0.0);
  CHECK(penalty_prime(2.0, spec) == doctest::Approx((3.7 - 2.0) / 2.7));
  CHECK(penalty_prime(5.0, spec) == 0.0);
  CHECK(penalty_prime(-2.0, spec) == doctest::Approx(-(3.7 - 2.0) / 2.7));
}

TEST_CASE("scad matches the reference on a dense grid, odd and bounded") {
  int checked = 0;
  for (double lambda : {0.1, 0.5, 1.0, 2.5}) {
    for (double a : {2.1, 3.7, 5.0}) {
      const PenaltySpec spec = PenaltySpec::scad(lambda, a);
      for (int i = 0; i <= 100; ++i) {
        const double g = -6.0 + 12.0 * i / 100.0;
        const double p = penalty_prime(g, spec);
        CHECK(p == doctest::Approx(scad_prime_ref(g, lambda, a)).epsilon(1e-14));
        CHECK(p == doctest::Approx(-penalty_prime(-g, spec)).epsilon(1e-14));
        CHECK(std::fabs(p) <= lambda + 1e-15);
        ++checked;
      }
    }
  }
  CHECK(checked >= 1000);
}

TEST_CASE("continuity at the lambda knot") {
  const PenaltySpec spec = PenaltySpec::scad(0.8, 3.7);
  for (double eps : {1e-4, 1e-6, 1e-8}) {
    const double below = penalty_prime(0.8 - eps, spec);
    const double above = penalty_prime(0.8 + eps, spec);
    CHECK(std::fabs(above - below) < 2.0 * eps / (3.7 - 1.0) + 1e-12);
  }
}

TEST_CASE("l1 derivative") {
  const PenaltySpec spec = PenaltySpec::l1(0.4);
  CHECK(penalty_prime(3.0, spec) == doctest::Approx(0.4));
  CHECK(penalty_prime(-0.01, spec) == doctest::Approx(-0.4));
  CHECK(penalty_prime(0.0, spec) == 0.0);
}

TEST_CASE("penalty gradient with mask") {
  const PenaltySpec spec = PenaltySpec::scad(1.0, 3.7);
  Eigen::VectorXd beta(2);
  beta << 0.5, 2.0;
  const Eigen::VectorXd grad = penalty_gradient(beta, spec);
  CHECK(grad(0) == doctest::Approx(1.0));
  CHECK(grad(1) == doctest::Approx((3.7 - 2.0) / 2.7));

  const Eigen::VectorXd zero =
      penalty_gradient(beta, PenaltySpec::scad(0.0, 3.7));
  CHECK(zero.cwiseAbs().maxCoeff() == 0.0);

  Eigen::VectorXd one(1);
  one << 0.5;
  CHECK(penalty_gradient(one, spec, {0})(0) == 0.0);
}

TEST_CASE("lqa weight and the zero lock") {
  const PenaltySpec spec = PenaltySpec::scad(1.0, 3.7);
  auto w = lqa_weight(0.5, spec, 1e-6);
  REQUIRE(w.has_value());
  CHECK(*w == doctest::Approx(2.0));
  auto flat = lqa_weight(4.0, spec, 1e-6);
  REQUIRE(flat.has_value());
  CHECK(*flat == 0.0);
  CHECK(!lqa_weight(1e-9, spec, 1e-6).has_value());
  // unbiasedness region: weight is exactly 0 iff |b| >= a lambda
  for (double b : {3.71, 4.5, 10.0}) CHECK(*lqa_weight(b, spec, 1e-6) == 0.0);
  for (double b : {0.2, 1.0, 3.69}) CHECK(*lqa_weight(b, spec, 1e-6) > 0.0);
}

TEST_CASE("invalid specs are rejected at construction") {
  CHECK_THROWS_AS(PenaltySpec::scad(-0.1), ConfigError);
  CHECK_THROWS_AS(PenaltySpec::scad(1.0, 2.0), ConfigError);
  CHECK_THROWS_AS(PenaltySpec::l1(-1.0), ConfigError);
}

TEST_SUITE_END();
