#include "mevs/spline.hpp"

#include "mevs/errors.hpp"

namespace mevs {

SplineBasis::SplineBasis(Eigen::VectorXd nodes) : nodes_(std::move(nodes)) {
  const int n = static_cast<int>(nodes_.size());
  if (n < 1) throw ConfigError("spline needs at least one node");
  for (int i = 0; i + 1 < n; ++i)
    if (!(nodes_(i) < nodes_(i + 1)))
      throw ConfigError("spline nodes must be strictly increasing");

  s2_ = Eigen::MatrixXd::Zero(n, n);
  if (n <= 2) return;  // linear interpolation, s2 stays zero

  // Second derivatives solve A sig = B f. Interior rows are the standard
  // continuity equations; ends use not-a-knot (third-derivative continuity)
  // when there are enough nodes, natural (sig = 0) otherwise.
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i + 1 < n; ++i) {
    const double hl = nodes_(i) - nodes_(i - 1);
    const double hr = nodes_(i + 1) - nodes_(i);
    a(i, i - 1) = hl / 6.0;
    a(i, i) = (hl + hr) / 3.0;
    a(i, i + 1) = hr / 6.0;
    b(i, i - 1) += 1.0 / hl;
    b(i, i) -= 1.0 / hl + 1.0 / hr;
    b(i, i + 1) += 1.0 / hr;
  }
  if (n >= 4) {
    const double h0 = nodes_(1) - nodes_(0);
    const double h1 = nodes_(2) - nodes_(1);
    a(0, 0) = -h1;
    a(0, 1) = h0 + h1;
    a(0, 2) = -h0;
    const double hm = nodes_(n - 1) - nodes_(n - 2);
    const double hm1 = nodes_(n - 2) - nodes_(n - 3);
    a(n - 1, n - 3) = -hm;
    a(n - 1, n - 2) = hm + hm1;
    a(n - 1, n - 1) = -hm1;
  } else {
    a(0, 0) = 1.0;
    a(n - 1, n - 1) = 1.0;
  }
  s2_ = a.partialPivLu().solve(b);
}

SplineBasis::EvalCoef SplineBasis::coef(double xi) const {
  const int n = size();
  EvalCoef c{0, 1.0, 0.0, 0.0, 0.0};
  if (n == 1) return c;

  if (xi <= nodes_(0)) {
    const double h = nodes_(1) - nodes_(0);
    const double t = xi - nodes_(0);
    c.i = 0;
    c.a = 1.0 - t / h;
    c.b = t / h;
    c.ca = -2.0 * h * t / 6.0;
    c.cb = -h * t / 6.0;
    return c;
  }
  if (xi >= nodes_(n - 1)) {
    const double h = nodes_(n - 1) - nodes_(n - 2);
    const double t = xi - nodes_(n - 1);
    c.i = n - 2;
    c.a = -t / h;
    c.b = 1.0 + t / h;
    c.ca = h * t / 6.0;
    c.cb = 2.0 * h * t / 6.0;
    return c;
  }

  // binary search for the segment
  int lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    if (nodes_(mid) <= xi) lo = mid; else hi = mid;
  }
  const double h = nodes_(lo + 1) - nodes_(lo);
  const double a = (nodes_(lo + 1) - xi) / h;
  const double b = 1.0 - a;
  c.i = lo;
  c.a = a;
  c.b = b;
  c.ca = (a * a * a - a) * h * h / 6.0;
  c.cb = (b * b * b - b) * h * h / 6.0;
  return c;
}

SplineBasis::EvalCoef SplineBasis::deriv_coef(double xi) const {
  const int n = size();
  EvalCoef c{0, 0.0, 0.0, 0.0, 0.0};
  if (n == 1) return c;

  if (xi <= nodes_(0)) {
    const double h = nodes_(1) - nodes_(0);
    c.i = 0;
    c.a = -1.0 / h;
    c.b = 1.0 / h;
    c.ca = -2.0 * h / 6.0;
    c.cb = -h / 6.0;
    return c;
  }
  if (xi >= nodes_(n - 1)) {
    const double h = nodes_(n - 1) - nodes_(n - 2);
    c.i = n - 2;
    c.a = -1.0 / h;
    c.b = 1.0 / h;
    c.ca = h / 6.0;
    c.cb = 2.0 * h / 6.0;
    return c;
  }

  int lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    if (nodes_(mid) <= xi) lo = mid; else hi = mid;
  }
  const double h = nodes_(lo + 1) - nodes_(lo);
  const double a = (nodes_(lo + 1) - xi) / h;
  const double b = 1.0 - a;
  c.i = lo;
  c.a = -1.0 / h;
  c.b = 1.0 / h;
  c.ca = -(3.0 * a * a - 1.0) * h / 6.0;
  c.cb = (3.0 * b * b - 1.0) * h / 6.0;
  return c;
}

}  // namespace mevs
