#pragma once

#include <Eigen/Dense>

namespace mevs {

// Natural cubic spline machinery on a fixed strictly increasing node set.
// Fitted interpolants are linear in the nodal values, and the class exposes
// that linear structure: f(xi) = a*f[i] + b*f[i+1] + ca*sig[i] + cb*sig[i+1]
// with sig = S2 * f, S2 the value-to-second-derivative map. Outside the node
// range the interpolant continues linearly with the boundary slope.
class SplineBasis {
 public:
  explicit SplineBasis(Eigen::VectorXd nodes);

  struct EvalCoef {
    int i;                    // left node of the segment used
    double a, b;              // weights on f[i], f[i+1]
    double ca, cb;            // weights on sig[i], sig[i+1]
  };
  EvalCoef coef(double xi) const;

  // Same weight structure for the interpolant derivative f'(xi); constant
  // (boundary slope) outside the node range.
  EvalCoef deriv_coef(double xi) const;

  // G x G dense map from nodal values to natural-spline second derivatives
  // (rows 0 and G-1 are zero).
  const Eigen::MatrixXd& value_to_second() const { return s2_; }

  const Eigen::VectorXd& nodes() const { return nodes_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Second derivatives for one value column.
  Eigen::VectorXd second_derivs(const Eigen::VectorXd& values) const {
    return s2_ * values;
  }

  double eval(const Eigen::VectorXd& values, const Eigen::VectorXd& sig,
              double xi) const {
    const EvalCoef c = coef(xi);
    if (size() == 1) return values(0);
    return c.a * values(c.i) + c.b * values(c.i + 1) + c.ca * sig(c.i) +
           c.cb * sig(c.i + 1);
  }

 private:
  Eigen::VectorXd nodes_;
  Eigen::MatrixXd s2_;
};

// Interpolant with values for several columns sharing one basis.
class Spline {
 public:
  Spline(const SplineBasis* basis, Eigen::MatrixXd values)
      : basis_(basis), values_(std::move(values)) {
    sig_.resizeLike(values_);
    for (int c = 0; c < values_.cols(); ++c)
      sig_.col(c) = basis_->second_derivs(values_.col(c));
  }

  double eval(int col, double xi) const {
    return basis_->eval(values_.col(col), sig_.col(col), xi);
  }

  Eigen::VectorXd eval_all(double xi) const {
    const auto c = basis_->coef(xi);
    if (basis_->size() == 1) return values_.row(0).transpose();
    return (c.a * values_.row(c.i) + c.b * values_.row(c.i + 1) +
            c.ca * sig_.row(c.i) + c.cb * sig_.row(c.i + 1))
        .transpose();
  }

  const Eigen::MatrixXd& values() const { return values_; }
  const SplineBasis& basis() const { return *basis_; }

 private:
  const SplineBasis* basis_;
  Eigen::MatrixXd values_;
  Eigen::MatrixXd sig_;
};

}  // namespace mevs
