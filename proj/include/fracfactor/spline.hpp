#pragma once

#include <Eigen/Dense>

namespace fracfactor {

/// Natural cubic interpolating spline on strictly increasing knots.
class CubicSpline {
 public:
  CubicSpline() = default;
  CubicSpline(Eigen::VectorXd knots, Eigen::VectorXd values);

  double operator()(double x) const;
  double derivative(double x) const;

  double lower() const { return knots_[0]; }
  double upper() const { return knots_[knots_.size() - 1]; }
  const Eigen::VectorXd& knots() const { return knots_; }
  const Eigen::VectorXd& values() const { return values_; }

 private:
  Eigen::Index segment(double x) const;

  Eigen::VectorXd knots_;
  Eigen::VectorXd values_;
  Eigen::VectorXd second_;  // second derivatives at the knots
};

}  // namespace fracfactor
