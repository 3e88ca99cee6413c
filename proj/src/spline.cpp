#include "fracfactor/spline.hpp"

#include <algorithm>
#include <stdexcept>

namespace fracfactor {

CubicSpline::CubicSpline(Eigen::VectorXd knots, Eigen::VectorXd values)
    : knots_(std::move(knots)), values_(std::move(values)) {
  const Eigen::Index n = knots_.size();
  if (n < 2 || values_.size() != n) throw std::invalid_argument("CubicSpline: need >= 2 knots and matching values");
  for (Eigen::Index i = 1; i < n; ++i) {
    if (!(knots_[i] > knots_[i - 1])) throw std::invalid_argument("CubicSpline: knots must be strictly increasing");
  }
  second_ = Eigen::VectorXd::Zero(n);
  if (n == 2) return;
  // Tridiagonal system for interior second derivatives (Thomas algorithm).
  const Eigen::Index m = n - 2;
  Eigen::VectorXd diag(m), upper(m), rhs(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index i = k + 1;
    const double h0 = knots_[i] - knots_[i - 1];
    const double h1 = knots_[i + 1] - knots_[i];
    diag[k] = 2.0 * (h0 + h1);
    upper[k] = h1;
    rhs[k] = 6.0 * ((values_[i + 1] - values_[i]) / h1 - (values_[i] - values_[i - 1]) / h0);
  }
  for (Eigen::Index k = 1; k < m; ++k) {
    const double lower = knots_[k + 1] - knots_[k];
    const double w = lower / diag[k - 1];
    diag[k] -= w * upper[k - 1];
    rhs[k] -= w * rhs[k - 1];
  }
  Eigen::VectorXd sol(m);
  sol[m - 1] = rhs[m - 1] / diag[m - 1];
  for (Eigen::Index k = m - 2; k >= 0; --k) sol[k] = (rhs[k] - upper[k] * sol[k + 1]) / diag[k];
  second_.segment(1, m) = sol;
}

Eigen::Index CubicSpline::segment(double x) const {
  const auto* begin = knots_.data();
  const auto* end = begin + knots_.size();
  auto it = std::upper_bound(begin, end, x);
  Eigen::Index i = static_cast<Eigen::Index>(it - begin) - 1;
  return std::clamp<Eigen::Index>(i, 0, knots_.size() - 2);
}

double CubicSpline::operator()(double x) const {
  const Eigen::Index i = segment(x);
  const double h = knots_[i + 1] - knots_[i];
  const double a = (knots_[i + 1] - x) / h;
  const double b = (x - knots_[i]) / h;
  return a * values_[i] + b * values_[i + 1] +
         ((a * a * a - a) * second_[i] + (b * b * b - b) * second_[i + 1]) * h * h / 6.0;
}

double CubicSpline::derivative(double x) const {
  const Eigen::Index i = segment(x);
  const double h = knots_[i + 1] - knots_[i];
  const double a = (knots_[i + 1] - x) / h;
  const double b = (x - knots_[i]) / h;
  return (values_[i + 1] - values_[i]) / h - (3.0 * a * a - 1.0) / 6.0 * h * second_[i] +
         (3.0 * b * b - 1.0) / 6.0 * h * second_[i + 1];
}

}  // namespace fracfactor
