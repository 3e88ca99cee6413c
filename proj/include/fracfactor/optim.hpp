#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fracfactor::optim {

using Objective = std::function<double(const Eigen::VectorXd&)>;
using Gradient = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using Residuals = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

enum class Status { kConverged, kMaxIterations, kLineSearchFailed };

struct Result {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  Status status = Status::kMaxIterations;
  /// Objective value after every accepted iteration (starting point first).
  std::vector<double> trace;
};

/// Central differences with step rel_step * (1 + |x_k|).
Eigen::VectorXd central_gradient(const Objective& f, const Eigen::VectorXd& x, double rel_step = 1e-5);

struct BfgsOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-5;
  double fd_step = 1e-5;
  /// Stops when an accepted step improves f by less than this (absolute).
  double value_tolerance = 0.0;
};

/// Minimizes f by BFGS with a backtracking Armijo line search.  When
/// `gradient` is empty, central differences of f are used.  Accepted steps
/// never increase f.
Result minimize_bfgs(const Objective& f, const Eigen::VectorXd& x0, const BfgsOptions& options = {},
                     const Gradient& gradient = {});

struct LmOptions {
  int max_iterations = 500;
  double tolerance = 1e-14;
  double fd_step = 1e-7;
};

/// Levenberg-Marquardt on 0.5 * ||r(x)||^2 with a forward-difference Jacobian.
/// `value` in the result is ||r||^2.
Result least_squares_lm(const Residuals& residuals, const Eigen::VectorXd& x0, const LmOptions& options = {});

/// Golden-section minimization of a unimodal scalar function on [lo, hi].
double golden_section(const std::function<double(double)>& f, double lo, double hi, double tolerance = 1e-8);

/// Evaluates f on an even grid of `points` values over [lo, hi], then
/// refines around the best grid value by golden section.
double grid_then_golden(const std::function<double(double)>& f, double lo, double hi, int points,
                        double tolerance = 1e-8);

}  // namespace fracfactor::optim
