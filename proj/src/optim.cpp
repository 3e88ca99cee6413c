#include "fracfactor/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fracfactor::optim {

Eigen::VectorXd central_gradient(const Objective& f, const Eigen::VectorXd& x, double rel_step) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = rel_step * (1.0 + std::abs(x[k]));
    xp[k] = x[k] + h;
    const double fp = f(xp);
    xp[k] = x[k] - h;
    const double fm = f(xp);
    xp[k] = x[k];
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Result minimize_bfgs(const Objective& f, const Eigen::VectorXd& x0, const BfgsOptions& options,
                     const Gradient& gradient) {
  const Eigen::Index n = x0.size();
  auto grad = [&](const Eigen::VectorXd& x) {
    return gradient ? gradient(x) : central_gradient(f, x, options.fd_step);
  };
  Result res;
  res.x = x0;
  res.value = f(x0);
  res.trace.push_back(res.value);
  if (n == 0) {
    res.status = Status::kConverged;
    return res;
  }
  Eigen::VectorXd g = grad(res.x);
  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(n, n);
  bool fresh_hessian = true;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    if (!g.allFinite()) {
      res.status = Status::kLineSearchFailed;
      return res;
    }
    if (g.norm() < options.gradient_tolerance) {
      res.status = Status::kConverged;
      return res;
    }
    Eigen::VectorXd dir = -Hinv * g;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      Hinv.setIdentity();
      dir = -g;
      slope = -g.squaredNorm();
      fresh_hessian = true;
    }
    // First step from an identity inverse Hessian: keep the move modest.
    double step = 1.0;
    if (fresh_hessian) step = std::min(1.0, 1.0 / std::max(1e-12, dir.norm()));
    double f_new = std::numeric_limits<double>::infinity();
    Eigen::VectorXd x_new;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = res.x + step * dir;
      f_new = f(x_new);
      if (std::isfinite(f_new) && f_new <= res.value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!fresh_hessian) {
        // Retry once along steepest descent before giving up.
        Hinv.setIdentity();
        fresh_hessian = true;
        continue;
      }
      res.status = Status::kLineSearchFailed;
      return res;
    }
    const Eigen::VectorXd g_new = grad(x_new);
    const Eigen::VectorXd s = x_new - res.x;
    const Eigen::VectorXd y = g_new - g;
    const double improvement = res.value - f_new;
    res.x = x_new;
    res.value = f_new;
    res.trace.push_back(f_new);
    res.iterations = iter + 1;
    g = g_new;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (fresh_hessian) Hinv *= sy / y.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      Hinv = (I - rho * s * y.transpose()) * Hinv * (I - rho * y * s.transpose()) + rho * s * s.transpose();
      fresh_hessian = false;
    }
    if (options.value_tolerance > 0.0 && improvement < options.value_tolerance) {
      res.status = Status::kConverged;
      return res;
    }
  }
  res.status = g.norm() < options.gradient_tolerance ? Status::kConverged : Status::kMaxIterations;
  return res;
}

Result least_squares_lm(const Residuals& residuals, const Eigen::VectorXd& x0, const LmOptions& options) {
  Result res;
  res.x = x0;
  Eigen::VectorXd r = residuals(res.x);
  res.value = r.squaredNorm();
  res.trace.push_back(res.value);
  const Eigen::Index n = x0.size();
  double lambda = 1e-3;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    Eigen::MatrixXd J(r.size(), n);
    Eigen::VectorXd xp = res.x;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double h = options.fd_step * (1.0 + std::abs(res.x[k]));
      xp[k] = res.x[k] + h;
      J.col(k) = (residuals(xp) - r) / h;
      xp[k] = res.x[k];
    }
    const Eigen::MatrixXd JtJ = J.transpose() * J;
    const Eigen::VectorXd Jtr = J.transpose() * r;
    if (Jtr.lpNorm<Eigen::Infinity>() < options.tolerance) {
      res.status = Status::kConverged;
      return res;
    }
    bool improved = false;
    for (int tries = 0; tries < 30; ++tries) {
      Eigen::MatrixXd A = JtJ;
      A.diagonal() += lambda * (JtJ.diagonal().array() + 1e-12).matrix();
      const Eigen::VectorXd delta = A.ldlt().solve(-Jtr);
      const Eigen::VectorXd x_new = res.x + delta;
      const Eigen::VectorXd r_new = residuals(x_new);
      const double v_new = r_new.squaredNorm();
      if (std::isfinite(v_new) && v_new < res.value) {
        const double rel = (res.value - v_new) / std::max(res.value, 1e-300);
        res.x = x_new;
        r = r_new;
        res.value = v_new;
        res.trace.push_back(v_new);
        res.iterations = iter + 1;
        lambda = std::max(lambda / 3.0, 1e-12);
        improved = true;
        if (rel < options.tolerance || delta.norm() < options.tolerance * (1.0 + res.x.norm())) {
          res.status = Status::kConverged;
          return res;
        }
        break;
      }
      lambda *= 4.0;
      if (lambda > 1e16) break;
    }
    if (!improved) {
      res.status = Status::kConverged;
      return res;
    }
  }
  res.status = Status::kMaxIterations;
  return res;
}

double golden_section(const std::function<double(double)>& f, double lo, double hi, double tolerance) {
  constexpr double kInvPhi = 0.6180339887498949;
  double a = lo, b = hi;
  double c = b - kInvPhi * (b - a);
  double d = a + kInvPhi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tolerance) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - kInvPhi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + kInvPhi * (b - a);
      fd = f(d);
    }
  }
  // Return the best evaluated interior point, or an endpoint if better.
  double best = fc < fd ? c : d;
  double fbest = std::min(fc, fd);
  const double flo = f(lo), fhi = f(hi);
  if (flo < fbest) {
    best = lo;
    fbest = flo;
  }
  if (fhi < fbest) best = hi;
  return best;
}

double grid_then_golden(const std::function<double(double)>& f, double lo, double hi, int points,
                        double tolerance) {
  points = std::max(points, 3);
  const double step = (hi - lo) / (points - 1);
  int best = 0;
  double fbest = std::numeric_limits<double>::infinity();
  for (int k = 0; k < points; ++k) {
    const double v = f(lo + k * step);
    if (v < fbest) {
      fbest = v;
      best = k;
    }
  }
  const double a = std::max(lo, lo + (best - 1) * step);
  const double b = std::min(hi, lo + (best + 1) * step);
  const double x = golden_section(f, a, b, tolerance);
  return f(x) <= fbest ? x : lo + best * step;
}

}  // namespace fracfactor::optim
