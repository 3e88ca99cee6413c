#include "fracfactor/polynomial.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include <Eigen/Eigenvalues>

namespace fracfactor {

namespace {

// Step-down recursion; returns false as soon as a reflection coefficient
// leaves (-1, 1).
bool step_down(const Eigen::Ref<const Eigen::VectorXd>& a, Eigen::VectorXd* pacf) {
  Eigen::VectorXd phi = a;
  const Eigen::Index p = a.size();
  if (pacf) pacf->resize(p);
  for (Eigen::Index k = p; k >= 1; --k) {
    const double kappa = phi[k - 1];
    if (!std::isfinite(kappa) || std::abs(kappa) >= 1.0) return false;
    if (pacf) (*pacf)[k - 1] = kappa;
    if (k == 1) break;
    Eigen::VectorXd next(k - 1);
    const double denom = 1.0 - kappa * kappa;
    for (Eigen::Index j = 0; j < k - 1; ++j) next[j] = (phi[j] + kappa * phi[k - 2 - j]) / denom;
    phi = next;
  }
  return true;
}

Eigen::MatrixXd companion(const Eigen::Ref<const Eigen::VectorXd>& a) {
  const Eigen::Index p = a.size();
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(p, p);
  c.row(0) = a.transpose();
  if (p > 1) c.bottomLeftCorner(p - 1, p - 1).setIdentity();
  return c;
}

}  // namespace

bool ar_is_stable(const Eigen::Ref<const Eigen::VectorXd>& a) { return step_down(a, nullptr); }

Eigen::VectorXd ar_to_pacf(const Eigen::Ref<const Eigen::VectorXd>& a) {
  Eigen::VectorXd pacf;
  if (!step_down(a, &pacf)) throw std::domain_error("ar_to_pacf: AR polynomial is not stable");
  return pacf;
}

Eigen::VectorXd pacf_to_ar(const Eigen::Ref<const Eigen::VectorXd>& pacf) {
  Eigen::VectorXd phi(0);
  for (Eigen::Index k = 0; k < pacf.size(); ++k) {
    Eigen::VectorXd next(k + 1);
    for (Eigen::Index j = 0; j < k; ++j) next[j] = phi[j] - pacf[k] * phi[k - 1 - j];
    next[k] = pacf[k];
    phi = next;
  }
  return phi;
}

Eigen::VectorXd ar_from_unconstrained(const Eigen::Ref<const Eigen::VectorXd>& x) {
  return pacf_to_ar(x.array().tanh().matrix());
}

Eigen::VectorXd ar_to_unconstrained(const Eigen::Ref<const Eigen::VectorXd>& a) {
  Eigen::VectorXd pacf = ar_to_pacf(a);
  // atanh diverges at the boundary; keep the coordinate finite.
  constexpr double kEdge = 1.0 - 1e-12;
  return pacf.array().max(-kEdge).min(kEdge).atanh().matrix();
}

Eigen::VectorXd project_stable_ar(const Eigen::Ref<const Eigen::VectorXd>& a, double max_modulus,
                                  bool* projected) {
  if (projected) *projected = false;
  if (a.size() == 0) return a;
  Eigen::EigenSolver<Eigen::MatrixXd> es(companion(a), false);
  Eigen::VectorXcd roots = es.eigenvalues();
  bool moved = false;
  for (Eigen::Index i = 0; i < roots.size(); ++i) {
    const double mod = std::abs(roots[i]);
    if (mod > max_modulus) {
      roots[i] *= max_modulus / mod;
      moved = true;
    }
  }
  if (!moved && ar_is_stable(a)) return a;
  // prod_i (z - lambda_i) = z^p - a_1 z^{p-1} - ... - a_p
  std::vector<std::complex<double>> poly{1.0};
  for (Eigen::Index i = 0; i < roots.size(); ++i) {
    std::vector<std::complex<double>> next(poly.size() + 1, 0.0);
    for (std::size_t k = 0; k < poly.size(); ++k) {
      next[k] += poly[k];
      next[k + 1] -= poly[k] * roots[i];
    }
    poly = std::move(next);
  }
  Eigen::VectorXd out(a.size());
  for (Eigen::Index k = 0; k < a.size(); ++k) out[k] = -poly[static_cast<std::size_t>(k + 1)].real();
  if (projected) *projected = true;
  return out;
}

Eigen::VectorXd poly_multiply(const Eigen::Ref<const Eigen::VectorXd>& a,
                              const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() == 0 || b.size() == 0) return Eigen::VectorXd(0);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(a.size() + b.size() - 1);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    for (Eigen::Index j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  }
  return out;
}

double spectral_radius(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  if (m.size() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace fracfactor
