#pragma once

#include <vector>

#include <Eigen/Dense>

#include "fracfactor/statespace.hpp"

namespace fracfactor::detail {

// Each factor owns a chain of u states (x_t, ..., x_{t-u+1}); chains of one
// group are interleaved lag by lag.
struct FactorSlot {
  int offset = 0, stride = 1, pos = 0, u = 1;
  bool frac = false, ar = false, stationary_init = false;
  int frac_idx = -1, ar_idx = -1;
};

struct Layout {
  int s = 0;
  std::vector<FactorSlot> factors;
  int n_factors() const { return static_cast<int>(factors.size()); }
  int index(int j, int lag) const {
    const auto& f = factors[static_cast<std::size_t>(j)];
    return f.offset + lag * f.stride + f.pos;
  }
};

// Transition x_{t+1} = sum_k c_k x_{t+1-k} + zeta and signal f_t = m(L) x_t.
struct FactorDynamics {
  Eigen::VectorXd c;
  Eigen::VectorXd m;
};

Layout make_layout(const ModelSpec& spec);
/// d_override = NaN uses theta.d.
FactorDynamics factor_dynamics(const ModelSpec& spec, const Layout& L, const ModelParams& theta, const ApproxTable* table,
                               int j, double d_override, bool* projected);
std::vector<FactorDynamics> all_dynamics(const ModelSpec& spec, const Layout& L, const ModelParams& theta,
                                         const ApproxTable* table, bool* projected);
/// k x s: row j maps a unit loading on factor j to the pre-whitened signal.
Eigen::MatrixXd loading_basis(const Layout& L, const std::vector<FactorDynamics>& dyn, const Eigen::VectorXd& rho);
/// (p_i + 1) x s: row l holds the state weights of lambda_i' f_{t-l}.
Eigen::MatrixXd lag_weights(const Layout& L, const std::vector<FactorDynamics>& dyn, const Eigen::VectorXd& lambda_i, int p_i);
Eigen::MatrixXd companion_of(const Eigen::VectorXd& c);
Eigen::MatrixXd chain_initial_covariance(const FactorSlot& f, const Eigen::VectorXd& c);

}  // namespace fracfactor::detail
