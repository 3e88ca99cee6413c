#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "fracfactor/statespace.hpp"

namespace fracfactor {

struct Simulation {
  Eigen::MatrixXd y;        // T x N panel (levels for DFFD)
  Eigen::MatrixXd factors;  // T x k
  Eigen::MatrixXd states;   // T x s; empty unless drawn from a state-space system
  Eigen::MatrixXd lambda;   // N x k loadings used
};

/// y = Lambda f + e with (1 - L)^d f_j = z_j (zero pre-sample), all shocks
/// and loadings standard normal.
Simulation simulate_pc_dgp(int N, int T, double d, int r, std::uint64_t seed);

/// Draws from the family's model with exact truncated fractional
/// integration (no ARMA approximation).  Short-memory parts get a burn-in.
Simulation simulate_exact(const ModelSpec& spec, const ModelParams& theta, int T, std::uint64_t seed);

/// Draws from an assembled system: alpha_1 ~ N(a1, P1), innovations
/// N(0, Q) and N(0, H), then re-colours the idiosyncratic part (and
/// cumulates for DFFD) so that y is on the scale the model is fitted on.
Simulation simulate_system(const StateSpaceSystem& sys, int T, std::uint64_t seed);

/// Illustrative parameters for a spec: standard normal loadings under the
/// identification mask, moderate persistence, unit noise.
ModelParams example_params(const ModelSpec& spec, std::uint64_t seed);

}  // namespace fracfactor
