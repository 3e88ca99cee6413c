#pragma once

#include <Eigen/Dense>

#include "fracfactor/first_stage.hpp"
#include "fracfactor/longmem.hpp"
#include "fracfactor/statespace.hpp"

namespace fracfactor {

struct SeedOptions {
  int r = 1;          // DFFM, DFFD
  int r1 = 1, r2 = 0; // DOFC
  int p = 1;          // factor AR order
  int pmax_idio = 4;  // largest idiosyncratic AR order tried by BIC
  double elw_alpha = 0.5;
  double group_gap = 0.25;
};

struct SeedResult {
  ModelSpec spec;
  ModelParams theta;
  Eigen::VectorXd d_hat;    // per-series ELW estimates
  Eigen::MatrixXd factors;  // T x k first-stage factors, unit innovation scale
};

/// Splits r factors over persistence groups: adjacent groups with the
/// closest mean order are merged until there are at most r, then every
/// group gets one factor and the rest go out in proportion to group size.
std::vector<PersistenceGroup> allocate_factors(std::vector<PersistenceGroup> groups, int r);

/// First-stage estimates arranged as starting values for the state-space
/// stage.  `y` is the panel on the scale the model is fitted on (levels for
/// all three families).  `table` supplies the admissible range of d and the
/// approximation spec stored in the returned ModelSpec; it may be null for
/// DFFD.
SeedResult seed_model(Family family, const Eigen::Ref<const Eigen::MatrixXd>& y, const SeedOptions& options,
                      const ApproxTable* table);

struct TwoStageResult {
  SeedResult seed;
  MlResult ml;
  StateSpaceSystem system;
  SmootherOutput smoother;
  Eigen::MatrixXd factors;  // T x k smoothed factors
};

/// Seeds, runs EM then BFGS, and smooths at the estimate.
TwoStageResult fit_two_stage(Family family, const Eigen::Ref<const Eigen::MatrixXd>& y, const SeedOptions& options,
                             const ApproxTable* table, int em_iters, int max_bfgs_iters);

/// Smoothed factors F a_{t|T}.
Eigen::MatrixXd smoothed_factors(const StateSpaceSystem& sys, const SmootherOutput& sm);

}  // namespace fracfactor
