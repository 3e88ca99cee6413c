#pragma once

#include <optional>

#include <Eigen/Dense>

namespace fracfactor {

/// Exact local Whittle estimate of the integration order with bandwidth
/// m = floor(T^alpha), searched over [-0.5, 2.5].  Throws DataError for a
/// constant series and std::invalid_argument for T < 64 or alpha outside
/// (0, 1).
double elw_estimate(const Eigen::Ref<const Eigen::VectorXd>& series, double alpha = 0.5);

/// The ELW objective R(d) itself.
double elw_objective(const Eigen::Ref<const Eigen::VectorXd>& series, double d, int m);

struct SubspaceSplit {
  Eigen::MatrixXd frac_basis;   // k x r1
  Eigen::MatrixXd short_basis;  // k x r2
  int m = 0;
  Eigen::VectorXd eigenvalues;  // descending
};

/// Real part of (1/m) sum_{j=1}^{m} w(lambda_j) w(lambda_j)^* with
/// w(lambda) = (2 pi T)^{-1/2} sum_t x_t e^{i lambda t}.
Eigen::MatrixXd averaged_periodogram(const Eigen::Ref<const Eigen::MatrixXd>& x, int m);

/// Eigenvectors of the averaged periodogram: the r1 leading ones span the
/// fractional subspace, the next r2 (default k - r1) the short-memory one.
/// m <= 0 selects floor(T^0.65).  Each eigenvector has its largest-magnitude
/// entry positive.
SubspaceSplit subspace_split(const Eigen::Ref<const Eigen::MatrixXd>& factors, int m, int r1,
                             std::optional<int> r2 = std::nullopt);

}  // namespace fracfactor
