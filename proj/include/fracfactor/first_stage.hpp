#pragma once

#include <vector>

#include <Eigen/Dense>

namespace fracfactor {

/// Rescaled principal components of a T x N panel.
struct FactorEstimate {
  Eigen::MatrixXd factors;   // T x k, f_hat
  Eigen::MatrixXd loadings;  // N x k, Lambda_hat
  double scale_d = 0.0;
  Eigen::VectorXd explained;  // eigenvalue shares of the k components
};

/// f~ = T^d U with U the k leading eigenvectors of y y';
/// f_hat = N^{-1} y y' f~ T^{-2d} and Lambda_hat chosen so that
/// f_hat Lambda_hat' = f~ Lambda~' with Lambda~' = T^{-2d} f~' y.
/// Each factor is signed so its largest-magnitude loading is positive.
/// Throws EstimationError for k too large or a rank-deficient panel.
FactorEstimate pc_extract(const Eigen::Ref<const Eigen::MatrixXd>& y, int k, double d);

/// Residuals of every column of y after OLS on the columns of f.
Eigen::MatrixXd project_out(const Eigen::Ref<const Eigen::MatrixXd>& y, const Eigen::Ref<const Eigen::MatrixXd>& f);

struct PersistenceGroup {
  std::vector<int> series;  // column indices into the panel
  int k = 1;                // factors to extract from this block
  double d = 0.0;           // rescaling order for pc_extract
};

/// Groups ordered most persistent first.  Block b is the panel restricted to
/// its own series plus the residuals carried over from block b - 1 after its
/// factors were projected out.  Throws std::invalid_argument for an empty
/// group.
std::vector<FactorEstimate> pc_block_iterative(const Eigen::Ref<const Eigen::MatrixXd>& y,
                                               const std::vector<PersistenceGroup>& groups);

/// Sorts the estimated orders in decreasing order and cuts wherever
/// consecutive values differ by more than `gap`.  Each group records the
/// mean order of its members.
std::vector<PersistenceGroup> persistence_groups(const Eigen::Ref<const Eigen::VectorXd>& d_hat, double gap = 0.25);

/// Mean squared residual after removing k principal components.
Eigen::VectorXd pc_residual_variances(const Eigen::Ref<const Eigen::MatrixXd>& y, int kmax);

/// PC_p3 information criterion over k = 1..kmax.
int select_num_factors(const Eigen::Ref<const Eigen::MatrixXd>& y, int kmax);

struct Decorrelated {
  Eigen::MatrixXd factors;   // T x r, whitened and rotated
  Eigen::MatrixXd rotation;  // r x r orthogonal rotation of the whitened factors
  Eigen::MatrixXd transform; // r x r, factors = input * transform
};

/// Whitens with the uncentred second moment, then rotates so the lag-1
/// cross-moments between components are as small as possible in the sum of
/// squares sense (eigenvectors of the symmetrised lag-1 moment).  Components
/// are ordered by decreasing lag-1 moment.
Decorrelated decorrelate(const Eigen::Ref<const Eigen::MatrixXd>& factors);

struct ArfiParams {
  Eigen::VectorXd d;       // r
  Eigen::MatrixXd ar;      // r x p
  Eigen::VectorXd q_diag;  // r
  /// Per factor: profiled log-likelihood after each optimizer iteration.
  std::vector<std::vector<double>> traces;
};

/// Residuals B(L) Delta^d f with zero pre-sample values.
Eigen::VectorXd arfi_residuals(const Eigen::Ref<const Eigen::VectorXd>& f, double d,
                               const Eigen::Ref<const Eigen::VectorXd>& b);

/// -(T/2) log sigma^2(d, b) for one factor.
double arfi_profile_loglik(const Eigen::Ref<const Eigen::VectorXd>& f, double d, const Eigen::Ref<const Eigen::VectorXd>& b);

/// Factor-by-factor maximisation of the profiled likelihood over
/// d in [0, 2.5] and stable AR(p).
ArfiParams fit_arfi_profile(const Eigen::Ref<const Eigen::MatrixXd>& factors, int p);

enum class InfoCriterion { kBic, kAic };

struct ArFit {
  Eigen::VectorXd coeffs;  // a_1..a_p
  double sigma2 = 0.0;
  int order = 0;
};

/// No-intercept OLS AR fits for p = 0..pmax on the common sample
/// t = pmax..T-1, choosing the best stable order by the criterion.  For
/// pmax = 0 the variance is the mean square about zero.
ArFit fit_ar(const Eigen::Ref<const Eigen::VectorXd>& series, int pmax, InfoCriterion criterion);

struct OlsLoadings {
  Eigen::MatrixXd loadings;   // N x r
  Eigen::MatrixXd residuals;  // T x N
};

OlsLoadings ols_loadings(const Eigen::Ref<const Eigen::MatrixXd>& y, const Eigen::Ref<const Eigen::MatrixXd>& factors);

}  // namespace fracfactor
