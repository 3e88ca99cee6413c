#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fracfactor {

/// Coefficients pi_0..pi_{n-1} of the binomial expansion of (1 - L)^d.
struct FracCoeffs {
  double d = 0.0;
  Eigen::VectorXd coeffs;
};

/// pi_0 = 1, pi_j = pi_{j-1} (j - d - 1) / j.  Negative d gives the
/// cumulation weights.  Throws std::invalid_argument for n == 0 or a
/// non-finite d.
FracCoeffs frac_coeffs(double d, std::size_t n);

/// Type II (truncated) fractional difference:
///   out[t] = sum_{j=0}^{t} pi_j(d) x[t - j],
/// i.e. all pre-sample values are zero.
Eigen::VectorXd frac_diff(const Eigen::Ref<const Eigen::VectorXd>& x, double d);

/// Inverse of frac_diff under truncation; identical to frac_diff(x, -d).
Eigen::VectorXd frac_cumulate(const Eigen::Ref<const Eigen::VectorXd>& x, double d);

/// Column-wise frac_diff with a separate order per column.
Eigen::MatrixXd frac_diff_columns(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                  const Eigen::Ref<const Eigen::VectorXd>& d);

/// Truncated linear convolution: out[t] = sum_{j=0}^{t} w[j] x[t - j] for
/// t < x.size().  `w` must be at least as long as `x`.
Eigen::VectorXd truncated_convolve(const Eigen::Ref<const Eigen::VectorXd>& w,
                                   const Eigen::Ref<const Eigen::VectorXd>& x);

enum class TransformCode : int { kNone = 1, kLog = 2 };

/// T x N observation panel.  Rows are periods.
struct Panel {
  Eigen::MatrixXd values;
  std::vector<std::string> names;
  std::vector<int> transform_codes;
  std::optional<Eigen::VectorXd> est_orders;
  /// Integer pre-differencing orders for the PC/PCAR benchmarks.
  std::optional<std::vector<int>> diff_codes;
  std::vector<double> period_index;

  Eigen::Index periods() const { return values.rows(); }
  Eigen::Index series() const { return values.cols(); }

  /// Checks shapes, finiteness and monotone periods.  Throws DataError.
  void validate() const;

  /// Rows [begin, end) with all metadata.
  Panel slice_rows(Eigen::Index begin, Eigen::Index end) const;
};

/// Applies transform codes (2 = natural log) and optionally removes an
/// intercept and linear trend per series by OLS.
Panel apply_transforms(const Panel& panel, bool detrend);

}  // namespace fracfactor
