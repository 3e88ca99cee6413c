#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fracfactor/spline.hpp"

namespace fracfactor {

/// ARMA(v, w) approximation of the truncated cumulation operator for a
/// given sample length.
struct ApproxSpec {
  int v = 4;
  int w = 4;
  int T = 500;
  Eigen::VectorXd grid;

  /// b = 0, 0.05, ..., 1.5.
  static Eigen::VectorXd default_grid();
  static ApproxSpec arma44(int T);
  static ApproxSpec ar5(int T);

  void validate() const;
};

struct ApproxTable {
  ApproxSpec spec;
  Eigen::MatrixXd coeffs;  // G x (v + w): a_1..a_v, m_1..m_w
  Eigen::VectorXd losses;
  std::vector<CubicSpline> splines;  // one per coefficient

  double lower() const { return spec.grid[0]; }
  double upper() const { return spec.grid[spec.grid.size() - 1]; }

  /// Rebuilds `splines` from `coeffs`.
  void build_splines();
};

/// Wold coefficients of m(L) / a(L) with a(L) = 1 - sum a_k L^k and
/// m(L) = 1 + sum m_k L^k.  Throws std::domain_error for an unstable a.
Eigen::VectorXd arma_wold(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& m,
                          int n);

/// (1/T) sum_{t=1}^{T} sum_{j<t} (psi_j - pi_j(-b))^2 where psi is the Wold
/// sequence of the ARMA filter.  params = (a_1..a_v, m_1..m_w).
double approx_loss(const Eigen::Ref<const Eigen::VectorXd>& params, int v, double b, int T);

/// Fits every grid point (warm-started along the grid) and splines the
/// coefficients in b.  Throws EstimationError naming b on persistent failure.
ApproxTable fit_table(const ApproxSpec& spec);

/// Spline-evaluated coefficients at b.  Roots of the AR part are pulled
/// inside the stable region when needed; `projected` reports that event.
/// Throws std::out_of_range when b leaves the grid range.
Eigen::VectorXd eval_approx(const ApproxTable& table, double b, bool* projected = nullptr);

/// Analytic derivative of the spline coefficients in b.
Eigen::VectorXd eval_approx_derivative(const ApproxTable& table, double b);

std::string approx_cache_key(const ApproxSpec& spec);

void save_table(const ApproxTable& table, const std::filesystem::path& path);
ApproxTable load_table(const std::filesystem::path& path);

/// Loads `<dir>/<cache key>.json` when present and matching, otherwise fits
/// and writes it.  An empty dir disables caching.
ApproxTable cached_table(const ApproxSpec& spec, const std::filesystem::path& dir);

}  // namespace fracfactor
