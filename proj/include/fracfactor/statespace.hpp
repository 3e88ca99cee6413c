#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fracfactor/longmem.hpp"

namespace fracfactor {

enum class Family { kDffm, kDofc, kDffd };

std::string family_name(Family f);
Family parse_family(const std::string& name);

struct ModelSpec {
  Family family = Family::kDffd;
  int r = 1;           // DFFM, DFFD
  int r1 = 0, r2 = 0;  // DOFC: fractional and short-memory factor counts
  int p = 1;           // AR order of the (short-memory part of the) factors
  std::vector<int> p_i;  // idiosyncratic AR orders, one per series
  ApproxSpec approx;     // (5,0) for DFFM, (4,4) for DOFC; unused for DFFD
  Eigen::VectorXd d_star;  // DFFD pre-differencing orders

  int n_series() const { return static_cast<int>(p_i.size()); }
  int n_factors() const { return family == Family::kDofc ? r1 + r2 : r; }
  int n_frac() const;  // factors carrying an integration order
  int n_ar() const;    // factors carrying AR coefficients
  int max_p_i() const;
  void validate() const;

  static ModelSpec dffm(int r, int p, std::vector<int> p_i, int T);
  static ModelSpec dofc(int r1, int r2, int p, std::vector<int> p_i, int T);
  static ModelSpec dffd(int r, int p, Eigen::VectorXd d_star);
};

/// theta.  Factors are ordered as the columns of `lambda`: for DOFC the r1
/// fractional factors come first.
struct ModelParams {
  Eigen::VectorXd d;            // n_frac
  Eigen::MatrixXd B;            // n_ar x p, rows belong to the AR factors in order
  Eigen::MatrixXd lambda;       // N x n_factors
  Eigen::MatrixXi lambda_free;  // N x n_factors, 1 = estimated, 0 = fixed at its value
  std::vector<Eigen::VectorXd> rho;  // N, length p_i each
  Eigen::VectorXd H;            // N

  void validate(const ModelSpec& spec) const;
};

/// First `rows` rows of an N x r mask lower triangular, the rest free.
Eigen::MatrixXi lower_triangular_mask(int N, int r, int rows);

/// DOFC mask: series are split by rank of `d_hat` into r1 equally sized
/// blocks of ascending persistence; block b loads on fractional factors
/// 0..b.  The short-memory block is lower triangular in its first r2 rows.
Eigen::MatrixXi dofc_mask(const Eigen::Ref<const Eigen::VectorXd>& d_hat, int r1, int r2);

struct StateSpaceSystem {
  Eigen::MatrixXd Z;     // N x s
  Eigen::MatrixXd Tmat;  // s x s
  Eigen::MatrixXd R;     // s x q
  Eigen::VectorXd H;     // N
  Eigen::MatrixXd Q;     // q x q, identity
  Eigen::VectorXd a1;
  Eigen::MatrixXd P1;
  /// k x s: factor values f_t = F alpha_t.
  Eigen::MatrixXd F;
  ModelSpec spec;
  ModelParams theta;
  /// True when an approximation polynomial had to be pulled inside the
  /// stable region.
  bool approx_projected = false;

  int states() const { return static_cast<int>(Tmat.rows()); }
};

/// y~_{i,t} = y_{i,t} - sum_j rho_{i,j} y_{i,t-j} with zero pre-sample.
Eigen::MatrixXd prewhiten_obs(const Eigen::Ref<const Eigen::MatrixXd>& y, const std::vector<Eigen::VectorXd>& rho);

StateSpaceSystem build_dffm(const ModelSpec& spec, const ModelParams& theta, const ApproxTable& table);
StateSpaceSystem build_dofc(const ModelSpec& spec, const ModelParams& theta, const ApproxTable& table);
StateSpaceSystem build_dffd(const ModelSpec& spec, const ModelParams& theta);
/// Dispatches on spec.family; `table` may be null for DFFD.
StateSpaceSystem build_system(const ModelSpec& spec, const ModelParams& theta, const ApproxTable* table);

/// The series the model describes before pre-whitening: y itself for DFFM
/// and DOFC, Delta^{d*} y for DFFD.
Eigen::MatrixXd model_observations(const ModelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& y);

/// Pre-whitened observations fed to the filter.
Eigen::MatrixXd filter_data(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& x);

/// Solves P = T P T' + Q by doubling.
Eigen::MatrixXd stationary_covariance(const Eigen::Ref<const Eigen::MatrixXd>& T, const Eigen::Ref<const Eigen::MatrixXd>& Q);

struct SmootherOutput {
  Eigen::MatrixXd a_filt;   // T x s, a_{t|t}
  Eigen::MatrixXd a_pred;   // T x s, a_{t|t-1}
  Eigen::MatrixXd a_smooth; // T x s
  std::vector<Eigen::MatrixXd> P_filt;
  std::vector<Eigen::MatrixXd> P_smooth;
  /// P_lag1[t] = Cov(alpha_{t+1}, alpha_t | Y) for t < T-1; the last entry is zero.
  std::vector<Eigen::MatrixXd> P_lag1;
  Eigen::MatrixXd eps_smooth;  // T x N
  Eigen::MatrixXd eps_var;     // T x N, diagonal variances
  Eigen::MatrixXd eta_smooth;  // T x q
  std::vector<Eigen::MatrixXd> eta_var;
  double loglik = 0.0;
};

/// Log-likelihood by prediction-error decomposition (forward pass only).
double kalman_loglik(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& data);

/// Filter, fixed-interval state smoother and disturbance smoother.
/// `data` is the pre-whitened T x N panel.  Throws EstimationError naming t
/// when an innovation covariance is not positive definite.
SmootherOutput kalman_filter_smoother(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& data);

struct EmResult {
  ModelParams theta;
  std::vector<double> loglik_trace;  // loglik before each iteration and after the last
  bool numerical_failure = false;    // some step lowered the loglik by more than 1e-8
};

/// ECM iterations on x = model_observations(spec, y).
EmResult em_iterate(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                    const ApproxTable* table, int iters);

/// Unconstrained coordinates of theta: d via a logistic map onto the table
/// range, AR polynomials via tanh partial autocorrelations, H via log,
/// free loadings as they are.
Eigen::VectorXd pack_params(const ModelSpec& spec, const ModelParams& theta, const ApproxTable* table);
ModelParams unpack_params(const ModelSpec& spec, const ModelParams& shape, const Eigen::Ref<const Eigen::VectorXd>& x,
                          const ApproxTable* table);

/// Expected complete-data log-likelihood Q(theta | smoother output).
double expected_loglik(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                       const ApproxTable* table, const SmootherOutput& sm);

/// Gradient of the log-likelihood in pack_params coordinates, obtained as the
/// gradient of Q(theta' | theta) at theta' = theta.
Eigen::VectorXd loglik_score(const ModelSpec& spec, const ModelParams& shape, const Eigen::Ref<const Eigen::VectorXd>& packed,
                             const Eigen::Ref<const Eigen::MatrixXd>& x, const ApproxTable* table);

enum class MlStatus { kConverged, kMaxIterations, kLineSearchFailed };

struct MlResult {
  ModelParams theta;
  double loglik = 0.0;
  double em_loglik = 0.0;
  MlStatus status = MlStatus::kConverged;
  std::vector<double> em_trace;
  std::vector<double> bfgs_trace;
};

/// EM warm start followed by BFGS on the exact likelihood.  The gradient is
/// the central difference of Q(theta' | theta) at theta' = theta, which
/// equals the score.
MlResult fit_ml(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                const ApproxTable* table, int em_iters, int max_bfgs_iters);

/// State forecasts T^k a_{T|T}, k = 1..h (rows).
Eigen::MatrixXd forecast_states(const Eigen::Ref<const Eigen::MatrixXd>& Tmat, const Eigen::Ref<const Eigen::VectorXd>& a_T, int h);

/// Level forecasts for k = 1..h given the observed history y (T x N, the
/// same scale the model was fitted on).  Undoes pre-whitening (DFFM, DOFC)
/// or the fractional pre-difference (DFFD).
Eigen::MatrixXd forecast_h(const StateSpaceSystem& sys, const SmootherOutput& sm, const Eigen::Ref<const Eigen::MatrixXd>& y,
                           int h);

nlohmann::json params_to_json(const ModelSpec& spec, const ModelParams& theta);
std::pair<ModelSpec, ModelParams> params_from_json(const nlohmann::json& j);

}  // namespace fracfactor
