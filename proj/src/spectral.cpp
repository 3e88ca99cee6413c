#include "fracfactor/spectral.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/optim.hpp"

namespace fracfactor {

namespace {

// Periodogram ordinates at lambda_j = 2 pi j / T, j = 1..m.
Eigen::VectorXd periodogram(const Eigen::VectorXd& x, int m) {
  const Eigen::Index T = x.size();
  Eigen::VectorXd out(m);
  for (int j = 1; j <= m; ++j) {
    const double lambda = 2.0 * std::numbers::pi * j / static_cast<double>(T);
    // Rotate a unit phasor instead of calling sin/cos per sample, with a
    // periodic exact reset to bound the drift.
    const std::complex<double> step(std::cos(lambda), std::sin(lambda));
    std::complex<double> phase(1.0, 0.0), acc(0.0, 0.0);
    for (Eigen::Index t = 0; t < T; ++t) {
      if ((t & 63) == 0) phase = std::polar(1.0, lambda * static_cast<double>(t));
      acc += x[t] * phase;
      phase *= step;
    }
    out[j - 1] = std::norm(acc) / (2.0 * std::numbers::pi * static_cast<double>(T));
  }
  return out;
}

void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index idx = 0;
  v.cwiseAbs().maxCoeff(&idx);
  if (v[idx] < 0.0) v = -v;
}

}  // namespace

double elw_objective(const Eigen::Ref<const Eigen::VectorXd>& series, double d, int m) {
  const Eigen::Index T = series.size();
  const Eigen::VectorXd I = periodogram(frac_diff(series, d), m);
  double mean_log_lambda = 0.0;
  for (int j = 1; j <= m; ++j) mean_log_lambda += std::log(2.0 * std::numbers::pi * j / static_cast<double>(T));
  mean_log_lambda /= m;
  return std::log(I.mean()) - 2.0 * d * mean_log_lambda;
}

double elw_estimate(const Eigen::Ref<const Eigen::VectorXd>& series, double alpha) {
  const Eigen::Index T = series.size();
  if (T < 64) throw std::invalid_argument(fmt::format("elw_estimate: need T >= 64, got {}", T));
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("elw_estimate: alpha must lie in (0, 1)");
  if (!series.allFinite()) throw DataError("elw_estimate: non-finite value in series");
  if (series.maxCoeff() - series.minCoeff() <= 1e-12 * std::max(1.0, series.cwiseAbs().maxCoeff()))
    throw DataError("elw_estimate: constant series");
  const int m = static_cast<int>(std::floor(std::pow(static_cast<double>(T), alpha)));
  const Eigen::VectorXd x = series;
  auto R = [&](double d) { return elw_objective(x, d, m); };
  return optim::grid_then_golden(R, -0.5, 2.5, 31, 1e-6);
}

Eigen::MatrixXd averaged_periodogram(const Eigen::Ref<const Eigen::MatrixXd>& x, int m) {
  const Eigen::Index T = x.rows(), k = x.cols();
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(k, k);
  for (int j = 1; j <= m; ++j) {
    const double lambda = 2.0 * std::numbers::pi * j / static_cast<double>(T);
    Eigen::VectorXd re = Eigen::VectorXd::Zero(k), im = Eigen::VectorXd::Zero(k);
    for (Eigen::Index t = 0; t < T; ++t) {
      const double a = lambda * static_cast<double>(t);
      re += std::cos(a) * x.row(t).transpose();
      im += std::sin(a) * x.row(t).transpose();
    }
    // Re(w w^*) = re re' + im im'.
    P += re * re.transpose() + im * im.transpose();
  }
  return P / (2.0 * std::numbers::pi * static_cast<double>(T) * m);
}

SubspaceSplit subspace_split(const Eigen::Ref<const Eigen::MatrixXd>& factors, int m, int r1, std::optional<int> r2) {
  const Eigen::Index T = factors.rows();
  const int k = static_cast<int>(factors.cols());
  if (m <= 0) m = static_cast<int>(std::floor(std::pow(static_cast<double>(T), 0.65)));
  if (r1 < 1 || r1 >= k) throw std::invalid_argument(fmt::format("subspace_split: need 1 <= r1 < k, got r1={} k={}", r1, k));
  if (2 * m >= T) throw std::invalid_argument(fmt::format("subspace_split: m = {} must be below T/2", m));
  const int n_short = r2.value_or(k - r1);
  if (n_short < 0 || r1 + n_short > k) throw std::invalid_argument("subspace_split: r1 + r2 exceeds k");

  const Eigen::MatrixXd P = averaged_periodogram(factors, m);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(P);
  if (es.info() != Eigen::Success) throw EstimationError("subspace_split: eigendecomposition failed");
  const Eigen::VectorXd ev = es.eigenvalues().reverse();
  if (!(ev[k - 1] > 1e-12 * ev[0])) throw EstimationError("subspace_split: averaged periodogram is rank deficient");
  const Eigen::MatrixXd V = es.eigenvectors().rowwise().reverse();

  SubspaceSplit out;
  out.m = m;
  out.eigenvalues = ev;
  out.frac_basis = V.leftCols(r1);
  out.short_basis = V.middleCols(r1, n_short);
  for (int c = 0; c < r1; ++c) fix_sign(out.frac_basis.col(c));
  for (int c = 0; c < n_short; ++c) fix_sign(out.short_basis.col(c));
  return out;
}

}  // namespace fracfactor
