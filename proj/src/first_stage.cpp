#include "fracfactor/first_stage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/optim.hpp"
#include "fracfactor/polynomial.hpp"

namespace fracfactor {

namespace {

Eigen::BDCSVD<Eigen::MatrixXd> thin_svd(const Eigen::Ref<const Eigen::MatrixXd>& y) {
  return Eigen::BDCSVD<Eigen::MatrixXd>(y, Eigen::ComputeThinU | Eigen::ComputeThinV);
}

}  // namespace

FactorEstimate pc_extract(const Eigen::Ref<const Eigen::MatrixXd>& y, int k, double d) {
  const Eigen::Index T = y.rows(), N = y.cols();
  if (k < 1 || k > std::min(T, N))
    throw EstimationError(fmt::format("pc_extract: k = {} outside [1, min(T, N) = {}]", k, std::min(T, N)));
  if (!(d >= 0.0)) throw std::invalid_argument("pc_extract: d must be nonnegative");
  const auto svd = thin_svd(y);
  const Eigen::VectorXd s = svd.singularValues();
  if (!(s[k - 1] > 1e-10 * std::max(s[0], 1e-300)))
    throw EstimationError(fmt::format("pc_extract: panel has rank below {}", k));
  // (1/T^{2d}) f_hat' f_hat = diag(s^4) T^{-4d} / N^2 up to the scale.
  const double cond = std::pow(s[0] / s[k - 1], 4);
  if (!(cond < 1e8)) throw EstimationError(fmt::format("pc_extract: factor moment condition number {:.3g}", cond));

  Eigen::MatrixXd U = svd.matrixU().leftCols(k);
  const double Td = std::pow(static_cast<double>(T), d);
  const Eigen::MatrixXd f_tilde = Td * U;
  const Eigen::MatrixXd lambda_tilde = (y.transpose() * f_tilde) / (Td * Td);  // N x k

  FactorEstimate out;
  out.scale_d = d;
  out.factors = (y * (y.transpose() * f_tilde)) / (static_cast<double>(N) * Td * Td);
  // Lambda_hat = Lambda~ (Lambda~' Lambda~ / N)^{-1}; Lambda~' Lambda~ = diag(s^2) T^{-2d}.
  const Eigen::VectorXd scale = (s.head(k).array().square() / (static_cast<double>(N) * Td * Td)).inverse();
  out.loadings = lambda_tilde * scale.asDiagonal();
  for (int c = 0; c < k; ++c) {
    Eigen::Index idx = 0;
    out.loadings.col(c).cwiseAbs().maxCoeff(&idx);
    if (out.loadings(idx, c) < 0.0) {
      out.loadings.col(c) *= -1.0;
      out.factors.col(c) *= -1.0;
    }
  }
  out.explained = s.head(k).array().square() / s.squaredNorm();
  return out;
}

Eigen::MatrixXd project_out(const Eigen::Ref<const Eigen::MatrixXd>& y, const Eigen::Ref<const Eigen::MatrixXd>& f) {
  if (f.cols() == 0) return y;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(f);
  if (qr.rank() < f.cols()) throw EstimationError("project_out: regressors are rank deficient");
  return y - f * qr.solve(y);
}

std::vector<FactorEstimate> pc_block_iterative(const Eigen::Ref<const Eigen::MatrixXd>& y,
                                               const std::vector<PersistenceGroup>& groups) {
  std::vector<FactorEstimate> out;
  Eigen::MatrixXd carried(y.rows(), 0);
  for (std::size_t b = 0; b < groups.size(); ++b) {
    const auto& g = groups[b];
    if (g.series.empty()) throw std::invalid_argument(fmt::format("pc_block_iterative: group {} is empty", b));
    Eigen::MatrixXd block(y.rows(), static_cast<Eigen::Index>(g.series.size()) + carried.cols());
    for (std::size_t i = 0; i < g.series.size(); ++i) {
      if (g.series[i] < 0 || g.series[i] >= y.cols())
        throw std::invalid_argument(fmt::format("pc_block_iterative: series index {} out of range", g.series[i]));
      block.col(static_cast<Eigen::Index>(i)) = y.col(g.series[i]);
    }
    block.rightCols(carried.cols()) = carried;
    out.push_back(pc_extract(block, g.k, g.d));
    carried = project_out(block, out.back().factors);
  }
  return out;
}

std::vector<PersistenceGroup> persistence_groups(const Eigen::Ref<const Eigen::VectorXd>& d_hat, double gap) {
  std::vector<int> order(static_cast<std::size_t>(d_hat.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return d_hat[a] > d_hat[b]; });
  std::vector<PersistenceGroup> groups;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i == 0 || d_hat[order[i - 1]] - d_hat[order[i]] > gap) groups.emplace_back();
    groups.back().series.push_back(order[i]);
  }
  for (auto& g : groups) {
    double s = 0.0;
    for (int i : g.series) s += d_hat[i];
    g.d = std::max(0.0, s / static_cast<double>(g.series.size()));
  }
  return groups;
}

Eigen::VectorXd pc_residual_variances(const Eigen::Ref<const Eigen::MatrixXd>& y, int kmax) {
  const auto svd = thin_svd(y);
  const Eigen::VectorXd s2 = svd.singularValues().array().square();
  const double total = s2.sum();
  const double nt = static_cast<double>(y.rows()) * static_cast<double>(y.cols());
  Eigen::VectorXd V(kmax + 1);
  double removed = 0.0;
  for (int k = 0; k <= kmax; ++k) {
    if (k > 0 && k - 1 < s2.size()) removed += s2[k - 1];
    V[k] = std::max(0.0, total - removed) / nt;
  }
  return V;
}

int select_num_factors(const Eigen::Ref<const Eigen::MatrixXd>& y, int kmax) {
  if (kmax < 1) throw std::invalid_argument("select_num_factors: kmax must be at least 1");
  if (kmax > std::min(y.rows(), y.cols())) throw std::invalid_argument("select_num_factors: kmax exceeds min(N, T)");
  const Eigen::VectorXd V = pc_residual_variances(y, kmax);
  const double c2 = static_cast<double>(std::min(y.rows(), y.cols()));
  const double sigma2 = V[kmax];
  int best = 1;
  double best_ic = std::numeric_limits<double>::infinity();
  for (int k = 1; k <= kmax; ++k) {
    const double ic = V[k] + k * sigma2 * std::log(c2) / c2;
    if (ic < best_ic) {
      best_ic = ic;
      best = k;
    }
  }
  return best;
}

Decorrelated decorrelate(const Eigen::Ref<const Eigen::MatrixXd>& factors) {
  const Eigen::Index T = factors.rows(), r = factors.cols();
  if (r < 1) throw std::invalid_argument("decorrelate: no factors");
  const Eigen::MatrixXd S = factors.transpose() * factors / static_cast<double>(T);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  const Eigen::VectorXd ev = es.eigenvalues();
  if (!(ev[0] > 1e-12 * ev[r - 1])) throw EstimationError("decorrelate: factors are rank deficient");
  const Eigen::MatrixXd W = es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  const Eigen::MatrixXd G = factors * W;

  Eigen::MatrixXd C1 = G.bottomRows(T - 1).transpose() * G.topRows(T - 1) / static_cast<double>(T);
  const Eigen::MatrixXd Cs = 0.5 * (C1 + C1.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> lag(Cs);
  Eigen::MatrixXd V = lag.eigenvectors().rowwise().reverse();
  for (Eigen::Index c = 0; c < r; ++c) {
    Eigen::Index idx = 0;
    V.col(c).cwiseAbs().maxCoeff(&idx);
    if (V(idx, c) < 0.0) V.col(c) *= -1.0;
  }
  Decorrelated out;
  out.rotation = V;
  out.transform = W * V;
  out.factors = G * V;
  return out;
}

Eigen::VectorXd arfi_residuals(const Eigen::Ref<const Eigen::VectorXd>& f, double d,
                               const Eigen::Ref<const Eigen::VectorXd>& b) {
  const Eigen::VectorXd x = frac_diff(f, d);
  Eigen::VectorXd e = x;
  for (Eigen::Index t = 0; t < x.size(); ++t)
    for (Eigen::Index k = 1; k <= std::min<Eigen::Index>(b.size(), t); ++k) e[t] -= b[k - 1] * x[t - k];
  return e;
}

double arfi_profile_loglik(const Eigen::Ref<const Eigen::VectorXd>& f, double d, const Eigen::Ref<const Eigen::VectorXd>& b) {
  const double T = static_cast<double>(f.size());
  const double sigma2 = arfi_residuals(f, d, b).squaredNorm() / T;
  return -0.5 * T * std::log(sigma2);
}

namespace {

constexpr double kMaxD = 2.5;
constexpr double kEdge = 1e-6;

// Zero-presample lag regression, matching the residual definition.
Eigen::VectorXd ols_lags(const Eigen::VectorXd& x, int p) {
  if (p == 0) return Eigen::VectorXd(0);
  const Eigen::Index T = x.size();
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(T, p);
  for (int k = 1; k <= p; ++k) X.col(k - 1).tail(T - k) = x.head(T - k);
  return X.colPivHouseholderQr().solve(x);
}

}  // namespace

ArfiParams fit_arfi_profile(const Eigen::Ref<const Eigen::MatrixXd>& factors, int p) {
  if (p < 0) throw std::invalid_argument("fit_arfi_profile: p must be nonnegative");
  const Eigen::Index T = factors.rows(), r = factors.cols();
  if (T <= 2 * p + 2) throw std::invalid_argument("fit_arfi_profile: sample too short for the AR order");
  ArfiParams out;
  out.d.resize(r);
  out.ar.resize(r, p);
  out.q_diag.resize(r);
  for (Eigen::Index j = 0; j < r; ++j) {
    const Eigen::VectorXd f = factors.col(j);
    if (f.squaredNorm() == 0.0) throw EstimationError(fmt::format("fit_arfi_profile: factor {} is identically zero", j));

    double best_d = 0.0, best_ll = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_b = Eigen::VectorXd::Zero(p);
    for (int g = 0; g <= 50; ++g) {
      const double d = kMaxD * g / 50.0;
      Eigen::VectorXd b = ols_lags(frac_diff(f, d), p);
      if (!ar_is_stable(b)) b = project_stable_ar(b, 0.98);
      const double ll = arfi_profile_loglik(f, d, b);
      if (ll > best_ll) {
        best_ll = ll;
        best_d = d;
        best_b = b;
      }
    }

    auto unpack_d = [](double z) { return kMaxD / (1.0 + std::exp(-z)); };
    auto objective = [&](const Eigen::VectorXd& theta) {
      const double d = unpack_d(theta[0]);
      const Eigen::VectorXd b = ar_from_unconstrained(theta.tail(p));
      const double ll = arfi_profile_loglik(f, d, b);
      return std::isfinite(ll) ? -ll : std::numeric_limits<double>::infinity();
    };
    const double d0 = std::clamp(best_d, kEdge * kMaxD, (1.0 - kEdge) * kMaxD);
    Eigen::VectorXd theta0(1 + p);
    theta0[0] = std::log(d0 / (kMaxD - d0));
    theta0.tail(p) = ar_to_unconstrained(best_b);
    optim::BfgsOptions opts;
    opts.max_iterations = 200;
    opts.gradient_tolerance = 1e-5;
    const optim::Result res = optim::minimize_bfgs(objective, theta0, opts);
    if (!std::isfinite(res.value))
      throw EstimationError(fmt::format("fit_arfi_profile: factor {} diverged at d = {}", j, unpack_d(res.x[0])));

    out.d[j] = unpack_d(res.x[0]);
    const Eigen::VectorXd b = ar_from_unconstrained(res.x.tail(p));
    out.ar.row(j) = b.transpose();
    out.q_diag[j] = arfi_residuals(f, out.d[j], b).squaredNorm() / static_cast<double>(T);
    std::vector<double> trace;
    trace.reserve(res.trace.size());
    for (double v : res.trace) trace.push_back(-v);
    out.traces.push_back(std::move(trace));
  }
  return out;
}

ArFit fit_ar(const Eigen::Ref<const Eigen::VectorXd>& series, int pmax, InfoCriterion criterion) {
  const Eigen::Index T = series.size();
  if (pmax < 0 || 4 * pmax >= T) throw std::invalid_argument(fmt::format("fit_ar: need 0 <= pmax < T/4, got {}", pmax));
  const Eigen::Index n = T - pmax;
  const Eigen::VectorXd yv = series.tail(n);
  Eigen::MatrixXd X(n, pmax);
  for (int k = 1; k <= pmax; ++k) X.col(k - 1) = series.segment(pmax - k, n);

  struct Candidate {
    double ic;
    ArFit fit;
  };
  std::vector<Candidate> cands;
  for (int p = 0; p <= pmax; ++p) {
    ArFit fit;
    fit.order = p;
    Eigen::VectorXd resid = yv;
    if (p > 0) {
      fit.coeffs = X.leftCols(p).colPivHouseholderQr().solve(yv);
      resid -= X.leftCols(p) * fit.coeffs;
    } else {
      fit.coeffs = Eigen::VectorXd(0);
    }
    fit.sigma2 = resid.squaredNorm() / static_cast<double>(n);
    const double penalty = criterion == InfoCriterion::kBic ? std::log(static_cast<double>(n)) : 2.0;
    const double ic = static_cast<double>(n) * std::log(std::max(fit.sigma2, 1e-300)) + penalty * p;
    cands.push_back({ic, fit});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.ic < b.ic; });
  for (const auto& c : cands)
    if (ar_is_stable(c.fit.coeffs)) return c.fit;
  throw EstimationError("fit_ar: every candidate order gave an unstable fit");
}

OlsLoadings ols_loadings(const Eigen::Ref<const Eigen::MatrixXd>& y, const Eigen::Ref<const Eigen::MatrixXd>& factors) {
  if (factors.rows() != y.rows()) throw std::invalid_argument("ols_loadings: row mismatch");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(factors);
  if (qr.rank() < factors.cols()) throw EstimationError("ols_loadings: factor matrix is rank deficient");
  OlsLoadings out;
  out.loadings = qr.solve(y).transpose();
  out.residuals = y - factors * out.loadings.transpose();
  return out;
}

}  // namespace fracfactor
