#include "fracfactor/two_stage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/spectral.hpp"

namespace fracfactor {

namespace {

Eigen::MatrixXd block_factors(const Eigen::Ref<const Eigen::MatrixXd>& y, const Eigen::VectorXd& d_hat, int r, double gap) {
  const auto groups = allocate_factors(persistence_groups(d_hat, gap), r);
  const auto blocks = pc_block_iterative(y, groups);
  Eigen::MatrixXd F(y.rows(), r);
  int col = 0;
  for (const auto& b : blocks) {
    F.middleCols(col, b.factors.cols()) = b.factors;
    col += static_cast<int>(b.factors.cols());
  }
  return F;
}

// AR(p) with at most p lags chosen by BIC, padded to exactly p coefficients.
ArFit padded_ar(const Eigen::VectorXd& f, int p) {
  ArFit fit = fit_ar(f, p, InfoCriterion::kBic);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
  c.head(fit.coeffs.size()) = fit.coeffs;
  fit.coeffs = c;
  return fit;
}

// Row-wise OLS of obs on the factor columns the mask leaves free.
Eigen::MatrixXd restricted_loadings(const Eigen::Ref<const Eigen::MatrixXd>& obs, const Eigen::MatrixXd& f,
                                    const Eigen::MatrixXi& mask) {
  const Eigen::Index N = obs.cols(), k = f.cols();
  Eigen::MatrixXd lambda = Eigen::MatrixXd::Zero(N, k);
  for (Eigen::Index i = 0; i < N; ++i) {
    std::vector<int> cols;
    for (Eigen::Index j = 0; j < k; ++j)
      if (mask(i, j)) cols.push_back(static_cast<int>(j));
    if (cols.empty()) continue;
    const Eigen::MatrixXd X = f(Eigen::all, cols);
    const Eigen::VectorXd b = X.colPivHouseholderQr().solve(obs.col(i));
    if (!b.allFinite()) throw EstimationError("seed_model: singular loading regression");
    lambda(i, cols) = b;
  }
  return lambda;
}

}  // namespace

std::vector<PersistenceGroup> allocate_factors(std::vector<PersistenceGroup> groups, int r) {
  if (r < 1) throw std::invalid_argument("allocate_factors: r must be positive");
  if (groups.empty()) throw std::invalid_argument("allocate_factors: no groups");
  auto size = [](const PersistenceGroup& g) { return static_cast<double>(g.series.size()); };
  while (static_cast<int>(groups.size()) > r) {
    std::size_t best = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b + 1 < groups.size(); ++b) {
      const double gap = std::abs(groups[b].d - groups[b + 1].d);
      if (gap < best_gap) {
        best_gap = gap;
        best = b;
      }
    }
    auto& a = groups[best];
    const auto& c = groups[best + 1];
    a.d = (a.d * size(a) + c.d * size(c)) / (size(a) + size(c));
    a.series.insert(a.series.end(), c.series.begin(), c.series.end());
    groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(best) + 1);
  }
  const int G = static_cast<int>(groups.size());
  double total = 0.0;
  for (const auto& g : groups) total += size(g);
  std::vector<double> share(static_cast<std::size_t>(G));
  int assigned = 0;
  for (int b = 0; b < G; ++b) {
    const double exact = 1.0 + (r - G) * size(groups[b]) / total;
    groups[b].k = static_cast<int>(std::floor(exact));
    share[static_cast<std::size_t>(b)] = exact - groups[b].k;
    assigned += groups[b].k;
  }
  std::vector<int> order(static_cast<std::size_t>(G));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return share[a] > share[b]; });
  for (int i = 0; assigned < r; ++i, ++assigned) groups[order[static_cast<std::size_t>(i % G)]].k += 1;
  return groups;
}

SeedResult seed_model(Family family, const Eigen::Ref<const Eigen::MatrixXd>& y, const SeedOptions& o,
                      const ApproxTable* table) {
  const int T = static_cast<int>(y.rows()), N = static_cast<int>(y.cols());
  if (family != Family::kDffd && !table) throw std::invalid_argument("seed_model: fractional families need a table");
  SeedResult out;
  out.d_hat.resize(N);
  for (int i = 0; i < N; ++i) {
    try {
      out.d_hat[i] = elw_estimate(y.col(i), o.elw_alpha);
    } catch (const DataError&) {
      out.d_hat[i] = 0.0;
    }
  }
  const double lo = table ? table->lower() : 0.0, hi = table ? table->upper() : 0.0;

  ModelParams th;
  Eigen::MatrixXd f;
  Eigen::MatrixXd obs = y;
  std::vector<int> p_i(static_cast<std::size_t>(N), 0);

  switch (family) {
    case Family::kDffm: {
      const Decorrelated dec = decorrelate(block_factors(y, out.d_hat, o.r, o.group_gap));
      const ArfiParams arfi = fit_arfi_profile(dec.factors, o.p);
      f = dec.factors;
      th.d.resize(o.r);
      th.B = arfi.ar;
      for (int j = 0; j < o.r; ++j) {
        th.d[j] = std::clamp(arfi.d[j], lo, hi);
        f.col(j) /= std::sqrt(arfi.q_diag[j]);
      }
      th.lambda_free = lower_triangular_mask(N, o.r, o.r);
      break;
    }
    case Family::kDofc: {
      const int k = o.r1 + o.r2;
      const Eigen::MatrixXd F = block_factors(y, out.d_hat, k, o.group_gap);
      f.resize(T, k);
      th.d.resize(o.r1);
      th.B = Eigen::MatrixXd::Zero(o.r2, o.p);
      const SubspaceSplit split = subspace_split(F, 0, o.r1, o.r2);
      if (o.r1 > 0) {
        const Decorrelated dec = decorrelate(F * split.frac_basis);
        const ArfiParams arfi = fit_arfi_profile(dec.factors, 0);
        std::vector<int> order(static_cast<std::size_t>(o.r1));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return arfi.d[a] < arfi.d[b]; });
        for (int j = 0; j < o.r1; ++j) {
          const int src = order[static_cast<std::size_t>(j)];
          th.d[j] = std::clamp(arfi.d[src], lo, hi);
          f.col(j) = dec.factors.col(src) / std::sqrt(arfi.q_diag[src]);
        }
      }
      if (o.r2 > 0) {
        const Decorrelated dec = decorrelate(F * split.short_basis);
        for (int j = 0; j < o.r2; ++j) {
          const ArFit fit = padded_ar(dec.factors.col(j), o.p);
          th.B.row(j) = fit.coeffs.transpose();
          f.col(o.r1 + j) = dec.factors.col(j) / std::sqrt(fit.sigma2);
        }
      }
      th.lambda_free = dofc_mask(out.d_hat, o.r1, o.r2);
      break;
    }
    case Family::kDffd: {
      const Eigen::VectorXd d_star = out.d_hat.cwiseMax(-0.5).cwiseMin(2.5);
      obs = frac_diff_columns(y, d_star);
      const Decorrelated dec = decorrelate(pc_extract(obs, o.r, 0.0).factors);
      f = dec.factors;
      th.B.resize(o.r, o.p);
      for (int j = 0; j < o.r; ++j) {
        const ArFit fit = padded_ar(f.col(j), o.p);
        th.B.row(j) = fit.coeffs.transpose();
        f.col(j) /= std::sqrt(fit.sigma2);
      }
      th.lambda_free = lower_triangular_mask(N, o.r, o.r);
      out.spec = ModelSpec::dffd(o.r, o.p, d_star);
      break;
    }
  }

  th.lambda = restricted_loadings(obs, f, th.lambda_free);
  const Eigen::MatrixXd resid = obs - f * th.lambda.transpose();
  th.H.resize(N);
  for (int i = 0; i < N; ++i) {
    if (family == Family::kDffd) {
      th.rho.emplace_back(0);
      th.H[i] = resid.col(i).squaredNorm() / T;
    } else {
      const ArFit fit = fit_ar(resid.col(i), o.pmax_idio, InfoCriterion::kBic);
      p_i[static_cast<std::size_t>(i)] = fit.order;
      th.rho.push_back(fit.coeffs);
      th.H[i] = fit.sigma2;
    }
    th.H[i] = std::max(th.H[i], 1e-8);
  }
  if (family == Family::kDffm) {
    out.spec = ModelSpec::dffm(o.r, o.p, p_i, T);
    out.spec.approx = table->spec;
  } else if (family == Family::kDofc) {
    out.spec = ModelSpec::dofc(o.r1, o.r2, o.p, p_i, T);
    out.spec.approx = table->spec;
  }
  out.theta = th;
  out.factors = f;
  out.spec.validate();
  out.theta.validate(out.spec);
  return out;
}

Eigen::MatrixXd smoothed_factors(const StateSpaceSystem& sys, const SmootherOutput& sm) {
  return sm.a_smooth * sys.F.transpose();
}

TwoStageResult fit_two_stage(Family family, const Eigen::Ref<const Eigen::MatrixXd>& y, const SeedOptions& options,
                             const ApproxTable* table, int em_iters, int max_bfgs_iters) {
  TwoStageResult out;
  out.seed = seed_model(family, y, options, table);
  const Eigen::MatrixXd x = model_observations(out.seed.spec, y);
  out.ml = fit_ml(out.seed.spec, out.seed.theta, x, table, em_iters, max_bfgs_iters);
  out.system = build_system(out.seed.spec, out.ml.theta, table);
  out.smoother = kalman_filter_smoother(out.system, filter_data(out.system, x));
  out.factors = smoothed_factors(out.system, out.smoother);
  return out;
}

}  // namespace fracfactor
