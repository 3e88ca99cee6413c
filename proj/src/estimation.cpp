#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/optim.hpp"
#include "fracfactor/polynomial.hpp"
#include "fracfactor/statespace.hpp"
#include "statespace_detail.hpp"

namespace fracfactor {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kAcceptGain = 1e-10;
constexpr int kProfileGrid = 31;

using detail::FactorDynamics;
using detail::Layout;

std::vector<int> chain_indices(const Layout& L, int j) {
  std::vector<int> idx;
  for (int lag = 0; lag < L.factors[static_cast<std::size_t>(j)].u; ++lag) idx.push_back(L.index(j, lag));
  return idx;
}

// Sufficient statistics of the smoothed states.
struct Moments {
  int T = 0;
  Eigen::MatrixXd S11, A00, A11, A10, E1;
  std::vector<Eigen::MatrixXd> Ymom;  // (p_i+1)^2: sum Y_t Y_t'
  std::vector<Eigen::MatrixXd> C;     // (p_i+1) x s: sum Y_t a_t'
};

Moments smoothed_moments(const ModelSpec& spec, const SmootherOutput& sm, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  Moments M;
  const int T = static_cast<int>(sm.a_smooth.rows());
  const int s = static_cast<int>(sm.a_smooth.cols());
  M.T = T;
  const auto& a = sm.a_smooth;
  M.S11 = a.transpose() * a;
  for (int t = 0; t < T; ++t) M.S11 += sm.P_smooth[static_cast<std::size_t>(t)];
  const Eigen::MatrixXd first = a.row(0).transpose() * a.row(0) + sm.P_smooth.front();
  const Eigen::MatrixXd last = a.row(T - 1).transpose() * a.row(T - 1) + sm.P_smooth.back();
  M.A00 = M.S11 - last;
  M.A11 = M.S11 - first;
  M.E1 = first;
  M.A10 = Eigen::MatrixXd::Zero(s, s);
  if (T > 1) M.A10 = a.bottomRows(T - 1).transpose() * a.topRows(T - 1);
  for (int t = 0; t + 1 < T; ++t) M.A10 += sm.P_lag1[static_cast<std::size_t>(t)];

  const int N = spec.n_series();
  for (int i = 0; i < N; ++i) {
    const int p = spec.p_i[static_cast<std::size_t>(i)];
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(T, p + 1);
    for (int l = 0; l <= p; ++l)
      if (T > l) Y.col(l).tail(T - l) = x.col(i).head(T - l);
    M.Ymom.push_back(Y.transpose() * Y);
    M.C.push_back(Y.transpose() * a);
  }
  return M;
}

Eigen::VectorXd psi_bar(const Eigen::VectorXd& rho) {
  Eigen::VectorXd psi(rho.size() + 1);
  psi[0] = 1.0;
  psi.tail(rho.size()) = -rho;
  return psi;
}

// Expected complete-data log-likelihood split into per-factor and per-series
// parts.
struct QModel {
  const ModelSpec& spec;
  const Layout& L;
  const Moments& M;

  double factor_transition(int j, const Eigen::VectorXd& c) const {
    const auto I = chain_indices(L, j);
    const int h = I.front();
    const Eigen::VectorXd cross = M.A10(h, I).transpose();
    const double quad = M.A11(h, h) - 2.0 * c.dot(cross) + c.dot(M.A00(I, I) * c);
    return -0.5 * ((M.T - 1) * kLog2Pi + quad);
  }

  // d/dc of factor_transition.
  Eigen::VectorXd factor_transition_grad(int j, const Eigen::VectorXd& c) const {
    const auto I = chain_indices(L, j);
    return M.A10(I.front(), I).transpose() - M.A00(I, I) * c;
  }

  double factor_initial(int j, const Eigen::VectorXd& c) const {
    const auto& f = L.factors[static_cast<std::size_t>(j)];
    const auto I = chain_indices(L, j);
    if (!f.stationary_init) return -0.5 * (kLog2Pi + M.E1(I.front(), I.front()));
    if (!ar_is_stable(c)) return kNegInf;
    const Eigen::MatrixXd P = detail::chain_initial_covariance(f, c);
    Eigen::LLT<Eigen::MatrixXd> llt(P);
    if (llt.info() != Eigen::Success) return kNegInf;
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    const double tr = llt.solve(M.E1(I, I)).trace();
    return -0.5 * (f.u * kLog2Pi + logdet + tr);
  }

  double factor(int j, const FactorDynamics& dyn) const {
    const double init = factor_initial(j, dyn.c);
    if (!std::isfinite(init)) return kNegInf;
    return factor_transition(j, dyn.c) + init;
  }

  Eigen::MatrixXd residual_moment(int i, const std::vector<FactorDynamics>& dyn, const Eigen::VectorXd& lambda_i) const {
    const int p = spec.p_i[static_cast<std::size_t>(i)];
    const Eigen::MatrixXd W = detail::lag_weights(L, dyn, lambda_i, p);
    const auto& C = M.C[static_cast<std::size_t>(i)];
    const Eigen::MatrixXd CW = C * W.transpose();
    return M.Ymom[static_cast<std::size_t>(i)] - CW - CW.transpose() + W * M.S11 * W.transpose();
  }

  double series(int i, const std::vector<FactorDynamics>& dyn, const Eigen::VectorXd& lambda_i, const Eigen::VectorXd& rho,
                double H) const {
    const Eigen::VectorXd psi = psi_bar(rho);
    const double sse = psi.dot(residual_moment(i, dyn, lambda_i) * psi);
    return -0.5 * (M.T * (kLog2Pi + std::log(H)) + sse / H);
  }

  double total(const ModelParams& theta, const std::vector<FactorDynamics>& dyn) const {
    double q = 0.0;
    for (int j = 0; j < L.n_factors(); ++j) q += factor(j, dyn[static_cast<std::size_t>(j)]);
    for (int i = 0; i < spec.n_series(); ++i)
      q += series(i, dyn, theta.lambda.row(i).transpose(), theta.rho[static_cast<std::size_t>(i)], theta.H[i]);
    return q;
  }
};

double table_lo(const ApproxTable* table) { return table->lower(); }
double table_hi(const ApproxTable* table) { return table->upper(); }

// Coefficients of B(L) a(L) for a given approximation polynomial are
// c = a + K b with K_{kl} = delta_{kl} - a_{k-l}.
Eigen::MatrixXd convolution_matrix(const Eigen::VectorXd& a, int p, int u) {
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(u, p);
  for (int k = 1; k <= u; ++k)
    for (int l = 1; l <= std::min(p, k); ++l) {
      if (k == l) K(k - 1, l - 1) = 1.0;
      else if (k - l <= a.size()) K(k - 1, l - 1) = -a[k - l - 1];
    }
  return K;
}

Eigen::VectorXd padded(const Eigen::VectorXd& a, int u) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(u);
  const Eigen::Index n = std::min<Eigen::Index>(a.size(), u);
  out.head(n) = a.head(n);
  return out;
}

void mstep_factor(const ModelSpec& spec, const Layout& L, const QModel& Q, const ApproxTable* table, ModelParams& theta,
                  std::vector<FactorDynamics>& dyn, int j) {
  const auto& f = L.factors[static_cast<std::size_t>(j)];
  auto dyn_for = [&](const ModelParams& th, double d) {
    return detail::factor_dynamics(spec, L, th, table, j, d, nullptr);
  };
  auto full_q = [&](const ModelParams& th, double d) {
    // Factor part plus, when the signal polynomial moves with d, all series.
    std::vector<FactorDynamics> trial = dyn;
    trial[static_cast<std::size_t>(j)] = dyn_for(th, d);
    double q = Q.factor(j, trial[static_cast<std::size_t>(j)]);
    if (f.frac && !f.ar && table->spec.w > 0)
      for (int i = 0; i < spec.n_series(); ++i)
        q += Q.series(i, trial, th.lambda.row(i).transpose(), th.rho[static_cast<std::size_t>(i)], th.H[i]);
    return q;
  };
  const double current = full_q(theta, NAN);

  auto accept = [&](const ModelParams& candidate, double q) {
    if (q > current + kAcceptGain) {
      theta = candidate;
      dyn[static_cast<std::size_t>(j)] = dyn_for(theta, NAN);
      return true;
    }
    return false;
  };

  if (f.frac && f.ar) {
    const int p = spec.p;
    const auto I = chain_indices(L, j);
    const Eigen::MatrixXd A = Q.M.A00(I, I);
    const Eigen::VectorXd b = Q.M.A10(I.front(), I).transpose();
    auto best_b = [&](double d) -> Eigen::VectorXd {
      if (p == 0) return Eigen::VectorXd(0);
      const Eigen::VectorXd a = eval_approx(*table, d).head(table->spec.v);
      const Eigen::MatrixXd K = convolution_matrix(a, p, f.u);
      const Eigen::VectorXd c0 = padded(a, f.u);
      Eigen::VectorXd beta = (K.transpose() * A * K).ldlt().solve(K.transpose() * (b - A * c0));
      if (!beta.allFinite()) return Eigen::VectorXd::Zero(p);
      if (!ar_is_stable(beta)) beta = project_stable_ar(beta, 0.99);
      return beta;
    };
    auto profile = [&](double d) {
      ModelParams th = theta;
      th.d[f.frac_idx] = d;
      if (p > 0) th.B.row(f.ar_idx) = best_b(d).transpose();
      return -full_q(th, NAN);
    };
    const double d_new = optim::grid_then_golden(profile, table_lo(table), table_hi(table), kProfileGrid);
    ModelParams cand = theta;
    cand.d[f.frac_idx] = d_new;
    if (p > 0) cand.B.row(f.ar_idx) = best_b(d_new).transpose();
    if (accept(cand, full_q(cand, NAN))) return;
    cand = theta;
    if (p > 0) cand.B.row(f.ar_idx) = best_b(theta.d[f.frac_idx]).transpose();
    accept(cand, full_q(cand, NAN));
    return;
  }

  if (f.frac) {
    auto objective = [&](double d) { return -full_q(theta, d); };
    const double d_new = optim::grid_then_golden(objective, table_lo(table), table_hi(table), kProfileGrid);
    ModelParams cand = theta;
    cand.d[f.frac_idx] = d_new;
    accept(cand, full_q(cand, NAN));
    return;
  }

  // Short-memory factor: least squares on its own lags, then backtrack
  // toward the current value until the complete-data likelihood improves.
  const int p = spec.p;
  if (p == 0) return;
  const auto I = chain_indices(L, j);
  const std::vector<int> Ip(I.begin(), I.begin() + p);
  Eigen::VectorXd beta = Q.M.A00(Ip, Ip).ldlt().solve(Q.M.A10(I.front(), Ip).transpose());
  if (!beta.allFinite()) return;
  if (!ar_is_stable(beta)) beta = project_stable_ar(beta, 0.99);
  const Eigen::VectorXd old = theta.B.row(f.ar_idx).transpose();
  for (int k = 0; k < 30; ++k) {
    const Eigen::VectorXd trial = old + std::ldexp(1.0, -k) * (beta - old);
    if (!ar_is_stable(trial)) continue;
    ModelParams cand = theta;
    cand.B.row(f.ar_idx) = trial.transpose();
    if (accept(cand, full_q(cand, NAN))) return;
  }
}

void mstep_series(const Layout& L, const QModel& Q, ModelParams& theta,
                  const std::vector<FactorDynamics>& dyn, int i) {
  const int k = L.n_factors();
  const int T = Q.M.T;
  const auto& S11 = Q.M.S11;
  const auto& C = Q.M.C[static_cast<std::size_t>(i)];
  Eigen::VectorXd& rho = theta.rho[static_cast<std::size_t>(i)];
  const double q_old = Q.series(i, dyn, theta.lambda.row(i).transpose(), rho, theta.H[i]);

  // Loadings: generalized least squares on the free entries.
  std::vector<int> free_idx, fixed_idx;
  for (int j = 0; j < k; ++j) (theta.lambda_free(i, j) ? free_idx : fixed_idx).push_back(j);
  Eigen::VectorXd lambda = theta.lambda.row(i).transpose();
  if (!free_idx.empty()) {
    const Eigen::MatrixXd G = detail::loading_basis(L, dyn, rho);
    const Eigen::MatrixXd GF = G(free_idx, Eigen::all);
    const Eigen::MatrixXd GX = G(fixed_idx, Eigen::all);
    const Eigen::VectorXd psi = psi_bar(rho);
    Eigen::VectorXd rhs = GF * (C.transpose() * psi);
    if (!fixed_idx.empty()) rhs -= GF * S11 * GX.transpose() * lambda(fixed_idx);
    const Eigen::MatrixXd A = GF * S11 * GF.transpose();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    const Eigen::VectorXd sol = ldlt.solve(rhs);
    if (ldlt.info() == Eigen::Success && sol.allFinite()) lambda(free_idx) = sol;
  }

  // Idiosyncratic AR: least squares in the residual moment, shrunk toward
  // the old value when the solution is not stable.
  const Eigen::MatrixXd E = Q.residual_moment(i, dyn, lambda);
  const int p = static_cast<int>(rho.size());
  Eigen::VectorXd rho_new = rho;
  if (p > 0) {
    const Eigen::VectorXd target = E.bottomRightCorner(p, p).ldlt().solve(E.col(0).tail(p));
    if (target.allFinite()) {
      for (int s = 0; s < 30; ++s) {
        const Eigen::VectorXd trial = rho + std::ldexp(1.0, -s) * (target - rho);
        if (ar_is_stable(trial)) {
          rho_new = trial;
          break;
        }
      }
    }
  }
  const Eigen::VectorXd psi = psi_bar(rho_new);
  const double H_new = std::max(psi.dot(E * psi) / T, 1e-12);
  const double q_new = Q.series(i, dyn, lambda, rho_new, H_new);
  if (q_new > q_old + kAcceptGain) {
    theta.lambda.row(i) = lambda.transpose();
    rho = rho_new;
    theta.H[i] = H_new;
  }
}

void check_table(const ModelSpec& spec, const ApproxTable* table) {
  if (spec.n_frac() > 0 && !table)
    throw std::invalid_argument(fmt::format("{} needs an approximation table", family_name(spec.family)));
}

SmootherOutput smooth(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                      const ApproxTable* table) {
  const StateSpaceSystem sys = build_system(spec, theta, table);
  return kalman_filter_smoother(sys, filter_data(sys, x));
}

double loglik_at(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                 const ApproxTable* table) {
  const StateSpaceSystem sys = build_system(spec, theta, table);
  return kalman_loglik(sys, filter_data(sys, x));
}

}  // namespace

Eigen::VectorXd pack_params(const ModelSpec& spec, const ModelParams& theta, const ApproxTable* table) {
  check_table(spec, table);
  theta.validate(spec);
  std::vector<double> out;
  for (int j = 0; j < spec.n_frac(); ++j) {
    const double lo = table->lower(), hi = table->upper(), eps = 1e-9 * (hi - lo);
    const double d = std::clamp(theta.d[j], lo + eps, hi - eps);
    out.push_back(std::log((d - lo) / (hi - d)));
  }
  for (int j = 0; j < spec.n_ar(); ++j) {
    const Eigen::VectorXd x = ar_to_unconstrained(theta.B.row(j).transpose());
    out.insert(out.end(), x.data(), x.data() + x.size());
  }
  for (int i = 0; i < spec.n_series(); ++i) {
    for (int j = 0; j < spec.n_factors(); ++j)
      if (theta.lambda_free(i, j)) out.push_back(theta.lambda(i, j));
    const Eigen::VectorXd x = ar_to_unconstrained(theta.rho[static_cast<std::size_t>(i)]);
    out.insert(out.end(), x.data(), x.data() + x.size());
    out.push_back(std::log(theta.H[i]));
  }
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

ModelParams unpack_params(const ModelSpec& spec, const ModelParams& shape, const Eigen::Ref<const Eigen::VectorXd>& x,
                          const ApproxTable* table) {
  check_table(spec, table);
  ModelParams th = shape;
  Eigen::Index pos = 0;
  auto take = [&](Eigen::Index n) {
    if (pos + n > x.size()) throw std::invalid_argument("unpack_params: vector too short");
    Eigen::VectorXd seg = x.segment(pos, n);
    pos += n;
    return seg;
  };
  for (int j = 0; j < spec.n_frac(); ++j) {
    const double lo = table->lower(), hi = table->upper();
    th.d[j] = lo + (hi - lo) / (1.0 + std::exp(-take(1)[0]));
  }
  for (int j = 0; j < spec.n_ar(); ++j) th.B.row(j) = ar_from_unconstrained(take(spec.p)).transpose();
  for (int i = 0; i < spec.n_series(); ++i) {
    for (int j = 0; j < spec.n_factors(); ++j)
      if (shape.lambda_free(i, j)) th.lambda(i, j) = take(1)[0];
    th.rho[static_cast<std::size_t>(i)] = ar_from_unconstrained(take(spec.p_i[static_cast<std::size_t>(i)]));
    th.H[i] = std::exp(take(1)[0]);
  }
  if (pos != x.size()) throw std::invalid_argument("unpack_params: vector too long");
  return th;
}

double expected_loglik(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                       const ApproxTable* table, const SmootherOutput& sm) {
  check_table(spec, table);
  const Layout L = detail::make_layout(spec);
  const Moments M = smoothed_moments(spec, sm, x);
  const QModel Q{spec, L, M};
  return Q.total(theta, detail::all_dynamics(spec, L, theta, table, nullptr));
}

Eigen::VectorXd loglik_score(const ModelSpec& spec, const ModelParams& shape, const Eigen::Ref<const Eigen::VectorXd>& packed,
                             const Eigen::Ref<const Eigen::MatrixXd>& x, const ApproxTable* table) {
  const Layout L = detail::make_layout(spec);
  const Eigen::VectorXd v = packed;
  const ModelParams th = unpack_params(spec, shape, v, table);
  const SmootherOutput sm = smooth(spec, th, x, table);
  const Moments M = smoothed_moments(spec, sm, x);
  const QModel Q{spec, L, M};
  const auto dyn = detail::all_dynamics(spec, L, th, table, nullptr);
  const int N = spec.n_series(), k = L.n_factors(), T = M.T;

  // Derivatives of Q in the natural parameters.  Everything is linear in
  // the smoothed moments, so no differencing of Q itself is needed.
  std::vector<Eigen::VectorXd> d_m(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) d_m[static_cast<std::size_t>(j)] = Eigen::VectorXd::Zero(dyn[static_cast<std::size_t>(j)].m.size());
  std::vector<Eigen::VectorXd> d_lambda, d_rho;
  Eigen::VectorXd d_H(N);
  for (int i = 0; i < N; ++i) {
    const auto& rho = th.rho[static_cast<std::size_t>(i)];
    const double H = th.H[i];
    const Eigen::VectorXd lambda = th.lambda.row(i).transpose();
    const Eigen::VectorXd psi = psi_bar(rho);
    const Eigen::MatrixXd G = detail::loading_basis(L, dyn, rho);
    const Eigen::VectorXd w = G.transpose() * lambda;
    const Eigen::VectorXd g = M.S11 * w - M.C[static_cast<std::size_t>(i)].transpose() * psi;
    const Eigen::MatrixXd E = Q.residual_moment(i, dyn, lambda);
    const Eigen::VectorXd Epsi = E * psi;
    const double sse = psi.dot(Epsi);
    d_H[i] = -0.5 * (T / H - sse / (H * H));
    d_lambda.push_back(-(G * g) / H);
    d_rho.push_back(Epsi.tail(rho.size()) / H);
    for (int j = 0; j < k; ++j) {
      auto& dm = d_m[static_cast<std::size_t>(j)];
      for (int l = 0; l < dm.size(); ++l) {
        double acc = 0.0;
        for (int lag = 0; lag < psi.size(); ++lag) acc += psi[lag] * g[L.index(j, lag + l)];
        dm[l] -= lambda[j] * acc / H;
      }
    }
  }

  Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
  Eigen::Index pos = 0;
  auto factor_coord = [&](int j) {
    const double h = 1e-6 * (1.0 + std::abs(v[pos]));
    Eigen::VectorXd up = v, dn = v;
    up[pos] += h;
    dn[pos] -= h;
    const auto fu = detail::factor_dynamics(spec, L, unpack_params(spec, shape, up, table), table, j, NAN, nullptr);
    const auto fd = detail::factor_dynamics(spec, L, unpack_params(spec, shape, dn, table), table, j, NAN, nullptr);
    const auto& f0 = dyn[static_cast<std::size_t>(j)];
    double gval = Q.factor_transition_grad(j, f0.c).dot((fu.c - fd.c) / (2.0 * h));
    gval += d_m[static_cast<std::size_t>(j)].dot((fu.m - fd.m) / (2.0 * h));
    if (L.factors[static_cast<std::size_t>(j)].stationary_init)
      gval += (Q.factor_initial(j, fu.c) - Q.factor_initial(j, fd.c)) / (2.0 * h);
    out[pos++] = gval;
  };
  for (int j = 0; j < k; ++j)
    if (L.factors[static_cast<std::size_t>(j)].frac) factor_coord(j);
  for (int j = 0; j < k; ++j)
    if (L.factors[static_cast<std::size_t>(j)].ar)
      for (int l = 0; l < spec.p; ++l) factor_coord(j);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < k; ++j)
      if (shape.lambda_free(i, j)) out[pos++] = d_lambda[static_cast<std::size_t>(i)][j];
    const int p = spec.p_i[static_cast<std::size_t>(i)];
    for (int l = 0; l < p; ++l) {
      const double h = 1e-6 * (1.0 + std::abs(v[pos + l]));
      Eigen::VectorXd up = v.segment(pos, p), dn = up;
      up[l] += h;
      dn[l] -= h;
      out[pos + l] = d_rho[static_cast<std::size_t>(i)].dot((ar_from_unconstrained(up) - ar_from_unconstrained(dn)) / (2.0 * h));
    }
    pos += p;
    out[pos++] = d_H[i] * th.H[i];
  }
  return out;
}

EmResult em_iterate(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                    const ApproxTable* table, int iters) {
  if (iters < 1) throw std::invalid_argument("em_iterate: iters must be at least 1");
  check_table(spec, table);
  spec.validate();
  theta.validate(spec);
  if (x.cols() != spec.n_series()) throw std::invalid_argument("em_iterate: data columns do not match the spec");
  const Layout L = detail::make_layout(spec);
  EmResult res;
  res.theta = theta;
  for (int it = 0; it < iters; ++it) {
    const SmootherOutput sm = smooth(spec, res.theta, x, table);
    res.loglik_trace.push_back(sm.loglik);
    const Moments M = smoothed_moments(spec, sm, x);
    const QModel Q{spec, L, M};
    auto dyn = detail::all_dynamics(spec, L, res.theta, table, nullptr);
    for (int j = 0; j < L.n_factors(); ++j) mstep_factor(spec, L, Q, table, res.theta, dyn, j);
    for (int i = 0; i < spec.n_series(); ++i) mstep_series(L, Q, res.theta, dyn, i);
  }
  res.loglik_trace.push_back(loglik_at(spec, res.theta, x, table));
  for (std::size_t k = 1; k < res.loglik_trace.size(); ++k)
    if (!(res.loglik_trace[k] >= res.loglik_trace[k - 1] - 1e-8)) res.numerical_failure = true;
  return res;
}

MlResult fit_ml(const ModelSpec& spec, const ModelParams& theta, const Eigen::Ref<const Eigen::MatrixXd>& x,
                const ApproxTable* table, int em_iters, int max_bfgs_iters) {
  check_table(spec, table);
  MlResult out;
  ModelParams start = theta;
  if (em_iters > 0) {
    EmResult em = em_iterate(spec, theta, x, table, em_iters);
    out.em_trace = em.loglik_trace;
    start = em.theta;
    out.em_loglik = em.loglik_trace.back();
  } else {
    out.em_loglik = loglik_at(spec, theta, x, table);
    out.em_trace = {out.em_loglik};
  }
  out.theta = start;
  out.loglik = out.em_loglik;
  if (max_bfgs_iters <= 0) return out;

  const Eigen::VectorXd x0 = pack_params(spec, start, table);

  auto objective = [&](const Eigen::VectorXd& v) {
    try {
      const double ll = loglik_at(spec, unpack_params(spec, start, v, table), x, table);
      return std::isfinite(ll) ? -ll : std::numeric_limits<double>::infinity();
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  auto gradient = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return -loglik_score(spec, start, v, x, table); };

  optim::BfgsOptions opts;
  opts.max_iterations = max_bfgs_iters;
  optim::Result r;
  try {
    r = optim::minimize_bfgs(objective, x0, opts, gradient);
  } catch (const std::exception&) {
    out.status = MlStatus::kLineSearchFailed;
    return out;
  }
  out.bfgs_trace.reserve(r.trace.size());
  for (double v : r.trace) out.bfgs_trace.push_back(-v);
  switch (r.status) {
    case optim::Status::kConverged: out.status = MlStatus::kConverged; break;
    case optim::Status::kMaxIterations: out.status = MlStatus::kMaxIterations; break;
    case optim::Status::kLineSearchFailed: out.status = MlStatus::kLineSearchFailed; break;
  }
  if (std::isfinite(r.value) && -r.value >= out.em_loglik) {
    out.theta = unpack_params(spec, start, r.x, table);
    out.loglik = -r.value;
  }
  return out;
}

Eigen::MatrixXd forecast_states(const Eigen::Ref<const Eigen::MatrixXd>& Tmat, const Eigen::Ref<const Eigen::VectorXd>& a_T, int h) {
  if (h < 1) throw std::invalid_argument("forecast_states: h must be at least 1");
  Eigen::MatrixXd out(h, a_T.size());
  Eigen::VectorXd a = a_T;
  for (int k = 0; k < h; ++k) {
    a = Tmat * a;
    out.row(k) = a.transpose();
  }
  return out;
}

Eigen::MatrixXd forecast_h(const StateSpaceSystem& sys, const SmootherOutput& sm, const Eigen::Ref<const Eigen::MatrixXd>& y,
                           int h) {
  if (h < 1) throw std::invalid_argument("forecast_h: h must be at least 1");
  const Eigen::Index T = y.rows(), N = y.cols();
  if (N != sys.Z.rows()) throw std::invalid_argument("forecast_h: history has the wrong number of series");
  if (sm.a_smooth.rows() != T) throw std::invalid_argument("forecast_h: smoother output does not match the history");
  const Eigen::MatrixXd states = forecast_states(sys.Tmat, sm.a_smooth.row(T - 1).transpose(), h);
  const Eigen::MatrixXd signal = states * sys.Z.transpose();  // h x N, pre-whitened scale

  Eigen::MatrixXd ext(T + h, N);
  ext.topRows(T) = y;
  if (sys.spec.family == Family::kDffd) {
    for (Eigen::Index i = 0; i < N; ++i) {
      const Eigen::VectorXd pi = frac_coeffs(sys.spec.d_star[i], static_cast<std::size_t>(T + h)).coeffs;
      for (int k = 0; k < h; ++k) {
        const Eigen::Index n = T + k;
        double v = signal(k, i);
        for (Eigen::Index j = 1; j <= n; ++j) v -= pi[j] * ext(n - j, i);
        ext(n, i) = v;
      }
    }
  } else {
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto& rho = sys.theta.rho[static_cast<std::size_t>(i)];
      for (int k = 0; k < h; ++k) {
        const Eigen::Index n = T + k;
        double v = signal(k, i);
        for (Eigen::Index j = 1; j <= std::min<Eigen::Index>(rho.size(), n); ++j) v += rho[j - 1] * ext(n - j, i);
        ext(n, i) = v;
      }
    }
  }
  return ext.bottomRows(h);
}

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

template <typename M>
nlohmann::json mat_json(const M& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> json_mat(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
  if (static_cast<Eigen::Index>(j.size()) != rows) throw std::invalid_argument("theta JSON: matrix has the wrong row count");
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j.at(static_cast<std::size_t>(i));
    if (static_cast<Eigen::Index>(row.size()) != cols) throw std::invalid_argument("theta JSON: ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row.at(static_cast<std::size_t>(c)).get<Scalar>();
  }
  return m;
}

}  // namespace

nlohmann::json params_to_json(const ModelSpec& spec, const ModelParams& theta) {
  nlohmann::json j;
  j["format"] = "fracfactor-theta";
  j["version"] = 1;
  j["family"] = family_name(spec.family);
  j["dims"] = {{"N", spec.n_series()}, {"r", spec.r}, {"r1", spec.r1}, {"r2", spec.r2}, {"p", spec.p}, {"p_i", spec.p_i}};
  j["approx"] = {{"v", spec.approx.v}, {"w", spec.approx.w}, {"T", spec.approx.T}, {"grid", vec_json(spec.approx.grid)}};
  j["d_star"] = vec_json(spec.d_star);
  nlohmann::json rho = nlohmann::json::array();
  for (const auto& r : theta.rho) rho.push_back(vec_json(r));
  j["params"] = {{"d", vec_json(theta.d)},         {"B", mat_json(theta.B)},   {"lambda", mat_json(theta.lambda)},
                 {"lambda_free", mat_json(theta.lambda_free)}, {"rho", rho}, {"H", vec_json(theta.H)}};
  return j;
}

std::pair<ModelSpec, ModelParams> params_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "fracfactor-theta") throw std::invalid_argument("theta JSON: unexpected format tag");
  if (j.value("version", 0) != 1) throw std::invalid_argument("theta JSON: unsupported version");
  ModelSpec spec;
  spec.family = parse_family(j.at("family").get<std::string>());
  const auto& dims = j.at("dims");
  spec.r = dims.at("r").get<int>();
  spec.r1 = dims.at("r1").get<int>();
  spec.r2 = dims.at("r2").get<int>();
  spec.p = dims.at("p").get<int>();
  spec.p_i = dims.at("p_i").get<std::vector<int>>();
  const auto& ap = j.at("approx");
  spec.approx.v = ap.at("v").get<int>();
  spec.approx.w = ap.at("w").get<int>();
  spec.approx.T = ap.at("T").get<int>();
  spec.approx.grid = json_vec(ap.at("grid"));
  spec.d_star = json_vec(j.at("d_star"));
  spec.validate();

  const auto& pj = j.at("params");
  const int N = spec.n_series(), k = spec.n_factors();
  ModelParams th;
  th.d = json_vec(pj.at("d"));
  th.B = json_mat<double>(pj.at("B"), spec.n_ar(), spec.p);
  th.lambda = json_mat<double>(pj.at("lambda"), N, k);
  th.lambda_free = json_mat<int>(pj.at("lambda_free"), N, k);
  for (const auto& r : pj.at("rho")) th.rho.push_back(json_vec(r));
  th.H = json_vec(pj.at("H"));
  th.validate(spec);
  return {spec, th};
}

}  // namespace fracfactor
