#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/polynomial.hpp"
#include "fracfactor/statespace.hpp"
#include "statespace_detail.hpp"

namespace fracfactor {

std::string family_name(Family f) {
  switch (f) {
    case Family::kDffm: return "DFFM";
    case Family::kDofc: return "DOFC";
    case Family::kDffd: return "DFFD";
  }
  return "?";
}

Family parse_family(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (s == "DFFM") return Family::kDffm;
  if (s == "DOFC") return Family::kDofc;
  if (s == "DFFD") return Family::kDffd;
  throw std::invalid_argument(fmt::format("unknown model family '{}'", name));
}

int ModelSpec::n_frac() const {
  switch (family) {
    case Family::kDffm: return r;
    case Family::kDofc: return r1;
    case Family::kDffd: return 0;
  }
  return 0;
}

int ModelSpec::n_ar() const {
  switch (family) {
    case Family::kDffm: return r;
    case Family::kDofc: return r2;
    case Family::kDffd: return r;
  }
  return 0;
}

int ModelSpec::max_p_i() const {
  int m = 0;
  for (int v : p_i) m = std::max(m, v);
  return m;
}

void ModelSpec::validate() const {
  if (p_i.empty()) throw std::invalid_argument("ModelSpec: no series");
  if (p < 0) throw std::invalid_argument("ModelSpec: p must be nonnegative");
  for (int v : p_i)
    if (v < 0) throw std::invalid_argument("ModelSpec: idiosyncratic AR orders must be nonnegative");
  switch (family) {
    case Family::kDffm:
      if (r < 1) throw std::invalid_argument("ModelSpec: DFFM needs r >= 1");
      approx.validate();
      break;
    case Family::kDofc:
      if (r1 < 0 || r2 < 0 || r1 + r2 < 1) throw std::invalid_argument("ModelSpec: DOFC needs r1 + r2 >= 1");
      if (r1 > 0) approx.validate();
      break;
    case Family::kDffd:
      if (r < 1) throw std::invalid_argument("ModelSpec: DFFD needs r >= 1");
      if (d_star.size() != n_series()) throw std::invalid_argument("ModelSpec: DFFD needs one d_star per series");
      if (max_p_i() != 0) throw std::invalid_argument("ModelSpec: DFFD has white idiosyncratic errors (p_i = 0)");
      break;
  }
  if (n_factors() > n_series()) throw std::invalid_argument("ModelSpec: more factors than series");
}

ModelSpec ModelSpec::dffm(int r, int p, std::vector<int> p_i, int T) {
  ModelSpec s;
  s.family = Family::kDffm;
  s.r = r;
  s.p = p;
  s.p_i = std::move(p_i);
  s.approx = ApproxSpec::ar5(T);
  return s;
}

ModelSpec ModelSpec::dofc(int r1, int r2, int p, std::vector<int> p_i, int T) {
  ModelSpec s;
  s.family = Family::kDofc;
  s.r = r1 + r2;
  s.r1 = r1;
  s.r2 = r2;
  s.p = p;
  s.p_i = std::move(p_i);
  s.approx = ApproxSpec::arma44(T);
  return s;
}

ModelSpec ModelSpec::dffd(int r, int p, Eigen::VectorXd d_star) {
  ModelSpec s;
  s.family = Family::kDffd;
  s.r = r;
  s.p = p;
  s.p_i.assign(static_cast<std::size_t>(d_star.size()), 0);
  s.d_star = std::move(d_star);
  return s;
}

void ModelParams::validate(const ModelSpec& spec) const {
  const int N = spec.n_series(), k = spec.n_factors();
  if (d.size() != spec.n_frac()) throw std::invalid_argument("ModelParams: d has the wrong length");
  if (B.rows() != spec.n_ar() || B.cols() != spec.p) throw std::invalid_argument("ModelParams: B has the wrong shape");
  if (lambda.rows() != N || lambda.cols() != k) throw std::invalid_argument("ModelParams: lambda has the wrong shape");
  if (lambda_free.rows() != N || lambda_free.cols() != k)
    throw std::invalid_argument("ModelParams: lambda_free has the wrong shape");
  if (static_cast<int>(rho.size()) != N) throw std::invalid_argument("ModelParams: rho needs one entry per series");
  for (int i = 0; i < N; ++i)
    if (rho[i].size() != spec.p_i[i]) throw std::invalid_argument(fmt::format("ModelParams: rho[{}] has the wrong length", i));
  if (H.size() != N) throw std::invalid_argument("ModelParams: H has the wrong length");
  if (!(H.array() > 0.0).all()) throw std::invalid_argument("ModelParams: H must be positive");
}

Eigen::MatrixXi lower_triangular_mask(int N, int r, int rows) {
  Eigen::MatrixXi m = Eigen::MatrixXi::Ones(N, r);
  for (int i = 0; i < std::min(rows, N); ++i)
    for (int j = i + 1; j < r; ++j) m(i, j) = 0;
  return m;
}

Eigen::MatrixXi dofc_mask(const Eigen::Ref<const Eigen::VectorXd>& d_hat, int r1, int r2) {
  const int N = static_cast<int>(d_hat.size());
  Eigen::MatrixXi m = Eigen::MatrixXi::Ones(N, r1 + r2);
  if (r1 > 0) {
    std::vector<int> order(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return d_hat[a] < d_hat[b]; });
    for (int rank = 0; rank < N; ++rank) {
      const int block = std::min(r1 - 1, rank * r1 / N);
      for (int j = block + 1; j < r1; ++j) m(order[static_cast<std::size_t>(rank)], j) = 0;
    }
  }
  for (int i = 0; i < std::min(r2, N); ++i)
    for (int j = i + 1; j < r2; ++j) m(i, r1 + j) = 0;
  return m;
}

Eigen::MatrixXd prewhiten_obs(const Eigen::Ref<const Eigen::MatrixXd>& y, const std::vector<Eigen::VectorXd>& rho) {
  if (static_cast<Eigen::Index>(rho.size()) != y.cols()) throw std::invalid_argument("prewhiten_obs: one rho per series");
  Eigen::MatrixXd out = y;
  const Eigen::Index T = y.rows();
  for (Eigen::Index i = 0; i < y.cols(); ++i) {
    const auto& r = rho[static_cast<std::size_t>(i)];
    for (Eigen::Index t = 0; t < T; ++t)
      for (Eigen::Index j = 1; j <= std::min<Eigen::Index>(r.size(), t); ++j) out(t, i) -= r[j - 1] * y(t - j, i);
  }
  return out;
}

Eigen::MatrixXd model_observations(const ModelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& y) {
  if (spec.family != Family::kDffd) return y;
  return frac_diff_columns(y, spec.d_star);
}

Eigen::MatrixXd filter_data(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  return prewhiten_obs(x, sys.theta.rho);
}

Eigen::MatrixXd stationary_covariance(const Eigen::Ref<const Eigen::MatrixXd>& T, const Eigen::Ref<const Eigen::MatrixXd>& Q) {
  Eigen::MatrixXd A = T;
  Eigen::MatrixXd P = Q;
  for (int it = 0; it < 100; ++it) {
    const Eigen::MatrixXd next = P + A * P * A.transpose();
    A = A * A;
    const double change = (next - P).cwiseAbs().maxCoeff();
    P = next;
    if (change <= 1e-15 * std::max(1.0, P.cwiseAbs().maxCoeff()) || A.cwiseAbs().maxCoeff() < 1e-300) break;
  }
  return 0.5 * (P + P.transpose());
}

namespace detail {

Layout make_layout(const ModelSpec& spec) {
  Layout L;
  const int maxp = spec.max_p_i();
  auto add_group = [&](int count, int u, bool frac, bool ar, bool stationary) {
    const int offset = L.s;
    for (int q = 0; q < count; ++q) {
      FactorSlot f;
      f.offset = offset;
      f.stride = count;
      f.pos = q;
      f.u = u;
      f.frac = frac;
      f.ar = ar;
      f.stationary_init = stationary;
      L.factors.push_back(f);
    }
    L.s += count * u;
  };
  switch (spec.family) {
    case Family::kDffm:
      add_group(spec.r, std::max(spec.p + spec.approx.v, maxp + 1), true, true, false);
      break;
    case Family::kDofc:
      if (spec.r1 > 0) add_group(spec.r1, std::max(spec.approx.v, spec.approx.w + maxp + 1), true, false, false);
      if (spec.r2 > 0) add_group(spec.r2, std::max(spec.p, maxp + 1), false, true, true);
      break;
    case Family::kDffd:
      add_group(spec.r, spec.p + 1, false, true, true);
      break;
  }
  int fi = 0, ai = 0;
  for (auto& f : L.factors) {
    f.frac_idx = f.frac ? fi++ : -1;
    f.ar_idx = f.ar ? ai++ : -1;
  }
  return L;
}

FactorDynamics factor_dynamics([[maybe_unused]] const ModelSpec& spec, const Layout& L, const ModelParams& theta, const ApproxTable* table,
                               int j, double d_override, bool* projected) {
  const FactorSlot& f = L.factors[static_cast<std::size_t>(j)];
  FactorDynamics out;
  out.c = Eigen::VectorXd::Zero(f.u);
  out.m = Eigen::VectorXd::Ones(1);
  Eigen::VectorXd a;  // approximation AR part
  if (f.frac) {
    if (!table) throw std::invalid_argument("factor_dynamics: fractional factors need an approximation table");
    const double d = std::isnan(d_override) ? theta.d[f.frac_idx] : d_override;
    bool moved = false;
    const Eigen::VectorXd phi = eval_approx(*table, d, &moved);
    if (projected && moved) *projected = true;
    a = phi.head(table->spec.v);
    out.m.resize(1 + table->spec.w);
    out.m[0] = 1.0;
    out.m.tail(table->spec.w) = phi.tail(table->spec.w);
  }
  const Eigen::VectorXd b = f.ar ? Eigen::VectorXd(theta.B.row(f.ar_idx).transpose()) : Eigen::VectorXd(0);
  if (f.frac && f.ar) {
    // Coefficients of B(L) a(L) written as 1 - sum c_k L^k.
    const int v = static_cast<int>(a.size()), p = static_cast<int>(b.size());
    for (int k = 1; k <= std::min(f.u, p + v); ++k) {
      double c = (k <= v ? a[k - 1] : 0.0) + (k <= p ? b[k - 1] : 0.0);
      for (int l = 1; l <= std::min(k - 1, p); ++l)
        if (k - l <= v) c -= b[l - 1] * a[k - l - 1];
      out.c[k - 1] = c;
    }
  } else if (f.frac) {
    out.c.head(std::min<Eigen::Index>(a.size(), f.u)) = a.head(std::min<Eigen::Index>(a.size(), f.u));
  } else {
    out.c.head(std::min<Eigen::Index>(b.size(), f.u)) = b.head(std::min<Eigen::Index>(b.size(), f.u));
  }
  return out;
}

std::vector<FactorDynamics> all_dynamics(const ModelSpec& spec, const Layout& L, const ModelParams& theta,
                                         const ApproxTable* table, bool* projected) {
  std::vector<FactorDynamics> out;
  for (int j = 0; j < L.n_factors(); ++j) out.push_back(factor_dynamics(spec, L, theta, table, j, NAN, projected));
  return out;
}

Eigen::MatrixXd loading_basis(const Layout& L, const std::vector<FactorDynamics>& dyn, const Eigen::VectorXd& rho) {
  // Row j: state weights of the pre-whitened signal per unit loading on factor j.
  const int k = L.n_factors();
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(k, L.s);
  for (int j = 0; j < k; ++j) {
    const auto& m = dyn[static_cast<std::size_t>(j)].m;
    for (int lag = 0; lag <= rho.size(); ++lag) {
      const double psi = lag == 0 ? 1.0 : -rho[lag - 1];
      for (int l = 0; l < m.size(); ++l) {
        if (lag + l >= L.factors[static_cast<std::size_t>(j)].u)
          throw std::logic_error("loading_basis: state chain too short for the lag structure");
        G(j, L.index(j, lag + l)) += psi * m[l];
      }
    }
  }
  return G;
}

Eigen::MatrixXd lag_weights(const Layout& L, const std::vector<FactorDynamics>& dyn, const Eigen::VectorXd& lambda_i, int p_i) {
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(p_i + 1, L.s);
  for (int lag = 0; lag <= p_i; ++lag)
    for (int j = 0; j < L.n_factors(); ++j) {
      const auto& m = dyn[static_cast<std::size_t>(j)].m;
      for (int l = 0; l < m.size(); ++l) W(lag, L.index(j, lag + l)) += lambda_i[j] * m[l];
    }
  return W;
}

Eigen::MatrixXd companion_of(const Eigen::VectorXd& c) {
  const Eigen::Index u = c.size();
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(u, u);
  C.row(0) = c.transpose();
  if (u > 1) C.bottomLeftCorner(u - 1, u - 1).setIdentity();
  return C;
}

Eigen::MatrixXd chain_initial_covariance(const FactorSlot& f, const Eigen::VectorXd& c) {
  Eigen::MatrixXd E = Eigen::MatrixXd::Zero(f.u, f.u);
  E(0, 0) = 1.0;
  if (!f.stationary_init) return E;
  return stationary_covariance(companion_of(c), E);
}

}  // namespace detail

namespace {

StateSpaceSystem assemble(const ModelSpec& spec, const ModelParams& theta, const ApproxTable* table) {
  spec.validate();
  theta.validate(spec);
  const detail::Layout L = detail::make_layout(spec);
  const int N = spec.n_series(), k = L.n_factors(), s = L.s;
  StateSpaceSystem sys;
  sys.spec = spec;
  sys.theta = theta;
  bool projected = false;
  const auto dyn = detail::all_dynamics(spec, L, theta, table, &projected);
  sys.approx_projected = projected;

  sys.Tmat = Eigen::MatrixXd::Zero(s, s);
  sys.R = Eigen::MatrixXd::Zero(s, k);
  sys.P1 = Eigen::MatrixXd::Zero(s, s);
  for (int j = 0; j < k; ++j) {
    const auto& f = L.factors[static_cast<std::size_t>(j)];
    for (int lag = 0; lag < f.u; ++lag) sys.Tmat(L.index(j, 0), L.index(j, lag)) = dyn[static_cast<std::size_t>(j)].c[lag];
    for (int lag = 1; lag < f.u; ++lag) sys.Tmat(L.index(j, lag), L.index(j, lag - 1)) = 1.0;
    sys.R(L.index(j, 0), j) = 1.0;
    const Eigen::MatrixXd P = detail::chain_initial_covariance(f, dyn[static_cast<std::size_t>(j)].c);
    for (int a = 0; a < f.u; ++a)
      for (int b = 0; b < f.u; ++b) sys.P1(L.index(j, a), L.index(j, b)) = P(a, b);
  }
  sys.Q = Eigen::MatrixXd::Identity(k, k);
  sys.a1 = Eigen::VectorXd::Zero(s);
  sys.Z.resize(N, s);
  for (int i = 0; i < N; ++i) {
    const Eigen::MatrixXd G = detail::loading_basis(L, dyn, theta.rho[static_cast<std::size_t>(i)]);
    sys.Z.row(i) = theta.lambda.row(i) * G;
  }
  sys.H = theta.H;
  sys.F = detail::loading_basis(L, dyn, Eigen::VectorXd());
  return sys;
}

}  // namespace

StateSpaceSystem build_dffm(const ModelSpec& spec, const ModelParams& theta, const ApproxTable& table) {
  if (spec.family != Family::kDffm) throw std::invalid_argument("build_dffm: spec is not DFFM");
  return assemble(spec, theta, &table);
}

StateSpaceSystem build_dofc(const ModelSpec& spec, const ModelParams& theta, const ApproxTable& table) {
  if (spec.family != Family::kDofc) throw std::invalid_argument("build_dofc: spec is not DOFC");
  return assemble(spec, theta, &table);
}

StateSpaceSystem build_dffd(const ModelSpec& spec, const ModelParams& theta) {
  if (spec.family != Family::kDffd) throw std::invalid_argument("build_dffd: spec is not DFFD");
  return assemble(spec, theta, nullptr);
}

StateSpaceSystem build_system(const ModelSpec& spec, const ModelParams& theta, const ApproxTable* table) {
  if (spec.family != Family::kDffd && spec.n_frac() > 0 && !table)
    throw std::invalid_argument(fmt::format("build_system: {} needs an approximation table", family_name(spec.family)));
  return assemble(spec, theta, table);
}

}  // namespace fracfactor
