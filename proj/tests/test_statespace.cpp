#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/polynomial.hpp"
#include "fracfactor/simulate.hpp"
#include "fracfactor/statespace.hpp"
#include "support.hpp"

using namespace fracfactor;
using testing_support::randn;
using testing_support::randn_vec;
using testing_support::trace_r2;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

StateSpaceSystem random_system(int N, int s, std::uint64_t seed, bool full_rank_noise = false) {
  StateSpaceSystem sys;
  Eigen::MatrixXd T = randn(s, s, seed);
  T *= 0.9 / std::max(spectral_radius(T), 1e-3);
  sys.Tmat = T;
  sys.Z = randn(N, s, seed + 1);
  const int q = full_rank_noise ? s : std::max(1, s - 1);
  sys.R = randn(s, q, seed + 2);
  sys.Q = Eigen::MatrixXd::Identity(q, q);
  sys.H = randn_vec(N, seed + 3).array().abs() + 0.2;
  sys.a1 = randn_vec(s, seed + 4);
  const Eigen::MatrixXd A = randn(s, s, seed + 5);
  sys.P1 = A * A.transpose() + 0.1 * Eigen::MatrixXd::Identity(s, s);
  return sys;
}

// Joint Gaussian log-density of the stacked observations.
double brute_loglik(const StateSpaceSystem& sys, const Eigen::MatrixXd& y) {
  const int T = static_cast<int>(y.rows()), N = static_cast<int>(y.cols()), s = static_cast<int>(sys.Tmat.rows());
  std::vector<Eigen::MatrixXd> V(static_cast<std::size_t>(T)), Tpow(static_cast<std::size_t>(T));
  std::vector<Eigen::VectorXd> mean(static_cast<std::size_t>(T));
  V[0] = sys.P1;
  mean[0] = sys.a1;
  Tpow[0] = Eigen::MatrixXd::Identity(s, s);
  const Eigen::MatrixXd RQR = sys.R * sys.Q * sys.R.transpose();
  for (int t = 1; t < T; ++t) {
    V[t] = sys.Tmat * V[t - 1] * sys.Tmat.transpose() + RQR;
    mean[t] = sys.Tmat * mean[t - 1];
    Tpow[t] = sys.Tmat * Tpow[t - 1];
  }
  Eigen::MatrixXd S(T * N, T * N);
  Eigen::VectorXd mu(T * N), yy(T * N);
  for (int t = 0; t < T; ++t) {
    mu.segment(t * N, N) = sys.Z * mean[t];
    yy.segment(t * N, N) = y.row(t).transpose();
    for (int u = 0; u <= t; ++u) {
      const Eigen::MatrixXd C = sys.Z * Tpow[t - u] * V[u] * sys.Z.transpose();
      S.block(t * N, u * N, N, N) = C;
      S.block(u * N, t * N, N, N) = C.transpose();
    }
    S.block(t * N, t * N, N, N) += sys.H.asDiagonal().toDenseMatrix();
  }
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  const Eigen::VectorXd e = yy - mu;
  const Eigen::VectorXd w = llt.matrixL().solve(e);
  double logdet = 0.0;
  for (int k = 0; k < T * N; ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
  return -0.5 * (T * N * kLog2Pi + logdet + w.squaredNorm());
}

const ApproxTable& arma44() { return testing_support::table(ApproxSpec::arma44(300)); }
const ApproxTable& ar5() { return testing_support::table(ApproxSpec::ar5(300)); }

}  // namespace

TEST_CASE("prewhiten_obs") {
  const Eigen::MatrixXd y = randn(30, 3, 1);
  std::vector<Eigen::VectorXd> zero(3, Eigen::VectorXd::Zero(2));
  CHECK(prewhiten_obs(y, zero) == y);
  std::vector<Eigen::VectorXd> one(3, Eigen::VectorXd::Ones(1));
  const Eigen::MatrixXd d = prewhiten_obs(y, one);
  for (int i = 0; i < 3; ++i) CHECK((d.col(i) - frac_diff(y.col(i), 1.0)).cwiseAbs().maxCoeff() < 1e-14);
  std::vector<Eigen::VectorXd> rho = {randn_vec(1, 2), randn_vec(3, 3), Eigen::VectorXd(0)};
  const Eigen::MatrixXd out = prewhiten_obs(y, rho);
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 30; ++t) {
      double v = y(t, i);
      for (int j = 1; j <= rho[i].size(); ++j)
        if (t - j >= 0) v -= rho[i][j - 1] * y(t - j, i);
      CHECK(std::abs(out(t, i) - v) < 1e-12);
    }
}

TEST_CASE("build_dffm") {
  const ApproxTable& tab = ar5();
  SUBCASE("d = 0 and p = 0 collapse to a static factor") {
    ModelSpec spec = ModelSpec::dffm(1, 0, {1, 1, 0}, 300);
    ModelParams th = example_params(spec, 1);
    th.d[0] = 0.0;
    const StateSpaceSystem sys = build_dffm(spec, th, tab);
    CHECK(sys.Tmat.row(0).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("top row is the product polynomial and Z is [Lambda 0] without rho") {
    ModelSpec spec = ModelSpec::dffm(1, 2, {0, 0, 0, 0}, 300);
    ModelParams th = example_params(spec, 2);
    th.d[0] = 0.55;
    th.B(0, 0) = 0.4;
    th.B(0, 1) = -0.2;
    const StateSpaceSystem sys = build_dffm(spec, th, tab);
    const Eigen::VectorXd a = eval_approx(tab, 0.55).head(5);
    // (1 - 0.4 L + 0.2 L^2)(1 - a_1 L - ... - a_5 L^5) written as 1 - c(L)
    Eigen::VectorXd pb(3), pa(6);
    pb << 1.0, -0.4, 0.2;
    pa << 1.0, -a;
    Eigen::VectorXd prod = Eigen::VectorXd::Zero(8);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 6; ++j) prod[i + j] += pb[i] * pa[j];
    REQUIRE(sys.Tmat.cols() == 7);
    for (int k = 1; k <= 7; ++k) CHECK(std::abs(sys.Tmat(0, k - 1) + prod[k]) < 1e-12);
    Eigen::MatrixXd expectZ = Eigen::MatrixXd::Zero(4, 7);
    expectZ.col(0) = th.lambda.col(0);
    CHECK((sys.Z - expectZ).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("d outside the table") {
    ModelSpec spec = ModelSpec::dffm(1, 1, {0, 0}, 300);
    ModelParams th = example_params(spec, 3);
    th.d[0] = 1.6;
    CHECK_THROWS_AS(build_dffm(spec, th, tab), std::out_of_range);
  }
}

TEST_CASE("build_dofc") {
  const ApproxTable& tab = arma44();
  SUBCASE("no fractional block reduces to the DFFD dynamics") {
    ModelSpec so = ModelSpec::dofc(0, 1, 2, {0, 0, 0}, 300);
    ModelSpec sd = ModelSpec::dffd(1, 2, Eigen::VectorXd::Zero(3));
    ModelParams th = example_params(sd, 4);
    th.B(0, 1) = 0.2;
    const StateSpaceSystem a = build_dofc(so, th, tab), b = build_dffd(sd, th);
    // the DFFD block carries one spare lag that nothing loads on
    const Eigen::Index u = a.Tmat.rows();
    REQUIRE(b.Tmat.rows() >= u);
    CHECK((a.Tmat - b.Tmat.topLeftCorner(u, u)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.Z - b.Z.leftCols(u)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(b.Z.rightCols(b.Z.cols() - u).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.P1 - b.P1.topLeftCorner(u, u)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("Z^(1) is [Lambda 0] when rho = 0 and the filter is the identity") {
    ModelSpec spec = ModelSpec::dofc(1, 0, 1, {0, 0}, 300);
    spec.approx = ar5().spec;
    ModelParams th = example_params(spec, 5);
    const StateSpaceSystem sys = build_dofc(spec, th, ar5());
    CHECK(sys.Z.rightCols(sys.Z.cols() - 1).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((sys.Z.col(0) - th.lambda.col(0)).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("state recursion reproduces direct filtering of the shocks") {
    ModelSpec spec = ModelSpec::dofc(1, 1, 1, {2, 1, 0}, 300);
    ModelParams th = example_params(spec, 6);
    th.d[0] = 0.65;
    th.rho[0] = Eigen::Vector2d(0.4, -0.2);
    th.rho[1] = Eigen::VectorXd::Constant(1, 0.5);
    const StateSpaceSystem sys = build_dofc(spec, th, tab);
    const int T = 80;
    const Eigen::MatrixXd zeta = randn(T, 2, 7);
    // state recursion with zero pre-sample
    Eigen::MatrixXd signal(T, 3);
    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(sys.states());
    for (int t = 0; t < T; ++t) {
      alpha = (sys.Tmat * alpha + sys.R * zeta.row(t).transpose()).eval();
      signal.row(t) = (sys.Z * alpha).transpose();
    }
    // direct: A(L)^{-1} then M(L) for the fractional factor, B(L)^{-1} for the other
    const Eigen::VectorXd phi = eval_approx(tab, 0.65);
    Eigen::VectorXd x(T), f1(T), f2(T);
    for (int t = 0; t < T; ++t) {
      double v = zeta(t, 0);
      for (int k = 1; k <= 4; ++k)
        if (t - k >= 0) v += phi[k - 1] * x[t - k];
      x[t] = v;
    }
    for (int t = 0; t < T; ++t) {
      double v = x[t];
      for (int k = 1; k <= 4; ++k)
        if (t - k >= 0) v += phi[3 + k] * x[t - k];
      f1[t] = v;
      f2[t] = zeta(t, 1) + (t > 0 ? th.B(0, 0) * f2[t - 1] : 0.0);
    }
    for (int i = 0; i < 3; ++i) {
      const Eigen::VectorXd g = th.lambda(i, 0) * f1 + th.lambda(i, 1) * f2;
      const Eigen::VectorXd direct = prewhiten_obs(g, {th.rho[i]});
      CHECK((signal.col(i) - direct).cwiseAbs().maxCoeff() < 1e-8);
    }
    // factor read-out
    Eigen::MatrixXd F(T, 2);
    F.col(0) = f1;
    F.col(1) = f2;
    alpha.setZero();
    for (int t = 0; t < T; ++t) {
      alpha = (sys.Tmat * alpha + sys.R * zeta.row(t).transpose()).eval();
      CHECK(((sys.F * alpha).transpose() - F.row(t)).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("build_dffd") {
  ModelSpec spec = ModelSpec::dffd(1, 1, Eigen::VectorXd::Zero(2));
  ModelParams th = example_params(spec, 8);
  th.B(0, 0) = 0.5;
  const StateSpaceSystem sys = build_dffd(spec, th);
  Eigen::Matrix2d expect;
  expect << 0.5, 0.0, 1.0, 0.0;
  CHECK(sys.Tmat == expect);
  CHECK(sys.Z.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(sys.Q == Eigen::MatrixXd::Identity(1, 1));

  ModelSpec s3 = ModelSpec::dffd(2, 3, Eigen::VectorXd::Zero(4));
  ModelParams t3 = example_params(s3, 9);
  t3.B.row(0) << 0.5, 0.2, -0.1;
  t3.B.row(1) << -0.3, 0.1, 0.4;
  REQUIRE(ar_is_stable(t3.B.row(0).transpose()));
  REQUIRE(ar_is_stable(t3.B.row(1).transpose()));
  const StateSpaceSystem s = build_dffd(s3, t3);
  CHECK(spectral_radius(s.Tmat) < 1.0);
  // impulse response of the state recursion against the Wold recursion
  for (int j = 0; j < 2; ++j) {
    const Eigen::VectorXd wold = arma_wold(t3.B.row(j).transpose(), Eigen::VectorXd(0), 30);
    Eigen::VectorXd alpha = s.R.col(j);
    for (int k = 0; k < 30; ++k) {
      CHECK(std::abs((s.F * alpha)[j] - wold[k]) < 1e-12);
      alpha = (s.Tmat * alpha).eval();
    }
  }
}

TEST_CASE("Kalman log-likelihood equals the joint Gaussian density") {
  for (int rep = 0; rep < 5; ++rep) {
    const int N = 1 + rep % 3, s = 1 + (rep + 1) % 4;
    const StateSpaceSystem sys = random_system(N, s, 100 + 10 * rep);
    const Eigen::MatrixXd y = randn(20, N, 200 + rep);
    const double brute = brute_loglik(sys, y);
    CHECK(std::abs(kalman_loglik(sys, y) - brute) < 1e-8);
    CHECK(std::abs(kalman_filter_smoother(sys, y).loglik - brute) < 1e-8);
  }
  const StateSpaceSystem sys = random_system(3, 2, 7);
  const Eigen::MatrixXd y = randn(20, 3, 8);
  CHECK(std::abs(kalman_loglik(sys, y) - brute_loglik(sys, y)) < 1e-8);
}

TEST_CASE("Kalman smoother properties") {
  SUBCASE("noiseless identity observation") {
    StateSpaceSystem sys = random_system(3, 3, 11, true);
    sys.Z = Eigen::MatrixXd::Identity(3, 3);
    sys.H = Eigen::VectorXd::Constant(3, 1e-12);
    const Eigen::MatrixXd y = randn(25, 3, 12);
    const SmootherOutput sm = kalman_filter_smoother(sys, y);
    CHECK((sm.a_smooth - y).cwiseAbs().maxCoeff() < 1e-6);
  }
  SUBCASE("smoothing never increases variances and keeps them symmetric PSD") {
    const StateSpaceSystem sys = random_system(2, 4, 13);
    const SmootherOutput sm = kalman_filter_smoother(sys, randn(30, 2, 14));
    for (int t = 0; t < 30; ++t) {
      for (int i = 0; i < 4; ++i) CHECK(sm.P_smooth[t](i, i) <= sm.P_filt[t](i, i) + 1e-10);
      CHECK((sm.P_smooth[t] - sm.P_smooth[t].transpose()).cwiseAbs().maxCoeff() < 1e-8);
      CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sm.P_smooth[t]).eigenvalues().minCoeff() > -1e-8);
    }
    CHECK(std::isfinite(sm.loglik));
  }
  SUBCASE("permuting series leaves the likelihood unchanged") {
    const StateSpaceSystem sys = random_system(3, 3, 15);
    const Eigen::MatrixXd y = randn(40, 3, 16);
    const std::vector<int> perm = {2, 0, 1};
    StateSpaceSystem p = sys;
    Eigen::MatrixXd yp(40, 3);
    for (int i = 0; i < 3; ++i) {
      p.Z.row(i) = sys.Z.row(perm[i]);
      p.H[i] = sys.H[perm[i]];
      yp.col(i) = y.col(perm[i]);
    }
    CHECK(std::abs(kalman_loglik(sys, y) - kalman_loglik(p, yp)) < 1e-10);
  }
  SUBCASE("a non-positive-definite innovation covariance names the period") {
    StateSpaceSystem sys = random_system(2, 2, 17);
    sys.P1 = -100.0 * Eigen::MatrixXd::Identity(2, 2);
    try {
      kalman_filter_smoother(sys, randn(10, 2, 18));
      FAIL("expected EstimationError");
    } catch (const EstimationError& e) {
      CHECK(std::string(e.what()).find("t = 0") != std::string::npos);
    }
  }
}

TEST_CASE("EM M-step for the loadings is OLS on smoothed factors") {
  const int N = 5, T = 200;
  ModelSpec spec = ModelSpec::dffd(2, 1, Eigen::VectorXd::Zero(N));
  ModelParams th = example_params(spec, 19);
  th.lambda_free = Eigen::MatrixXi::Ones(N, 2);
  th.lambda = randn(N, 2, 20);
  th.H = Eigen::VectorXd::Constant(N, 1e-8);
  const Simulation sim = simulate_exact(spec, th, T, 21);
  ModelParams start = th;
  start.lambda += 0.1 * randn(N, 2, 22);
  const StateSpaceSystem sys = build_system(spec, start, nullptr);
  const SmootherOutput sm = kalman_filter_smoother(sys, filter_data(sys, sim.y));
  const Eigen::MatrixXd fhat = sm.a_smooth * sys.F.transpose();
  const Eigen::MatrixXd ols = fhat.colPivHouseholderQr().solve(sim.y).transpose();
  const EmResult em = em_iterate(spec, start, sim.y, nullptr, 1);
  CHECK((em.theta.lambda - ols).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("EM is monotone on simulated DFFD data") {
  ModelSpec spec = ModelSpec::dffd(1, 1, Eigen::VectorXd::Constant(10, 0.3));
  const ModelParams th = example_params(spec, 23);
  const Simulation sim = simulate_exact(spec, th, 300, 24);
  ModelParams start = th;
  start.lambda *= 0.6;
  start.H *= 2.0;
  start.B *= 0.3;
  const EmResult em = em_iterate(spec, start, model_observations(spec, sim.y), nullptr, 10);
  REQUIRE(em.loglik_trace.size() == 11);
  for (std::size_t k = 1; k < em.loglik_trace.size(); ++k) CHECK(em.loglik_trace[k] >= em.loglik_trace[k - 1] - 1e-10);
  CHECK_FALSE(em.numerical_failure);
}

TEST_CASE("maximum likelihood on a small DFFD system") {
  const int N = 4;
  ModelSpec spec = ModelSpec::dffd(1, 1, Eigen::VectorXd::Zero(N));
  const ModelParams th = example_params(spec, 25);
  const Simulation sim = simulate_exact(spec, th, 200, 26);
  const MlResult ml = fit_ml(spec, th, sim.y, nullptr, 20, 500);
  CHECK(ml.loglik >= ml.em_loglik - 1e-8);

  SUBCASE("one EM step from the MLE is a fixed point") {
    const EmResult em = em_iterate(spec, ml.theta, sim.y, nullptr, 1);
    const Eigen::VectorXd a = pack_params(spec, ml.theta, nullptr), b = pack_params(spec, em.theta, nullptr);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-6);
  }
  SUBCASE("no single-coordinate perturbation raises the likelihood") {
    const Eigen::VectorXd x = pack_params(spec, ml.theta, nullptr);
    auto ll = [&](const Eigen::VectorXd& v) {
      const StateSpaceSystem s = build_system(spec, unpack_params(spec, ml.theta, v, nullptr), nullptr);
      return kalman_loglik(s, filter_data(s, sim.y));
    };
    const double base = ll(x);
    for (Eigen::Index k = 0; k < x.size(); ++k)
      for (double step : {-1e-3, 1e-3}) {
        Eigen::VectorXd y = x;
        y[k] += step;
        CHECK(ll(y) <= base + 1e-6);
      }
  }
}

TEST_CASE("fit_ml recovers DFFD loadings") {
  const int N = 20;
  ModelSpec spec = ModelSpec::dffd(1, 1, Eigen::VectorXd::Constant(N, 0.4));
  const ModelParams th = example_params(spec, 27);
  const Simulation sim = simulate_exact(spec, th, 300, 28);
  ModelParams start = th;
  start.lambda = 0.5 * th.lambda + 0.3 * randn(N, 1, 29).cwiseProduct(th.lambda_free.cast<double>());
  start.H *= 1.5;
  const MlResult ml = fit_ml(spec, start, model_observations(spec, sim.y), nullptr, 10, 200);
  CHECK(trace_r2(ml.theta.lambda, th.lambda) >= 0.9);
}

TEST_CASE("fit_ml recovers the DOFC memory parameter") {
  const int N = 20, T = 500;
  const ApproxTable& tab = testing_support::table(ApproxSpec::arma44(T));
  ModelSpec spec = ModelSpec::dofc(1, 1, 1, std::vector<int>(N, 0), T);
  spec.approx = tab.spec;
  ModelParams th = example_params(spec, 40);
  th.d[0] = 0.7;
  const Simulation sim = simulate_exact(spec, th, T, 41);
  ModelParams start = th;
  start.d[0] = 0.45;
  start.B *= 0.5;
  start.H *= 1.5;
  const MlResult ml = fit_ml(spec, start, sim.y, &tab, 10, 100);
  CHECK(ml.theta.d[0] >= 0.55);
  CHECK(ml.theta.d[0] <= 0.85);
}

TEST_CASE("analytic score matches central differences") {
  const ApproxTable& tab = arma44();
  const std::vector<ModelSpec> specs = {ModelSpec::dofc(1, 1, 1, {1, 0, 2, 1}, 300),
                                        ModelSpec::dffd(1, 2, Eigen::VectorXd::Constant(4, 0.3))};
  for (ModelSpec spec : specs) {
    if (spec.family == Family::kDofc) spec.approx = tab.spec;
    const ApproxTable* t = spec.family == Family::kDofc ? &tab : nullptr;
    const ModelParams th = example_params(spec, 42);
    const Simulation sim = simulate_exact(spec, th, 150, 43);
    const Eigen::MatrixXd x = model_observations(spec, sim.y);
    ModelParams start = th;
    start.lambda *= 0.8;
    start.H *= 1.3;
    const Eigen::VectorXd p = pack_params(spec, start, t);
    const Eigen::VectorXd g = loglik_score(spec, start, p, x, t);
    auto ll = [&](const Eigen::VectorXd& v) {
      const StateSpaceSystem s = build_system(spec, unpack_params(spec, start, v, t), t);
      return kalman_loglik(s, filter_data(s, x));
    };
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double h = 1e-5 * (1.0 + std::abs(p[k]));
      Eigen::VectorXd a = p, b = p;
      a[k] += h;
      b[k] -= h;
      const double fd = (ll(a) - ll(b)) / (2.0 * h);
      CAPTURE(k);
      CHECK(g[k] == doctest::Approx(fd).epsilon(1e-4).scale(1.0));
    }
  }
}

TEST_CASE("pack and unpack are inverse") {
  const ApproxTable& tab = arma44();
  ModelSpec spec = ModelSpec::dofc(2, 1, 2, {1, 0, 2, 1}, 300);
  ModelParams th = example_params(spec, 30);
  th.rho[2] = Eigen::Vector2d(0.3, 0.2);
  const Eigen::VectorXd x = pack_params(spec, th, &tab);
  const ModelParams back = unpack_params(spec, th, x, &tab);
  CHECK((back.d - th.d).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((back.B - th.B).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((back.lambda - th.lambda).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((back.H - th.H).cwiseAbs().maxCoeff() < 1e-12);
  for (int i = 0; i < 4; ++i) CHECK((back.rho[i] - th.rho[i]).norm() < 1e-12);
  CHECK((pack_params(spec, back, &tab) - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forecasts") {
  SUBCASE("scalar AR(1) state") {
    const Eigen::MatrixXd T = Eigen::MatrixXd::Constant(1, 1, 0.5);
    const Eigen::MatrixXd f = forecast_states(T, Eigen::VectorXd::Constant(1, 2.0), 3);
    CHECK(f(0, 0) == 1.0);
    CHECK(f(1, 0) == 0.5);
    CHECK(f(2, 0) == 0.25);
    CHECK_THROWS_AS(forecast_states(T, Eigen::VectorXd::Constant(1, 2.0), 0), std::invalid_argument);
  }
  SUBCASE("zero transition forecasts zero") {
    ModelSpec spec = ModelSpec::dffd(1, 1, Eigen::VectorXd::Zero(3));
    ModelParams th = example_params(spec, 31);
    th.B.setZero();
    const StateSpaceSystem sys = build_dffd(spec, th);
    const Eigen::MatrixXd y = randn(40, 3, 32);
    const SmootherOutput sm = kalman_filter_smoother(sys, filter_data(sys, y));
    CHECK(forecast_h(sys, sm, y, 4).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(forecast_h(sys, sm, y, 0), std::invalid_argument);
  }
  SUBCASE("DFFD levels follow the inverse difference of the extended path") {
    const Eigen::Vector3d dstar(0.4, 1.0, 0.75);
    ModelSpec spec = ModelSpec::dffd(1, 2, dstar);
    const ModelParams th = example_params(spec, 33);
    const Simulation sim = simulate_exact(spec, th, 120, 34);
    const StateSpaceSystem sys = build_dffd(spec, th);
    const Eigen::MatrixXd x = model_observations(spec, sim.y);
    const SmootherOutput sm = kalman_filter_smoother(sys, filter_data(sys, x));
    const int h = 5;
    const Eigen::MatrixXd fc = forecast_h(sys, sm, sim.y, h);
    const Eigen::MatrixXd xhat = forecast_states(sys.Tmat, sm.a_smooth.row(119).transpose(), h) * sys.Z.transpose();
    for (int i = 0; i < 3; ++i) {
      Eigen::VectorXd ext(120 + h);
      ext << x.col(i), xhat.col(i);
      const Eigen::VectorXd levels = frac_cumulate(ext, dstar[i]);
      CHECK((levels.tail(h) - fc.col(i)).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  SUBCASE("pre-whitening is undone for DFFM and DOFC") {
    const ApproxTable& tab = arma44();
    ModelSpec spec = ModelSpec::dofc(1, 1, 1, {1, 2}, 300);
    ModelParams th = example_params(spec, 35);
    th.rho[1] = Eigen::Vector2d(0.2, 0.1);
    const Simulation sim = simulate_exact(spec, th, 100, 36);
    const StateSpaceSystem sys = build_dofc(spec, th, tab);
    const SmootherOutput sm = kalman_filter_smoother(sys, filter_data(sys, sim.y));
    const int h = 4;
    const Eigen::MatrixXd fc = forecast_h(sys, sm, sim.y, h);
    const Eigen::MatrixXd sig = forecast_states(sys.Tmat, sm.a_smooth.row(99).transpose(), h) * sys.Z.transpose();
    for (int i = 0; i < 2; ++i) {
      Eigen::VectorXd ext(100 + h);
      ext << sim.y.col(i), fc.col(i);
      const Eigen::MatrixXd w = prewhiten_obs(ext, {th.rho[i]});
      CHECK((w.col(0).tail(h) - sig.col(i)).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("parameter JSON roundtrip") {
  const ApproxTable& tab = arma44();
  ModelSpec spec = ModelSpec::dofc(1, 2, 1, {1, 0, 1, 2}, 300);
  spec.approx = tab.spec;
  ModelParams th = example_params(spec, 37);
  th.rho[3] = Eigen::Vector2d(0.1, 0.05);
  const nlohmann::json j = params_to_json(spec, th);
  const auto [s2, t2] = params_from_json(nlohmann::json::parse(j.dump()));
  CHECK(s2.family == spec.family);
  CHECK(s2.r1 == 1);
  CHECK(s2.r2 == 2);
  CHECK(s2.p_i == spec.p_i);
  CHECK(approx_cache_key(s2.approx) == approx_cache_key(spec.approx));
  CHECK(t2.d == th.d);
  CHECK(t2.B == th.B);
  CHECK(t2.lambda == th.lambda);
  CHECK(t2.lambda_free == th.lambda_free);
  CHECK(t2.H == th.H);
  for (int i = 0; i < 4; ++i) CHECK(t2.rho[i] == th.rho[i]);
  nlohmann::json bad = j;
  bad["format"] = "something-else";
  CHECK_THROWS(params_from_json(bad));
}

TEST_CASE("identification masks") {
  const Eigen::MatrixXi m = lower_triangular_mask(5, 3, 3);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) CHECK(m(i, j) == (i < 3 && j > i ? 0 : 1));
  const Eigen::VectorXd d = (Eigen::VectorXd(6) << 0.9, 0.1, 0.5, 0.3, 0.8, 0.2).finished();
  const Eigen::MatrixXi o = dofc_mask(d, 2, 1);
  // the three least persistent series load only on the first fractional factor
  for (int i : {1, 3, 5}) CHECK(o(i, 1) == 0);
  for (int i : {0, 2, 4}) CHECK(o(i, 1) == 1);
  CHECK(o.col(2).minCoeff() == 1);
}

TEST_CASE("smoothed states track simulated states for every family") {
  const int N = 30, T = 400;
  const ApproxTable& t44 = testing_support::table(ApproxSpec::arma44(400));
  const ApproxTable& t50 = testing_support::table(ApproxSpec::ar5(400));
  const std::vector<ModelSpec> specs = {ModelSpec::dffm(1, 1, std::vector<int>(N, 1), 400),
                                        ModelSpec::dofc(1, 1, 1, std::vector<int>(N, 1), 400),
                                        ModelSpec::dffd(2, 1, Eigen::VectorXd::Constant(N, 0.3))};
  for (const auto& spec : specs) {
    const ApproxTable* tab = spec.family == Family::kDofc ? &t44 : spec.family == Family::kDffm ? &t50 : nullptr;
    const ModelParams th = example_params(spec, 38);
    const StateSpaceSystem sys = build_system(spec, th, tab);
    const Simulation sim = simulate_system(sys, T, 39);
    const Eigen::MatrixXd x = model_observations(spec, sim.y);
    const SmootherOutput sm = kalman_filter_smoother(sys, filter_data(sys, x));
    CAPTURE(family_name(spec.family));
    CHECK(trace_r2(sm.a_smooth, sim.states) >= 0.8);
  }
}
