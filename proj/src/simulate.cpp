#include "fracfactor/simulate.hpp"

#include <random>
#include <stdexcept>

#include "fracfactor/frac.hpp"

namespace fracfactor {

namespace {

constexpr int kBurnIn = 200;

Eigen::MatrixXd normal_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

// Stationary AR path of length T with unit (or `scale`) innovations, after a burn-in.
Eigen::VectorXd ar_path(const Eigen::VectorXd& a, int T, double scale, std::mt19937_64& rng) {
  const int n = T + kBurnIn;
  const Eigen::VectorXd e = normal_matrix(n, 1, rng).col(0) * scale;
  Eigen::VectorXd x(n);
  for (int t = 0; t < n; ++t) {
    double v = e[t];
    for (int k = 1; k <= std::min<int>(static_cast<int>(a.size()), t); ++k) v += a[k - 1] * x[t - k];
    x[t] = v;
  }
  return x.tail(T);
}

Eigen::VectorXd recolour(const Eigen::VectorXd& white, const Eigen::VectorXd& rho) {
  Eigen::VectorXd x = white;
  for (Eigen::Index t = 0; t < x.size(); ++t)
    for (Eigen::Index k = 1; k <= std::min<Eigen::Index>(rho.size(), t); ++k) x[t] += rho[k - 1] * x[t - k];
  return x;
}

}  // namespace

Simulation simulate_pc_dgp(int N, int T, double d, int r, std::uint64_t seed) {
  if (N < 1 || T < 2 || r < 1) throw std::invalid_argument("simulate_pc_dgp: need N >= 1, T >= 2, r >= 1");
  std::mt19937_64 rng(seed);
  Simulation out;
  out.lambda = normal_matrix(N, r, rng);
  const Eigen::MatrixXd z = normal_matrix(T, r, rng);
  out.factors.resize(T, r);
  for (int j = 0; j < r; ++j) out.factors.col(j) = frac_cumulate(z.col(j), d);
  out.y = out.factors * out.lambda.transpose() + normal_matrix(T, N, rng);
  return out;
}

Simulation simulate_exact(const ModelSpec& spec, const ModelParams& theta, int T, std::uint64_t seed) {
  spec.validate();
  theta.validate(spec);
  if (T < 2) throw std::invalid_argument("simulate_exact: T must be at least 2");
  std::mt19937_64 rng(seed);
  const int N = spec.n_series(), k = spec.n_factors();
  Simulation out;
  out.lambda = theta.lambda;
  out.factors.resize(T, k);
  int ai = 0;
  for (int j = 0; j < k; ++j) {
    const bool frac = spec.family == Family::kDffm || (spec.family == Family::kDofc && j < spec.r1);
    const bool ar = spec.family != Family::kDofc || j >= spec.r1;
    Eigen::VectorXd f;
    if (ar) {
      f = ar_path(theta.B.row(ai++).transpose(), T, 1.0, rng);
    } else {
      f = normal_matrix(T, 1, rng).col(0);
    }
    if (frac) f = frac_cumulate(f, theta.d[j]);
    out.factors.col(j) = f;
  }
  const Eigen::MatrixXd common = out.factors * theta.lambda.transpose();
  out.y.resize(T, N);
  for (int i = 0; i < N; ++i) {
    const Eigen::VectorXd u = ar_path(theta.rho[static_cast<std::size_t>(i)], T, std::sqrt(theta.H[i]), rng);
    out.y.col(i) = common.col(i) + u;
    if (spec.family == Family::kDffd) out.y.col(i) = frac_cumulate(out.y.col(i), spec.d_star[i]);
  }
  return out;
}

Simulation simulate_system(const StateSpaceSystem& sys, int T, std::uint64_t seed) {
  if (T < 1) throw std::invalid_argument("simulate_system: T must be positive");
  std::mt19937_64 rng(seed);
  const int s = sys.states(), N = static_cast<int>(sys.Z.rows()), q = static_cast<int>(sys.Q.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sys.P1);
  const Eigen::MatrixXd P1_half = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  const Eigen::MatrixXd Q_half = sys.Q.llt().matrixL();
  const Eigen::VectorXd H_half = sys.H.cwiseSqrt();

  Simulation out;
  out.states.resize(T, s);
  Eigen::MatrixXd white(T, N);
  Eigen::VectorXd alpha = sys.a1 + P1_half * normal_matrix(s, 1, rng).col(0);
  for (int t = 0; t < T; ++t) {
    out.states.row(t) = alpha.transpose();
    const Eigen::VectorXd eps = H_half.cwiseProduct(normal_matrix(N, 1, rng).col(0));
    white.row(t) = (sys.Z * alpha + eps).transpose();
    alpha = sys.Tmat * alpha + sys.R * (Q_half * normal_matrix(q, 1, rng).col(0));
  }
  out.factors = out.states * sys.F.transpose();
  out.lambda = sys.theta.lambda;
  out.y.resize(T, N);
  for (int i = 0; i < N; ++i) {
    Eigen::VectorXd x = recolour(white.col(i), sys.theta.rho[static_cast<std::size_t>(i)]);
    if (sys.spec.family == Family::kDffd) x = frac_cumulate(x, sys.spec.d_star[i]);
    out.y.col(i) = x;
  }
  return out;
}

ModelParams example_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const int N = spec.n_series(), k = spec.n_factors();
  ModelParams th;
  th.d.resize(spec.n_frac());
  for (int j = 0; j < spec.n_frac(); ++j) {
    if (spec.family == Family::kDofc)
      th.d[j] = spec.r1 == 1 ? 0.7 : 0.4 + 0.5 * j / (spec.r1 - 1);
    else
      th.d[j] = spec.r == 1 ? 0.7 : 0.8 - 0.4 * j / (spec.r - 1);
  }
  th.B = Eigen::MatrixXd::Zero(spec.n_ar(), spec.p);
  if (spec.p > 0) th.B.col(0).setConstant(spec.family == Family::kDffm ? 0.3 : 0.5);
  if (spec.family == Family::kDofc) {
    Eigen::VectorXd rank(N);
    for (int i = 0; i < N; ++i) rank[i] = i;
    th.lambda_free = dofc_mask(rank, spec.r1, spec.r2);
  } else {
    th.lambda_free = lower_triangular_mask(N, k, k);
  }
  th.lambda = normal_matrix(N, k, rng).cwiseProduct(th.lambda_free.cast<double>());
  for (int i = 0; i < N; ++i) {
    Eigen::VectorXd rho = Eigen::VectorXd::Zero(spec.p_i[static_cast<std::size_t>(i)]);
    if (rho.size() > 0) rho[0] = 0.3;
    th.rho.push_back(rho);
  }
  th.H = Eigen::VectorXd::Ones(N);
  return th;
}

}  // namespace fracfactor
