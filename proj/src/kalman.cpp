#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "fracfactor/error.hpp"
#include "fracfactor/statespace.hpp"

namespace fracfactor {

namespace {

struct StepStore {
  Eigen::VectorXd zfv;    // Z' F^{-1} v
  Eigen::MatrixXd zfz;    // Z' F^{-1} Z
  Eigen::VectorXd fv;     // F^{-1} v
  Eigen::MatrixXd fz;     // F^{-1} Z
  Eigen::VectorXd finv_diag;
};

struct ForwardPass {
  Eigen::MatrixXd a_pred, a_filt;
  std::vector<Eigen::MatrixXd> P_pred, P_filt;
  std::vector<StepStore> steps;
  double loglik = 0.0;
};

void check_inputs(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& y) {
  if (y.cols() != sys.Z.rows()) throw std::invalid_argument("kalman: data columns differ from the observation dimension");
  if (!(sys.H.array() > 0.0).all()) throw std::invalid_argument("kalman: H must be positive");
  if (!y.allFinite()) throw DataError("kalman: non-finite observation");
}

ForwardPass forward(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& y, bool keep) {
  check_inputs(sys, y);
  const Eigen::Index T = y.rows(), N = y.cols(), s = sys.Tmat.rows();
  const Eigen::MatrixXd RQR = sys.R * sys.Q * sys.R.transpose();
  const double log2pi = std::log(2.0 * std::numbers::pi);

  ForwardPass out;
  if (keep) {
    out.a_pred.resize(T, s);
    out.a_filt.resize(T, s);
    out.P_pred.reserve(static_cast<std::size_t>(T));
    out.P_filt.reserve(static_cast<std::size_t>(T));
    out.steps.reserve(static_cast<std::size_t>(T));
  }
  Eigen::VectorXd a = sys.a1;
  Eigen::MatrixXd P = sys.P1;
  for (Eigen::Index t = 0; t < T; ++t) {
    const Eigen::VectorXd v = y.row(t).transpose() - sys.Z * a;
    const Eigen::MatrixXd ZP = sys.Z * P;
    Eigen::MatrixXd F = ZP * sys.Z.transpose();
    F.diagonal() += sys.H;
    Eigen::LLT<Eigen::MatrixXd> llt(F);
    if (llt.info() != Eigen::Success)
      throw EstimationError(fmt::format("kalman: innovation covariance not positive definite at t = {}", t));
    const Eigen::VectorXd ldiag = llt.matrixLLT().diagonal();
    if (!(ldiag.array() > 0.0).all() || !ldiag.allFinite())
      throw EstimationError(fmt::format("kalman: innovation covariance not positive definite at t = {}", t));
    const double log_det_f = 2.0 * ldiag.array().log().sum();
    const Eigen::VectorXd fv = llt.solve(v);
    const Eigen::MatrixXd fzp = llt.solve(ZP);  // F^{-1} Z P
    const Eigen::VectorXd zfv = sys.Z.transpose() * fv;
    out.loglik += -0.5 * (static_cast<double>(N) * log2pi + log_det_f + v.dot(fv));

    const Eigen::VectorXd af = a + ZP.transpose() * fv;
    Eigen::MatrixXd Pf = P - ZP.transpose() * fzp;
    Pf = 0.5 * (Pf + Pf.transpose());
    if (keep) {
      out.a_pred.row(t) = a.transpose();
      out.a_filt.row(t) = af.transpose();
      out.P_pred.push_back(P);
      out.P_filt.push_back(Pf);
      const Eigen::MatrixXd fz = llt.solve(sys.Z);
      Eigen::MatrixXd zfz = sys.Z.transpose() * fz;
      zfz = 0.5 * (zfz + zfz.transpose());
      const Eigen::VectorXd finv_diag = llt.solve(Eigen::MatrixXd::Identity(N, N)).diagonal();
      out.steps.push_back({zfv, zfz, fv, fz, finv_diag});
    }
    a = sys.Tmat * af;
    P = sys.Tmat * Pf * sys.Tmat.transpose() + RQR;
    P = 0.5 * (P + P.transpose());
  }
  if (!std::isfinite(out.loglik)) throw EstimationError("kalman: log-likelihood is not finite");
  return out;
}

}  // namespace

double kalman_loglik(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& data) {
  return forward(sys, data, false).loglik;
}

SmootherOutput kalman_filter_smoother(const StateSpaceSystem& sys, const Eigen::Ref<const Eigen::MatrixXd>& data) {
  ForwardPass fw = forward(sys, data, true);
  const Eigen::Index T = data.rows(), N = data.cols(), s = sys.Tmat.rows(), q = sys.R.cols();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(s, s);

  SmootherOutput out;
  out.loglik = fw.loglik;
  out.a_filt = fw.a_filt;
  out.a_pred = fw.a_pred;
  out.P_filt = fw.P_filt;
  out.a_smooth.resize(T, s);
  out.P_smooth.resize(static_cast<std::size_t>(T));
  out.P_lag1.assign(static_cast<std::size_t>(T), Eigen::MatrixXd::Zero(s, s));
  out.eps_smooth.resize(T, N);
  out.eps_var.resize(T, N);
  out.eta_smooth.resize(T, q);
  out.eta_var.resize(static_cast<std::size_t>(T));

  Eigen::VectorXd r = Eigen::VectorXd::Zero(s);
  Eigen::MatrixXd Nm = Eigen::MatrixXd::Zero(s, s);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const auto& st = fw.steps[static_cast<std::size_t>(t)];
    const Eigen::MatrixXd& P = fw.P_pred[static_cast<std::size_t>(t)];
    const Eigen::MatrixXd L = sys.Tmat * (I - P * st.zfz);

    // Disturbances use r_t and N_t (before this step's update):
    // u = F^{-1} v - K' r, D = F^{-1} + K' N K with K' = F^{-1} Z P T'.
    const Eigen::MatrixXd Kt = st.fz * (P * sys.Tmat.transpose());
    const Eigen::VectorXd u = st.fv - Kt * r;
    out.eps_smooth.row(t) = sys.H.cwiseProduct(u).transpose();
    const Eigen::MatrixXd KN = Kt * Nm;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double d = st.finv_diag[i] + KN.row(i).dot(Kt.row(i));
      out.eps_var(t, i) = sys.H[i] - sys.H[i] * sys.H[i] * d;
    }
    out.eta_smooth.row(t) = (sys.Q * sys.R.transpose() * r).transpose();
    out.eta_var[static_cast<std::size_t>(t)] = sys.Q - sys.Q * sys.R.transpose() * Nm * sys.R * sys.Q;

    if (t + 1 < T) {
      const Eigen::MatrixXd& Pn = fw.P_pred[static_cast<std::size_t>(t + 1)];
      out.P_lag1[static_cast<std::size_t>(t)] = (I - Pn * Nm) * L * P;
    }
    r = st.zfv + L.transpose() * r;
    Nm = st.zfz + L.transpose() * Nm * L;
    Nm = 0.5 * (Nm + Nm.transpose());
    out.a_smooth.row(t) = (fw.a_pred.row(t).transpose() + P * r).transpose();
    Eigen::MatrixXd V = P - P * Nm * P;
    out.P_smooth[static_cast<std::size_t>(t)] = 0.5 * (V + V.transpose());
  }
  return out;
}

}  // namespace fracfactor
