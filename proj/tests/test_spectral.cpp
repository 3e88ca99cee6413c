#include <doctest.h>

#include <cmath>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/spectral.hpp"
#include "support.hpp"

using namespace fracfactor;
using testing_support::randn;
using testing_support::randn_vec;

namespace {

double mean_elw(double d, int reps, std::uint64_t seed0) {
  double s = 0.0;
  for (int r = 0; r < reps; ++r) s += elw_estimate(frac_cumulate(randn_vec(1000, seed0 + r), d), 0.5);
  return s / reps;
}

double max_principal_angle_sin(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  // both orthonormal; sin of the largest principal angle
  const Eigen::MatrixXd P = A - B * (B.transpose() * A);
  return P.norm() == 0.0 ? 0.0 : Eigen::JacobiSVD<Eigen::MatrixXd>(P).singularValues()[0];
}

}  // namespace

TEST_CASE("ELW calibration on white noise, d = 0.4 and a random walk") {
  CHECK(std::abs(mean_elw(0.0, 200, 1000)) <= 0.1);
  const double m04 = mean_elw(0.4, 200, 2000);
  CHECK(m04 >= 0.3);
  CHECK(m04 <= 0.5);
  const double m1 = mean_elw(1.0, 200, 3000);
  CHECK(m1 >= 0.9);
  CHECK(m1 <= 1.1);
}

TEST_CASE("ELW is invariant to positive rescaling") {
  const Eigen::VectorXd x = frac_cumulate(randn_vec(600, 5), 0.6);
  CHECK(std::abs(elw_estimate(x, 0.5) - elw_estimate(37.5 * x, 0.5)) < 1e-8);
}

TEST_CASE("ELW argument checks") {
  CHECK_THROWS_AS(elw_estimate(Eigen::VectorXd::Constant(200, 3.0), 0.5), DataError);
  CHECK_THROWS_AS(elw_estimate(randn_vec(63, 1), 0.5), std::invalid_argument);
  CHECK_THROWS_AS(elw_estimate(randn_vec(200, 1), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(elw_estimate(randn_vec(200, 1), 0.0), std::invalid_argument);
}

TEST_CASE("ELW minimises its own objective") {
  const Eigen::VectorXd x = frac_cumulate(randn_vec(500, 9), 0.3);
  const int m = static_cast<int>(std::floor(std::pow(500.0, 0.5)));
  const double d = elw_estimate(x, 0.5);
  const double best = elw_objective(x, d, m);
  for (double step : {-0.05, -0.01, 0.01, 0.05}) CHECK(best <= elw_objective(x, d + step, m) + 1e-12);
}

TEST_CASE("subspace_split separates a fractional from a white series") {
  const int T = 500;
  Eigen::MatrixXd F(T, 2);
  F.col(0) = frac_cumulate(randn_vec(T, 11), 0.8);
  F.col(1) = randn_vec(T, 12);
  const SubspaceSplit s = subspace_split(F, 0, 1);
  CHECK(std::abs(s.frac_basis(0, 0)) >= 0.95);
  CHECK(s.short_basis.cols() == 1);
}

TEST_CASE("subspace_split bases are orthonormal, deterministic and rotation equivariant") {
  const int T = 400, k = 3;
  Eigen::MatrixXd F(T, k);
  F.col(0) = frac_cumulate(randn_vec(T, 21), 0.9);
  F.col(1) = frac_cumulate(randn_vec(T, 22), 0.5);
  F.col(2) = randn_vec(T, 23);
  const SubspaceSplit a = subspace_split(F, 0, 2, 1);
  Eigen::MatrixXd all(k, 3);
  all << a.frac_basis, a.short_basis;
  CHECK((all.transpose() * all - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);

  const SubspaceSplit again = subspace_split(F, 0, 2, 1);
  CHECK(again.frac_basis == a.frac_basis);
  CHECK(again.short_basis == a.short_basis);

  const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(randn(k, k, 24)).householderQ();
  const SubspaceSplit b = subspace_split(F * Q.transpose(), 0, 2, 1);
  CHECK(max_principal_angle_sin(b.frac_basis, Q * a.frac_basis) <= 1e-8);
  CHECK(max_principal_angle_sin(b.short_basis, Q * a.short_basis) <= 1e-8);
}

TEST_CASE("averaged periodogram is symmetric positive semidefinite") {
  const Eigen::MatrixXd x = randn(256, 3, 31);
  const Eigen::MatrixXd P = averaged_periodogram(x, 16);
  CHECK((P - P.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(P).eigenvalues().minCoeff() > -1e-12);
}
