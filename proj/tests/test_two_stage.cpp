#include <doctest.h>

#include <numeric>

#include "fracfactor/polynomial.hpp"
#include "fracfactor/simulate.hpp"
#include "fracfactor/two_stage.hpp"
#include "support.hpp"

using namespace fracfactor;
using testing_support::trace_r2;

namespace {

PersistenceGroup group(int first, int count, double d) {
  PersistenceGroup g;
  g.series.resize(static_cast<std::size_t>(count));
  std::iota(g.series.begin(), g.series.end(), first);
  g.d = d;
  return g;
}

int total_k(const std::vector<PersistenceGroup>& gs) {
  int k = 0;
  for (const auto& g : gs) k += g.k;
  return k;
}

}  // namespace

TEST_CASE("allocate_factors") {
  SUBCASE("proportional to group size") {
    const auto gs = allocate_factors({group(0, 10, 0.9), group(10, 5, 0.5), group(15, 5, 0.1)}, 7);
    REQUIRE(gs.size() == 3);
    CHECK(gs[0].k == 3);
    CHECK(gs[1].k == 2);
    CHECK(gs[2].k == 2);
  }
  SUBCASE("closest groups merge when there are more groups than factors") {
    const auto gs = allocate_factors({group(0, 4, 1.0), group(4, 4, 0.6), group(8, 4, 0.5), group(12, 4, 0.0)}, 3);
    REQUIRE(gs.size() == 3);
    CHECK(gs[1].series.size() == 8);
    CHECK(gs[1].d == doctest::Approx(0.55));
    for (const auto& g : gs) CHECK(g.k == 1);
  }
  SUBCASE("every series kept and the factor count is exact") {
    for (int r = 1; r <= 9; ++r) {
      const auto gs = allocate_factors({group(0, 3, 1.2), group(3, 7, 0.8), group(10, 1, 0.4), group(11, 9, 0.0)}, r);
      CHECK(total_k(gs) == r);
      std::size_t n = 0;
      for (const auto& g : gs) {
        CHECK(g.k >= 1);
        n += g.series.size();
      }
      CHECK(n == 20);
    }
  }
  CHECK_THROWS_AS(allocate_factors({group(0, 2, 0.3)}, 0), std::invalid_argument);
  CHECK_THROWS_AS(allocate_factors({}, 2), std::invalid_argument);
}

TEST_CASE("seed_model gives valid starting values for every family") {
  const int N = 20, T = 300;
  const ApproxTable& t44 = testing_support::table(ApproxSpec::arma44(T));
  const ApproxTable& t50 = testing_support::table(ApproxSpec::ar5(T));
  ModelSpec dgp = ModelSpec::dofc(1, 1, 1, std::vector<int>(N, 1), T);
  dgp.approx = t44.spec;
  const ModelParams truth = example_params(dgp, 50);
  const Simulation sim = simulate_exact(dgp, truth, T, 51);

  SeedOptions o;
  o.r = 2;
  o.r1 = 1;
  o.r2 = 1;
  for (Family fam : {Family::kDffm, Family::kDofc, Family::kDffd}) {
    CAPTURE(family_name(fam));
    const ApproxTable* tab = fam == Family::kDofc ? &t44 : fam == Family::kDffm ? &t50 : nullptr;
    const SeedResult seed = seed_model(fam, sim.y, o, tab);
    CHECK(seed.spec.family == fam);
    CHECK_NOTHROW(seed.theta.validate(seed.spec));
    CHECK(seed.d_hat.size() == N);
    CHECK(seed.factors.rows() == T);
    for (Eigen::Index j = 0; j < seed.theta.B.rows(); ++j) CHECK(ar_is_stable(seed.theta.B.row(j).transpose()));
    const StateSpaceSystem sys = build_system(seed.spec, seed.theta, tab);
    const Eigen::MatrixXd x = model_observations(seed.spec, sim.y);
    CHECK(std::isfinite(kalman_loglik(sys, filter_data(sys, x))));
  }
  CHECK_THROWS_AS(seed_model(Family::kDofc, sim.y, o, nullptr), std::invalid_argument);
}

TEST_CASE("two-stage fit recovers DOFC factors") {
  const int N = 30, T = 500;
  const ApproxTable& tab = testing_support::table(ApproxSpec::arma44(T));
  ModelSpec dgp = ModelSpec::dofc(1, 1, 1, std::vector<int>(N, 0), T);
  dgp.approx = tab.spec;
  ModelParams truth = example_params(dgp, 52);
  truth.d[0] = 0.7;
  const Simulation sim = simulate_exact(dgp, truth, T, 53);
  SeedOptions o;
  o.r1 = 1;
  o.r2 = 1;
  o.pmax_idio = 0;
  const TwoStageResult fit = fit_two_stage(Family::kDofc, sim.y, o, &tab, 10, 50);
  CHECK(fit.ml.loglik >= fit.ml.em_loglik - 1e-8);
  CHECK(fit.ml.theta.d[0] >= 0.55);
  CHECK(fit.ml.theta.d[0] <= 0.85);
  CHECK(trace_r2(fit.factors, sim.factors) >= 0.8);
}
