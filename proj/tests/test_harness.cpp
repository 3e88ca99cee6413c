#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fracfactor/error.hpp"
#include "fracfactor/harness.hpp"
#include "fracfactor/simulate.hpp"
#include "support.hpp"

using namespace fracfactor;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Panel panel_from(const Eigen::MatrixXd& y) {
  Panel p;
  p.values = y;
  for (Eigen::Index i = 0; i < y.cols(); ++i) p.names.push_back("x" + std::to_string(i));
  p.transform_codes.assign(static_cast<std::size_t>(y.cols()), 1);
  for (Eigen::Index t = 0; t < y.rows(); ++t) p.period_index.push_back(static_cast<double>(t));
  return p;
}

// origins x 1 horizon x series x families, filled by `fc(o, i, f)`.
template <class Fn>
ForecastResult hand_result(int O, int N, std::vector<ForecastModel> fams, const Eigen::MatrixXd& actual, Fn fc) {
  ForecastResult r;
  for (int o = 0; o < O; ++o) r.origins.push_back(o);
  r.horizons = {1};
  for (int i = 0; i < N; ++i) r.series.push_back("s" + std::to_string(i));
  r.families = std::move(fams);
  r.actuals.resize(static_cast<std::size_t>(O * N));
  r.cube.resize(static_cast<std::size_t>(O * N) * r.families.size());
  for (int o = 0; o < O; ++o)
    for (int i = 0; i < N; ++i) {
      r.actuals[r.actual_index(o, 0, i)] = actual(o, i);
      for (std::size_t f = 0; f < r.families.size(); ++f) r.cube[r.cube_index(o, 0, i, f)] = fc(o, i, f);
    }
  mspe_tables(r);
  return r;
}

}  // namespace

TEST_CASE("csv ingestion") {
  SUBCASE("transform codes log the flagged column") {
    std::istringstream in("period,a,b\ntransform,1,2\n0,1.5,1\n1,2.5,2.718281828459045\n2,3.5,10\n");
    const Panel p = parse_csv(in);
    CHECK(p.names == std::vector<std::string>{"a", "b"});
    CHECK(p.transform_codes == std::vector<int>{1, 2});
    const Panel t = apply_transforms(p, false);
    CHECK(t.values(1, 0) == 2.5);
    CHECK(t.values(0, 1) == doctest::Approx(0.0));
    CHECK(t.values(1, 1) == doctest::Approx(1.0));
    CHECK(t.values(2, 1) == doctest::Approx(std::log(10.0)));
  }
  SUBCASE("codes default to 1") {
    std::istringstream in("a,b,c\n1,2,3\n4,5,6\n");
    const Panel p = parse_csv(in);
    CHECK(p.transform_codes == std::vector<int>{1, 1, 1});
    CHECK(p.values.rows() == 2);
    CHECK_FALSE(p.diff_codes.has_value());
  }
  SUBCASE("difference codes") {
    std::istringstream in("date,a,b\ntcode,1,1\ndiff,0,2\n2000-01,1,2\n2000-02,3,4\n");
    const Panel p = parse_csv(in);
    REQUIRE(p.diff_codes.has_value());
    CHECK(*p.diff_codes == std::vector<int>{0, 2});
  }
  SUBCASE("write then read reproduces the panel") {
    Panel p = panel_from(testing_support::randn(40, 4, 60) * 1e3);
    p.transform_codes = {1, 2, 1, 1};
    p.values.col(1) = p.values.col(1).cwiseAbs().array() + 1.0;
    p.diff_codes = std::vector<int>{0, 1, 2, 1};
    std::stringstream buf;
    write_csv(p, buf);
    const Panel q = parse_csv(buf);
    CHECK((q.values - p.values).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(q.transform_codes == p.transform_codes);
    CHECK(q.diff_codes == p.diff_codes);
    CHECK(q.names == p.names);
  }
  SUBCASE("malformed input") {
    auto bad = [](const std::string& text, const std::string& needle) {
      std::istringstream in(text);
      try {
        parse_csv(in);
        FAIL("expected DataError for " << text);
      } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(needle) != std::string::npos);
      }
    };
    bad("a,b\n1,2\n3,\n", "'b'");
    bad("a,b\n1,2\n3,NA\n", "line 3");
    bad("a,b\n1,2\n3,4,5\n", "line 3");
    bad("a,b\n1,x2\n", "malformed");
    bad("a,a\n1,2\n", "duplicate");
    bad("", "empty");
  }
  CHECK_THROWS_AS(ingest_csv("/nonexistent/panel.csv"), DataError);
}

TEST_CASE("horizon lists") {
  CHECK(parse_horizons("1-3,6") == std::vector<int>{1, 2, 3, 6});
  CHECK(parse_horizons("3,1,1") == std::vector<int>{1, 3});
  CHECK(parse_horizons("1-12").size() == 12);
  CHECK_THROWS_AS(parse_horizons("0-2"), std::invalid_argument);
  CHECK_THROWS_AS(parse_horizons("a"), std::invalid_argument);
  CHECK_THROWS_AS(parse_horizons(""), std::invalid_argument);
}

TEST_CASE("AR benchmark at a single origin") {
  const int T = 200, N = 3;
  Eigen::MatrixXd y(T, N);
  const Eigen::MatrixXd e = testing_support::randn(T, N, 61);
  y.row(0) = e.row(0);
  for (int t = 1; t < T; ++t) y.row(t) = 0.8 * y.row(t - 1) + e.row(t);
  ForecastConfig cfg;
  cfg.families = {ForecastModel::kAr};
  cfg.horizons = {1};
  cfg.first_origin = T - 2;
  cfg.last_origin = T - 2;
  cfg.pmax = 1;
  cfg.center = false;
  const ForecastResult r = run_recursive(panel_from(y), cfg);
  REQUIRE(r.origins == std::vector<int>{T - 2});
  for (int i = 0; i < N; ++i) {
    double num = 0.0, den = 0.0;
    for (int t = 1; t <= T - 2; ++t) {
      num += y(t, i) * y(t - 1, i);
      den += y(t - 1, i) * y(t - 1, i);
    }
    CHECK(r.cube[r.cube_index(0, 0, i, 0)] == doctest::Approx(num / den * y(T - 2, i)).epsilon(1e-12));
    CHECK(r.actuals[r.actual_index(0, 0, i)] == y(T - 1, i));
  }
}

TEST_CASE("recursive run shapes and warm starts") {
  const int N = 6, T = 150;
  ModelSpec spec = ModelSpec::dffd(1, 1, Eigen::VectorXd::Constant(N, 0.4));
  const Simulation sim = simulate_exact(spec, example_params(spec, 62), T, 63);
  ForecastConfig cfg;
  cfg.families = {ForecastModel::kDffd, ForecastModel::kAr, ForecastModel::kPc, ForecastModel::kPcar};
  cfg.r = 1;
  cfg.horizons = {1, 3};
  cfg.first_origin = 120;
  cfg.last_origin = 122;
  cfg.em_iters = 2;
  cfg.bfgs_iters = 20;
  cfg.center = false;
  const ForecastResult r = run_recursive(panel_from(sim.y), cfg);
  CHECK(r.origins.size() == 3);
  CHECK(r.cube.size() == 3u * 2u * N * 4u);
  CHECK(r.actuals.size() == 3u * 2u * N);
  CHECK(r.mspe.size() == 2u * N * 4u);
  CHECK(r.best_count.rows() == 2);
  CHECK(r.best_count.cols() == 4);
  CHECK(r.failures.empty());
  for (double v : r.cube) CHECK(std::isfinite(v));
  for (Eigen::Index h = 0; h < 2; ++h) CHECK(r.best_count.row(h).sum() == N);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < static_cast<std::size_t>(N); ++i) CHECK(r.rel_mspe[r.mspe_index(h, i, 1)] == 1.0);

  // the second origin restarted from the serialized first-origin estimate
  const auto& thetas = r.thetas.at(ForecastModel::kDffd);
  REQUIRE(thetas.size() == 3);
  const auto [s0, t0] = params_from_json(nlohmann::json::parse(thetas[0].dump()));
  const Eigen::MatrixXd y1 = sim.y.topRows(122);
  const Eigen::MatrixXd x1 = model_observations(s0, y1);
  const MlResult ml = fit_ml(s0, t0, x1, nullptr, cfg.em_iters, cfg.bfgs_iters);
  const StateSpaceSystem sys = build_system(s0, ml.theta, nullptr);
  const Eigen::MatrixXd fc = forecast_h(sys, kalman_filter_smoother(sys, filter_data(sys, x1)), y1, 3);
  for (int i = 0; i < N; ++i) {
    CHECK(r.cube[r.cube_index(1, 0, i, 0)] == doctest::Approx(fc(0, i)).epsilon(1e-10));
    CHECK(r.cube[r.cube_index(1, 1, i, 0)] == doctest::Approx(fc(2, i)).epsilon(1e-10));
  }
}

TEST_CASE("mspe tables") {
  const std::vector<ForecastModel> fams = {ForecastModel::kDofc, ForecastModel::kAr, ForecastModel::kPc};
  SUBCASE("perfect forecasts win everywhere") {
    const Eigen::MatrixXd a = testing_support::randn(4, 3, 64);
    const ForecastResult r = hand_result(4, 3, fams, a, [&](int o, int i, std::size_t f) {
      return f == 0 ? a(o, i) : a(o, i) + 1.0;
    });
    for (int i = 0; i < 3; ++i) CHECK(r.mspe[r.mspe_index(0, i, 0)] == 0.0);
    CHECK(r.best_count(0, 0) == 3);
    for (int i = 0; i < 3; ++i) CHECK(r.rel_mspe[r.mspe_index(0, i, 1)] == 1.0);
  }
  SUBCASE("two origins by hand") {
    Eigen::MatrixXd a(2, 1);
    a << 2.0, 2.0;
    const ForecastResult r = hand_result(2, 1, {ForecastModel::kAr}, a, [](int o, int, std::size_t) { return o == 0 ? 1.0 : 3.0; });
    CHECK(r.mspe[0] == 1.0);
  }
  SUBCASE("ties go to the benchmark and missing series drop out") {
    const Eigen::MatrixXd a = testing_support::randn(3, 4, 65);
    const ForecastResult r = hand_result(3, 4, fams, a, [&](int o, int i, std::size_t) {
      return i == 3 ? kNaN : a(o, i) + 0.5;
    });
    CHECK(r.best_count(0, 0) == 0);
    CHECK(r.best_count(0, 1) == 3);
    CHECK(r.best_count.row(0).sum() == 3);
    CHECK(std::isnan(r.mspe[r.mspe_index(0, 3, 0)]));
  }
}

TEST_CASE("output files") {
  const Eigen::MatrixXd a = testing_support::randn(2, 2, 66);
  ForecastResult r = hand_result(2, 2, {ForecastModel::kDffd, ForecastModel::kAr}, a,
                                 [&](int o, int i, std::size_t f) { return a(o, i) + 0.1 * static_cast<double>(f + 1); });
  r.thetas[ForecastModel::kDffd] = {nlohmann::json{{"x", 1}}, nlohmann::json{{"x", 2}}};
  const auto dir = std::filesystem::temp_directory_path() / "fracfactor_output_test";
  std::filesystem::remove_all(dir);
  write_outputs(r, dir, true);
  auto first_line = [&](const char* name) {
    std::ifstream f(dir / name);
    std::string line;
    std::getline(f, line);
    return line;
  };
  CHECK(first_line("forecasts.csv") == "origin,horizon,series,family,forecast,actual");
  CHECK(first_line("mspe.csv") == "horizon,series,DFFD,AR");
  CHECK(first_line("rel_mspe.csv") == "horizon,series,DFFD,AR");
  CHECK(first_line("best_count.csv") == "horizon,DFFD,AR");
  CHECK(std::filesystem::exists(dir / "theta_DFFD_1.json"));
  CHECK(std::filesystem::exists(dir / "figure_s0.csv"));
  CHECK(format_double(0.1) == "0.10000000000000001");
  CHECK(format_double(kNaN) == "NA");
  std::filesystem::remove_all(dir);
}
