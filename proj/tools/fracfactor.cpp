#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "fracfactor/harness.hpp"
#include "fracfactor/longmem.hpp"
#include "fracfactor/simulate.hpp"
#include "fracfactor/spectral.hpp"
#include "fracfactor/two_stage.hpp"

namespace ff = fracfactor;

namespace {

struct Options {
  std::string model;
  int r = 7, r1 = 3, r2 = 4, p = 1;
  std::string horizons = "1-12";
  int first_origin = 0, last_origin = -1;
  int em_iters = 10, bfgs_iters = 100, pmax = 4;
  std::uint64_t seed = 0;
  std::string out;
  std::string input;
  int N = 30, T = 500;
  double d = 0.4;
  double elw_alpha = 0.5;
  std::string table_dir;
  bool detrend = false, no_center = false, figures = false;
};

std::ofstream open_file(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  return f;
}

void write_matrix(std::ostream& out, const Eigen::MatrixXd& m, const std::string& prefix) {
  out << "t";
  for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << prefix << j + 1;
  out << '\n';
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    out << t;
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << ff::format_double(m(t, j));
    out << '\n';
  }
}

ff::Panel load_input(const Options& o) {
  if (o.input.empty()) throw std::invalid_argument("--input is required");
  return ff::apply_transforms(ff::ingest_csv(o.input), o.detrend);
}

const ff::ApproxTable* table_for(ff::Family fam, int T, const Options& o, ff::ApproxTable& storage) {
  if (fam == ff::Family::kDffd) return nullptr;
  const ff::ApproxSpec spec = fam == ff::Family::kDofc ? ff::ApproxSpec::arma44(T) : ff::ApproxSpec::ar5(T);
  storage = o.table_dir.empty() ? ff::fit_table(spec) : ff::cached_table(spec, o.table_dir);
  return &storage;
}

ff::SeedOptions seed_options(const Options& o) {
  ff::SeedOptions s;
  s.r = o.r;
  s.r1 = o.r1;
  s.r2 = o.r2;
  s.p = o.p;
  s.pmax_idio = o.pmax;
  s.elw_alpha = o.elw_alpha;
  return s;
}

int cmd_simulate(const Options& o) {
  const ff::Family fam = ff::parse_family(o.model.empty() ? "dofc" : o.model);
  ff::ModelSpec spec;
  switch (fam) {
    case ff::Family::kDffm: spec = ff::ModelSpec::dffm(o.r, o.p, std::vector<int>(o.N, 1), o.T); break;
    case ff::Family::kDofc: spec = ff::ModelSpec::dofc(o.r1, o.r2, o.p, std::vector<int>(o.N, 1), o.T); break;
    case ff::Family::kDffd: spec = ff::ModelSpec::dffd(o.r, o.p, Eigen::VectorXd::Constant(o.N, o.d)); break;
  }
  const ff::ModelParams theta = ff::example_params(spec, o.seed);
  const ff::Simulation sim = ff::simulate_exact(spec, theta, o.T, o.seed + 1);
  ff::Panel panel;
  panel.values = sim.y;
  for (int i = 0; i < o.N; ++i) {
    panel.names.push_back(fmt::format("y{}", i + 1));
    panel.transform_codes.push_back(1);
  }
  for (int t = 0; t < o.T; ++t) panel.period_index.push_back(t);
  if (o.out.empty()) {
    ff::write_csv(panel, std::cout);
    return 0;
  }
  const std::filesystem::path dir(o.out);
  auto pf = open_file(dir / "panel.csv");
  ff::write_csv(panel, pf);
  auto ff_ = open_file(dir / "factors.csv");
  write_matrix(ff_, sim.factors, "f");
  auto tf = open_file(dir / "theta.json");
  tf << ff::params_to_json(spec, theta).dump(2) << '\n';
  return 0;
}

int cmd_fit(const Options& o) {
  const ff::Panel panel = load_input(o);
  const ff::Family fam = ff::parse_family(o.model.empty() ? "dofc" : o.model);
  const Eigen::MatrixXd& y = panel.values;
  Eigen::VectorXd d_hat(y.cols());
  for (Eigen::Index i = 0; i < y.cols(); ++i) {
    try {
      d_hat[i] = ff::elw_estimate(y.col(i), o.elw_alpha);
    } catch (const ff::DataError&) {
      d_hat[i] = 0.0;
    }
  }
  const Eigen::VectorXd levels = o.no_center ? Eigen::VectorXd::Zero(y.cols()) : ff::centering_levels(y, d_hat);
  const Eigen::MatrixXd yc = y.rowwise() - levels.transpose();
  ff::ApproxTable storage;
  const ff::ApproxTable* table = table_for(fam, static_cast<int>(y.rows()), o, storage);
  const ff::TwoStageResult res = ff::fit_two_stage(fam, yc, seed_options(o), table, o.em_iters, o.bfgs_iters);

  nlohmann::json j = ff::params_to_json(res.seed.spec, res.ml.theta);
  const std::filesystem::path dir(o.out.empty() ? "." : o.out);
  auto tf = open_file(dir / "theta.json");
  tf << j.dump(2) << '\n';
  auto ff_ = open_file(dir / "factors.csv");
  write_matrix(ff_, res.factors, "f");
  auto lf = open_file(dir / "levels.csv");
  lf << "series,level\n";
  for (Eigen::Index i = 0; i < y.cols(); ++i) lf << panel.names[i] << ',' << ff::format_double(levels[i]) << '\n';
  std::cout << fmt::format("loglik {}\nem_loglik {}\nstatus {}\n", ff::format_double(res.ml.loglik),
                           ff::format_double(res.ml.em_loglik), static_cast<int>(res.ml.status));
  for (Eigen::Index k = 0; k < res.ml.theta.d.size(); ++k) std::cout << fmt::format("d{} {}\n", k + 1, ff::format_double(res.ml.theta.d[k]));
  return 0;
}

int cmd_forecast(const Options& o) {
  if (o.input.empty()) throw std::invalid_argument("--input is required");
  const ff::Panel panel = ff::ingest_csv(o.input);
  ff::ForecastConfig cfg;
  if (!o.model.empty()) {
    cfg.families.clear();
    std::stringstream ss(o.model);
    std::string part;
    while (std::getline(ss, part, ',')) cfg.families.push_back(ff::parse_model(part));
  }
  cfg.r = o.r;
  cfg.r1 = o.r1;
  cfg.r2 = o.r2;
  cfg.p = o.p;
  cfg.horizons = ff::parse_horizons(o.horizons);
  cfg.first_origin = o.first_origin;
  cfg.last_origin = o.last_origin;
  cfg.em_iters = o.em_iters;
  cfg.bfgs_iters = o.bfgs_iters;
  cfg.elw_alpha = o.elw_alpha;
  cfg.pmax = o.pmax;
  cfg.seed = o.seed;
  cfg.detrend = o.detrend;
  cfg.center = !o.no_center;
  cfg.table_dir = o.table_dir;
  const std::filesystem::path dir(o.out.empty() ? "." : o.out);
  try {
    const ff::ForecastResult res = ff::run_recursive(panel, cfg);
    ff::write_outputs(res, dir, o.figures);
    for (const auto& [m, list] : res.failures)
      std::cerr << fmt::format("{}: {} failed origins\n", ff::model_name(m), list.size());
  } catch (const ff::HarnessAbort& e) {
    auto f = open_file(dir / "error.json");
    f << e.report().dump(2) << '\n';
    std::cerr << "forecast aborted: " << e.what() << '\n' << e.report().dump(2) << '\n';
    return 3;
  }
  return 0;
}

int cmd_approx_table(const Options& o) {
  const ff::Family fam = ff::parse_family(o.model.empty() ? "dofc" : o.model);
  if (fam == ff::Family::kDffd) throw std::invalid_argument("approx-table: DFFD uses no approximation");
  const ff::ApproxSpec spec = fam == ff::Family::kDofc ? ff::ApproxSpec::arma44(o.T) : ff::ApproxSpec::ar5(o.T);
  const std::string dir = !o.out.empty() ? o.out : (!o.table_dir.empty() ? o.table_dir : ".");
  const ff::ApproxTable t = ff::cached_table(spec, dir);
  std::cout << "b,loss\n";
  for (Eigen::Index g = 0; g < t.spec.grid.size(); ++g)
    std::cout << ff::format_double(t.spec.grid[g]) << ',' << ff::format_double(t.losses[g]) << '\n';
  return 0;
}

int cmd_elw(const Options& o) {
  const ff::Panel panel = load_input(o);
  std::ostringstream s;
  s << "series,d_hat\n";
  for (Eigen::Index i = 0; i < panel.values.cols(); ++i) {
    std::string v;
    try {
      v = ff::format_double(ff::elw_estimate(panel.values.col(i), o.elw_alpha));
    } catch (const ff::DataError&) {
      v = "NA";
    }
    s << panel.names[static_cast<std::size_t>(i)] << ',' << v << '\n';
  }
  std::cout << s.str();
  if (!o.out.empty()) {
    auto f = open_file(std::filesystem::path(o.out) / "elw.csv");
    f << s.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fractional factor models: simulation, estimation and forecast evaluation", "fracfactor"};
  app.set_config("--config", "", "Flat key = value file; keys are flag names without dashes");
  app.allow_config_extras(false);
  app.require_subcommand(1, 1);
  app.fallthrough();

  Options o;
  app.add_option("--model", o.model, "dffm, dofc or dffd; forecast takes a comma list that may add ar, pc, pcar");
  app.add_option("--r", o.r, "Factors for DFFM, DFFD and the PC benchmarks")->check(CLI::PositiveNumber);
  app.add_option("--r1", o.r1, "DOFC fractional factors")->check(CLI::NonNegativeNumber);
  app.add_option("--r2", o.r2, "DOFC short-memory factors")->check(CLI::NonNegativeNumber);
  app.add_option("--p", o.p, "Factor AR order")->check(CLI::NonNegativeNumber);
  app.add_option("--horizons", o.horizons, "e.g. 1-12 or 1,3,6");
  app.add_option("--first-origin", o.first_origin, "Row index of the first forecast origin (0: half the sample)");
  app.add_option("--last-origin", o.last_origin, "Row index of the last origin (-1: latest possible)");
  app.add_option("--em-iters", o.em_iters, "EM iterations before BFGS")->check(CLI::NonNegativeNumber);
  app.add_option("--bfgs-iters", o.bfgs_iters, "BFGS iteration cap")->check(CLI::NonNegativeNumber);
  app.add_option("--pmax", o.pmax, "Largest AR order for the information criteria")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", o.seed, "Random seed");
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--input", o.input, "Panel CSV");
  app.add_option("--N", o.N, "simulate: series")->check(CLI::PositiveNumber);
  app.add_option("--T", o.T, "simulate, approx-table: periods")->check(CLI::PositiveNumber);
  app.add_option("--d", o.d, "simulate dffd: integration order of every series");
  app.add_option("--elw-alpha", o.elw_alpha, "ELW bandwidth exponent")->check(CLI::Range(0.0, 1.0));
  app.add_option("--table-dir", o.table_dir, "Cache directory for approximation tables");
  app.add_flag("--detrend", o.detrend, "Remove intercept and linear trend per series");
  app.add_flag("--no-center", o.no_center, "Fit on uncentered series");
  app.add_flag("--figures", o.figures, "forecast: write figure_<series>.csv traces");

  int status = 0;
  auto bind = [&](const char* name, const char* help, int (*fn)(const Options&)) {
    app.add_subcommand(name, help)->callback([&status, &o, fn] { status = fn(o); });
  };
  bind("simulate", "Simulate a panel from a family with illustrative parameters", cmd_simulate);
  bind("fit", "Two-stage estimation of one family; writes theta.json and factors.csv", cmd_fit);
  bind("forecast", "Recursive-window forecast experiment", cmd_forecast);
  bind("approx-table", "Precompute an approximation table into the cache", cmd_approx_table);
  bind("elw", "Per-series ELW integration orders", cmd_elw);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.clear();
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return status;
}
