#include "fracfactor/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "fracfactor/error.hpp"
#include "fracfactor/first_stage.hpp"
#include "fracfactor/spectral.hpp"
#include "fracfactor/two_stage.hpp"

namespace fracfactor {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (std::isspace(static_cast<unsigned char>(s[b])) || s[b] == '"')) ++b;
  while (e > b && (std::isspace(static_cast<unsigned char>(s[e - 1])) || s[e - 1] == '"')) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::size_t used = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == s.size();
}

bool is_missing(const std::string& s) {
  const std::string l = lower(s);
  return l.empty() || l == "na" || l == "nan" || l == ".";
}

std::string row_label(const std::string& cell) {
  std::string l = lower(cell);
  if (!l.empty() && l.back() == ':') l.pop_back();
  return l;
}

double elw_or_zero(const Eigen::VectorXd& x, double alpha) {
  try {
    return elw_estimate(x, alpha);
  } catch (const DataError&) {
    return 0.0;
  }
}

Eigen::MatrixXd nan_block(Eigen::Index rows, Eigen::Index cols) { return Eigen::MatrixXd::Constant(rows, cols, kNaN); }

struct FamilyRun {
  std::vector<Eigen::MatrixXd> forecasts;  // per origin, hmax x N
  std::vector<nlohmann::json> thetas;
  std::vector<std::string> failures;
};

struct RunContext {
  const Eigen::MatrixXd* Y;
  const ForecastConfig* cfg;
  std::vector<int> origins;
  int hmax;
  Eigen::VectorXd levels;
  std::vector<int> diff_orders;
};

void record_failure(FamilyRun& run, ForecastModel m, const RunContext& ctx, int origin, const std::string& what) {
  run.failures.push_back(fmt::format("origin {}: {}", origin, what));
  if (static_cast<double>(run.failures.size()) > 0.2 * static_cast<double>(ctx.origins.size())) {
    nlohmann::json report = {{"family", model_name(m)},
                             {"origins", ctx.origins.size()},
                             {"failed", run.failures.size()},
                             {"messages", run.failures}};
    throw HarnessAbort(fmt::format("{} failed at {} of {} origins", model_name(m), run.failures.size(), ctx.origins.size()),
                       std::move(report));
  }
}

Family family_of(ForecastModel m) {
  switch (m) {
    case ForecastModel::kDffm: return Family::kDffm;
    case ForecastModel::kDofc: return Family::kDofc;
    default: return Family::kDffd;
  }
}

FamilyRun run_model_family(ForecastModel m, const RunContext& ctx) {
  const ForecastConfig& cfg = *ctx.cfg;
  const Family fam = family_of(m);
  const Eigen::Index N = ctx.Y->cols();
  FamilyRun run;

  ApproxTable table;
  const ApproxTable* tab = nullptr;
  if (fam != Family::kDffd) {
    const int Tw = ctx.origins.front() + 1;
    const ApproxSpec as = fam == Family::kDofc ? ApproxSpec::arma44(Tw) : ApproxSpec::ar5(Tw);
    table = cfg.table_dir.empty() ? fit_table(as) : cached_table(as, cfg.table_dir);
    tab = &table;
  }
  SeedOptions opts;
  opts.r = cfg.r;
  opts.r1 = cfg.r1;
  opts.r2 = cfg.r2;
  opts.p = cfg.p;
  opts.pmax_idio = cfg.pmax;
  opts.elw_alpha = cfg.elw_alpha;

  std::optional<ModelSpec> spec;
  ModelParams theta;
  for (int origin : ctx.origins) {
    const Eigen::MatrixXd yc = ctx.Y->topRows(origin + 1).rowwise() - ctx.levels.transpose();
    try {
      if (!spec) {
        SeedResult seed = seed_model(fam, yc, opts, tab);
        spec = seed.spec;
        theta = seed.theta;
      }
      const Eigen::MatrixXd x = model_observations(*spec, yc);
      const MlResult ml = fit_ml(*spec, theta, x, tab, cfg.em_iters, cfg.bfgs_iters);
      const StateSpaceSystem sys = build_system(*spec, ml.theta, tab);
      const SmootherOutput sm = kalman_filter_smoother(sys, filter_data(sys, x));
      Eigen::MatrixXd fc = forecast_h(sys, sm, yc, ctx.hmax);
      fc.rowwise() += ctx.levels.transpose();
      if (!fc.allFinite()) throw EstimationError("non-finite forecast");
      theta = ml.theta;
      run.forecasts.push_back(fc);
      run.thetas.push_back(params_to_json(*spec, theta));
    } catch (const HarnessAbort&) {
      throw;
    } catch (const std::exception& e) {
      run.forecasts.push_back(nan_block(ctx.hmax, N));
      run.thetas.emplace_back(nullptr);
      record_failure(run, m, ctx, origin, e.what());
    }
  }
  return run;
}

FamilyRun run_benchmark(ForecastModel m, const RunContext& ctx) {
  const ForecastConfig& cfg = *ctx.cfg;
  const Eigen::Index N = ctx.Y->cols();
  FamilyRun run;
  for (int origin : ctx.origins) {
    try {
      Eigen::MatrixXd fc;
      if (m == ForecastModel::kAr) {
        const Eigen::MatrixXd yc = ctx.Y->topRows(origin + 1).rowwise() - ctx.levels.transpose();
        fc = ar_benchmark(yc, cfg.pmax, ctx.hmax);
        fc.rowwise() += ctx.levels.transpose();
      } else {
        fc = pc_benchmark(ctx.Y->topRows(origin + 1), ctx.diff_orders, cfg.r, cfg.pmax, ctx.hmax,
                          m == ForecastModel::kPcar);
      }
      if (!fc.allFinite()) throw EstimationError("non-finite forecast");
      run.forecasts.push_back(fc);
    } catch (const std::exception& e) {
      run.forecasts.push_back(nan_block(ctx.hmax, N));
      record_failure(run, m, ctx, origin, e.what());
    }
  }
  return run;
}

std::string file_token(const std::string& name) {
  std::string out = name;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  return f;
}

}  // namespace

std::string model_name(ForecastModel m) {
  switch (m) {
    case ForecastModel::kDffm: return "DFFM";
    case ForecastModel::kDofc: return "DOFC";
    case ForecastModel::kDffd: return "DFFD";
    case ForecastModel::kAr: return "AR";
    case ForecastModel::kPc: return "PC";
    case ForecastModel::kPcar: return "PCAR";
  }
  return "?";
}

ForecastModel parse_model(const std::string& name) {
  const std::string l = lower(trim(name));
  for (auto m : {ForecastModel::kDffm, ForecastModel::kDofc, ForecastModel::kDffd, ForecastModel::kAr, ForecastModel::kPc,
                 ForecastModel::kPcar})
    if (lower(model_name(m)) == l) return m;
  throw std::invalid_argument(fmt::format("unknown model '{}'", name));
}

bool is_benchmark(ForecastModel m) {
  return m == ForecastModel::kAr || m == ForecastModel::kPc || m == ForecastModel::kPcar;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  return fmt::format("{:.17g}", v);
}

Panel parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    rows.push_back(split_row(line));
  }
  if (rows.empty()) throw DataError("csv: empty input");
  const auto& header = rows.front();
  const std::string first = lower(header.front());
  const bool period_col = first == "period" || first == "date" || first == "sasdate" || first == "time";
  const std::size_t off = period_col ? 1 : 0;
  if (header.size() <= off) throw DataError("csv: no series columns");

  Panel p;
  p.names.assign(header.begin() + static_cast<std::ptrdiff_t>(off), header.end());
  std::set<std::string> seen;
  for (const auto& n : p.names) {
    if (n.empty()) throw DataError("csv: empty series name");
    if (!seen.insert(n).second) throw DataError(fmt::format("csv: duplicate series name '{}'", n));
  }
  const std::size_t N = p.names.size();
  p.transform_codes.assign(N, 1);

  std::size_t r = 1;
  auto int_row = [&](const std::vector<std::string>& row, const char* what) {
    std::vector<int> v(N);
    for (std::size_t i = 0; i < N; ++i) {
      double x = 0.0;
      if (!parse_number(row[i + off], x) || x != std::floor(x))
        throw DataError(fmt::format("csv: bad {} '{}' for series '{}'", what, row[i + off], p.names[i]));
      v[i] = static_cast<int>(x);
    }
    return v;
  };
  while (period_col && r < rows.size()) {
    const std::string label = row_label(rows[r].front());
    if (label != "transform" && label != "code" && label != "codes" && label != "tcode" && label != "diff") break;
    if (rows[r].size() != header.size())
      throw DataError(fmt::format("csv: line {} has {} cells, expected {}", r + 1, rows[r].size(), header.size()));
    if (label == "diff")
      p.diff_codes = int_row(rows[r], "difference order");
    else
      p.transform_codes = int_row(rows[r], "transform code");
    ++r;
  }

  const std::size_t T = rows.size() - r;
  if (T == 0) throw DataError("csv: no data rows");
  p.values.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(N));
  p.period_index.resize(T);
  for (std::size_t t = 0; t < T; ++t, ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size())
      throw DataError(fmt::format("csv: line {} has {} cells, expected {}", r + 1, row.size(), header.size()));
    double idx = static_cast<double>(t);
    if (period_col && !parse_number(row.front(), idx)) idx = static_cast<double>(t);
    p.period_index[t] = idx;
    for (std::size_t i = 0; i < N; ++i) {
      const std::string& cell = row[i + off];
      if (is_missing(cell)) throw DataError(fmt::format("csv: missing value for series '{}' at line {}", p.names[i], r + 1));
      double v = 0.0;
      if (!parse_number(cell, v))
        throw DataError(fmt::format("csv: malformed number '{}' for series '{}' at line {}", cell, p.names[i], r + 1));
      p.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) = v;
    }
  }
  p.validate();
  return p;
}

Panel ingest_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError(fmt::format("csv: cannot open {}", path.string()));
  return parse_csv(f);
}

void write_csv(const Panel& panel, std::ostream& out) {
  out << "period";
  for (const auto& n : panel.names) out << ',' << n;
  out << "\ntransform";
  for (int c : panel.transform_codes) out << ',' << c;
  out << '\n';
  if (panel.diff_codes) {
    out << "diff";
    for (int c : *panel.diff_codes) out << ',' << c;
    out << '\n';
  }
  for (Eigen::Index t = 0; t < panel.values.rows(); ++t) {
    out << format_double(panel.period_index.at(static_cast<std::size_t>(t)));
    for (Eigen::Index i = 0; i < panel.values.cols(); ++i) out << ',' << format_double(panel.values(t, i));
    out << '\n';
  }
}

std::vector<int> parse_horizons(const std::string& text) {
  std::set<int> hs;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    const auto dash = part.find('-', 1);
    try {
      std::size_t used = 0;
      if (dash == std::string::npos) {
        const int h = std::stoi(part, &used);
        if (used != part.size()) throw std::invalid_argument("");
        hs.insert(h);
      } else {
        const int a = std::stoi(part.substr(0, dash)), b = std::stoi(part.substr(dash + 1));
        if (b < a) throw std::invalid_argument("");
        for (int h = a; h <= b; ++h) hs.insert(h);
      }
    } catch (const std::exception&) {
      throw std::invalid_argument(fmt::format("bad horizon list '{}'", text));
    }
  }
  if (hs.empty()) throw std::invalid_argument("horizon list is empty");
  if (*hs.begin() < 1) throw std::invalid_argument("horizons must be at least 1");
  return {hs.begin(), hs.end()};
}

int ForecastConfig::resolved_first_origin(Eigen::Index periods) const {
  return first_origin > 0 ? first_origin : static_cast<int>(periods / 2);
}

int ForecastConfig::resolved_last_origin(Eigen::Index periods) const {
  if (horizons.empty()) throw std::invalid_argument("forecast config: horizons empty");
  const int hmax = *std::max_element(horizons.begin(), horizons.end());
  return last_origin < 0 ? static_cast<int>(periods) - 1 - hmax : last_origin;
}

void ForecastConfig::validate(Eigen::Index periods) const {
  if (families.empty()) throw std::invalid_argument("forecast config: no families");
  if (horizons.empty()) throw std::invalid_argument("forecast config: horizons empty");
  for (int h : horizons)
    if (h < 1) throw std::invalid_argument("forecast config: horizons must be at least 1");
  if (r < 1 || r1 < 0 || r2 < 0 || r1 + r2 < 1) throw std::invalid_argument("forecast config: bad factor counts");
  if (p < 0 || pmax < 0 || em_iters < 0 || bfgs_iters < 0) throw std::invalid_argument("forecast config: negative order");
  if (!(elw_alpha > 0.0 && elw_alpha < 1.0)) throw std::invalid_argument("forecast config: elw_alpha outside (0, 1)");
  const int hmax = *std::max_element(horizons.begin(), horizons.end());
  const int first = resolved_first_origin(periods), last = resolved_last_origin(periods);
  if (first < 1 || first > last)
    throw std::invalid_argument(fmt::format("forecast config: origins [{}, {}] not within sample", first, last));
  if (last + hmax > periods - 1)
    throw std::invalid_argument(fmt::format("forecast config: origin {} + horizon {} beyond {} periods", last, hmax, periods));
}

Eigen::VectorXd centering_levels(const Eigen::Ref<const Eigen::MatrixXd>& window, const Eigen::Ref<const Eigen::VectorXd>& d_hat) {
  Eigen::VectorXd c(window.cols());
  for (Eigen::Index i = 0; i < window.cols(); ++i) c[i] = d_hat[i] < 0.5 ? window.col(i).mean() : window(0, i);
  return c;
}

Eigen::MatrixXd ar_benchmark(const Eigen::Ref<const Eigen::MatrixXd>& y, int pmax, int h) {
  const Eigen::Index T = y.rows(), N = y.cols();
  const int pm = std::min<int>(pmax, static_cast<int>((T - 1) / 4));
  Eigen::MatrixXd fc(h, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    const ArFit fit = fit_ar(y.col(i), pm, InfoCriterion::kAic);
    std::vector<double> path(y.col(i).data(), y.col(i).data() + T);
    for (int k = 0; k < h; ++k) {
      double v = 0.0;
      for (int j = 1; j <= fit.order; ++j) v += fit.coeffs[j - 1] * path[path.size() - static_cast<std::size_t>(j)];
      path.push_back(v);
      fc(k, i) = v;
    }
  }
  return fc;
}

Eigen::MatrixXd pc_benchmark(const Eigen::Ref<const Eigen::MatrixXd>& y, const std::vector<int>& diff_orders, int r,
                             int pmax, int h, bool own_lags) {
  const Eigen::Index T = y.rows(), N = y.cols();
  if (static_cast<Eigen::Index>(diff_orders.size()) != N) throw std::invalid_argument("pc_benchmark: diff order count");
  int off = 0;
  for (int k : diff_orders) {
    if (k < 0 || k > 2) throw std::invalid_argument("pc_benchmark: difference orders must be 0, 1 or 2");
    off = std::max(off, k);
  }
  const Eigen::Index Tz = T - off;
  Eigen::MatrixXd Z(Tz, N);
  std::vector<std::vector<double>> last(static_cast<std::size_t>(N));  // last value of Delta^m y, m < k
  for (Eigen::Index i = 0; i < N; ++i) {
    Eigen::VectorXd z = y.col(i);
    for (int m = 0; m < diff_orders[static_cast<std::size_t>(i)]; ++m) {
      last[static_cast<std::size_t>(i)].push_back(z[z.size() - 1]);
      z = (z.tail(z.size() - 1) - z.head(z.size() - 1)).eval();
    }
    Z.col(i) = z.tail(Tz);
  }
  const Eigen::RowVectorXd mu = Z.colwise().mean();
  Eigen::RowVectorXd sd = ((Z.rowwise() - mu).colwise().squaredNorm() / static_cast<double>(Tz)).cwiseSqrt();
  for (Eigen::Index i = 0; i < N; ++i)
    if (!(sd[i] > 0.0)) sd[i] = 1.0;
  const Eigen::MatrixXd Zs = (Z.rowwise() - mu).array().rowwise() / sd.array();
  const int k = std::min<int>(r, static_cast<int>(std::min(N, Tz - 1)));
  const Eigen::MatrixXd F = pc_extract(Zs, k, 0.0).factors;

  Eigen::MatrixXd fc(h, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    int p = 0;
    if (own_lags) p = fit_ar(Zs.col(i), std::min<int>(pmax, static_cast<int>((Tz - 1) / 4)), InfoCriterion::kAic).order;
    const int start = std::max(p - 1, 0);
    Eigen::VectorXd zhat(h);
    for (int j = 1; j <= h; ++j) {
      const Eigen::Index n = Tz - j - start;
      const Eigen::Index cols = 1 + k + p;
      if (n <= cols) throw EstimationError(fmt::format("pc_benchmark: {} rows for {} regressors", n, cols));
      Eigen::MatrixXd X(n, cols);
      Eigen::VectorXd target(n);
      auto regressors = [&](Eigen::Index t) {
        Eigen::RowVectorXd row(cols);
        row[0] = 1.0;
        row.segment(1, k) = F.row(t);
        for (int l = 0; l < p; ++l) row[1 + k + l] = Z(t - l, i);
        return row;
      };
      for (Eigen::Index s = 0; s < n; ++s) {
        X.row(s) = regressors(start + s);
        target[s] = Z(start + s + j, i);
      }
      const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(target);
      zhat[j - 1] = regressors(Tz - 1).dot(beta);
    }
    Eigen::VectorXd path = zhat;
    const auto& lv = last[static_cast<std::size_t>(i)];
    for (auto it = lv.rbegin(); it != lv.rend(); ++it) {
      double acc = *it;
      for (int j = 0; j < h; ++j) {
        acc += path[j];
        path[j] = acc;
      }
    }
    fc.col(i) = path;
  }
  return fc;
}

ForecastResult run_recursive(const Panel& panel_in, const ForecastConfig& cfg) {
  panel_in.validate();
  const Panel panel = apply_transforms(panel_in, cfg.detrend);
  const Eigen::MatrixXd& Y = panel.values;
  const Eigen::Index T = Y.rows(), N = Y.cols();
  cfg.validate(T);

  ForecastResult res;
  res.horizons = cfg.horizons;
  std::sort(res.horizons.begin(), res.horizons.end());
  res.horizons.erase(std::unique(res.horizons.begin(), res.horizons.end()), res.horizons.end());
  res.series = panel.names;
  res.families = cfg.families;
  {
    std::set<ForecastModel> seen;
    for (auto m : res.families)
      if (!seen.insert(m).second) throw std::invalid_argument(fmt::format("family {} listed twice", model_name(m)));
  }
  const int first = cfg.resolved_first_origin(T), last = cfg.resolved_last_origin(T);
  for (int o = first; o <= last; ++o) res.origins.push_back(o);

  RunContext ctx;
  ctx.Y = &Y;
  ctx.cfg = &cfg;
  ctx.origins = res.origins;
  ctx.hmax = res.horizons.back();
  ctx.levels = Eigen::VectorXd::Zero(N);
  const bool need_diff = std::any_of(res.families.begin(), res.families.end(), [](ForecastModel m) {
    return m == ForecastModel::kPc || m == ForecastModel::kPcar;
  });
  if (cfg.center || (need_diff && !panel.diff_codes)) {
    const Eigen::MatrixXd W0 = Y.topRows(first + 1);
    Eigen::VectorXd d_hat(N);
    for (Eigen::Index i = 0; i < N; ++i) d_hat[i] = elw_or_zero(W0.col(i), cfg.elw_alpha);
    if (cfg.center) ctx.levels = centering_levels(W0, d_hat);
    if (need_diff && !panel.diff_codes) {
      for (Eigen::Index i = 0; i < N; ++i)
        ctx.diff_orders.push_back(static_cast<int>(std::clamp(std::round(d_hat[i]), 0.0, 2.0)));
    }
  }
  if (panel.diff_codes) ctx.diff_orders = *panel.diff_codes;

  const std::size_t O = res.origins.size(), H = res.horizons.size(), F = res.families.size();
  res.actuals.assign(O * H * static_cast<std::size_t>(N), kNaN);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t h = 0; h < H; ++h)
      for (Eigen::Index i = 0; i < N; ++i)
        res.actuals[res.actual_index(o, h, static_cast<std::size_t>(i))] = Y(res.origins[o] + res.horizons[h], i);

  std::vector<std::future<FamilyRun>> tasks;
  for (auto m : res.families) {
    tasks.push_back(std::async(std::launch::async, [m, &ctx] {
      return is_benchmark(m) ? run_benchmark(m, ctx) : run_model_family(m, ctx);
    }));
  }
  std::vector<FamilyRun> runs;
  std::exception_ptr abort;
  for (auto& t : tasks) {
    try {
      runs.push_back(t.get());
    } catch (...) {
      if (!abort) abort = std::current_exception();
      runs.emplace_back();
    }
  }
  if (abort) std::rethrow_exception(abort);

  res.cube.assign(O * H * static_cast<std::size_t>(N) * F, kNaN);
  for (std::size_t f = 0; f < F; ++f) {
    const FamilyRun& run = runs[f];
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t h = 0; h < H; ++h)
        for (Eigen::Index i = 0; i < N; ++i)
          res.cube[res.cube_index(o, h, static_cast<std::size_t>(i), f)] = run.forecasts[o](res.horizons[h] - 1, i);
    if (!is_benchmark(res.families[f])) res.thetas[res.families[f]] = run.thetas;
    if (!run.failures.empty()) res.failures[res.families[f]] = run.failures;
  }
  mspe_tables(res);
  return res;
}

void mspe_tables(ForecastResult& res) {
  const std::size_t O = res.origins.size(), H = res.horizons.size(), N = res.series.size(), F = res.families.size();
  if (res.cube.size() != O * H * N * F || res.actuals.size() != O * H * N)
    throw std::invalid_argument("mspe_tables: cube dimensions do not match");
  res.mspe.assign(H * N * F, kNaN);
  res.rel_mspe.assign(H * N * F, kNaN);
  res.best_count = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(H), static_cast<Eigen::Index>(F));
  std::optional<std::size_t> ar;
  for (std::size_t f = 0; f < F; ++f)
    if (res.families[f] == ForecastModel::kAr) ar = f;
  std::vector<std::size_t> order;
  for (std::size_t f = 0; f < F; ++f)
    if (is_benchmark(res.families[f])) order.push_back(f);
  for (std::size_t f = 0; f < F; ++f)
    if (!is_benchmark(res.families[f])) order.push_back(f);

  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t f = 0; f < F; ++f) {
        double sum = 0.0;
        int n = 0;
        for (std::size_t o = 0; o < O; ++o) {
          const double fc = res.cube[res.cube_index(o, h, i, f)];
          if (std::isnan(fc)) continue;
          const double e = fc - res.actuals[res.actual_index(o, h, i)];
          sum += e * e;
          ++n;
        }
        if (n > 0) res.mspe[res.mspe_index(h, i, f)] = sum / n;
      }
      if (ar) {
        const double base = res.mspe[res.mspe_index(h, i, *ar)];
        for (std::size_t f = 0; f < F; ++f) {
          const double m = res.mspe[res.mspe_index(h, i, f)];
          res.rel_mspe[res.mspe_index(h, i, f)] = f == *ar ? (std::isnan(base) ? kNaN : 1.0) : m / base;
        }
      }
      std::optional<std::size_t> best;
      for (std::size_t f : order) {
        const double m = res.mspe[res.mspe_index(h, i, f)];
        if (std::isnan(m)) continue;
        if (!best || m < res.mspe[res.mspe_index(h, i, *best)]) best = f;
      }
      if (best) ++res.best_count(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(*best));
    }
  }
}

void write_outputs(const ForecastResult& res, const std::filesystem::path& dir, bool figures) {
  std::filesystem::create_directories(dir);
  const std::size_t O = res.origins.size(), H = res.horizons.size(), N = res.series.size(), F = res.families.size();
  {
    auto f = open_out(dir / "forecasts.csv");
    f << "origin,horizon,series,family,forecast,actual\n";
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t k = 0; k < F; ++k)
            f << res.origins[o] << ',' << res.horizons[h] << ',' << res.series[i] << ',' << model_name(res.families[k]) << ','
              << format_double(res.cube[res.cube_index(o, h, i, k)]) << ','
              << format_double(res.actuals[res.actual_index(o, h, i)]) << '\n';
  }
  auto table = [&](const char* name, const std::vector<double>& v) {
    auto f = open_out(dir / name);
    f << "horizon,series";
    for (auto m : res.families) f << ',' << model_name(m);
    f << '\n';
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < N; ++i) {
        f << res.horizons[h] << ',' << res.series[i];
        for (std::size_t k = 0; k < F; ++k) f << ',' << format_double(v[res.mspe_index(h, i, k)]);
        f << '\n';
      }
  };
  table("mspe.csv", res.mspe);
  table("rel_mspe.csv", res.rel_mspe);
  {
    auto f = open_out(dir / "best_count.csv");
    f << "horizon";
    for (auto m : res.families) f << ',' << model_name(m);
    f << '\n';
    for (std::size_t h = 0; h < H; ++h) {
      f << res.horizons[h];
      for (std::size_t k = 0; k < F; ++k) f << ',' << res.best_count(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(k));
      f << '\n';
    }
  }
  for (const auto& [m, list] : res.thetas) {
    for (std::size_t o = 0; o < list.size(); ++o) {
      if (list[o].is_null()) continue;
      auto f = open_out(dir / fmt::format("theta_{}_{}.json", model_name(m), res.origins[o]));
      f << list[o].dump(2) << '\n';
    }
  }
  if (figures && H > 0) {
    for (std::size_t i = 0; i < N; ++i) {
      auto f = open_out(dir / fmt::format("figure_{}.csv", file_token(res.series[i])));
      f << "origin,target,actual";
      for (auto m : res.families) f << ',' << model_name(m);
      f << '\n';
      for (std::size_t o = 0; o < O; ++o) {
        f << res.origins[o] << ',' << res.origins[o] + res.horizons[0] << ','
          << format_double(res.actuals[res.actual_index(o, 0, i)]);
        for (std::size_t k = 0; k < F; ++k) f << ',' << format_double(res.cube[res.cube_index(o, 0, i, k)]);
        f << '\n';
      }
    }
  }
}

}  // namespace fracfactor
