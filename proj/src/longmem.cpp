#include "fracfactor/longmem.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <json.hpp>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/optim.hpp"
#include "fracfactor/polynomial.hpp"

namespace fracfactor {

Eigen::VectorXd ApproxSpec::default_grid() {
  Eigen::VectorXd g(31);
  for (int k = 0; k < 31; ++k) g[k] = 0.05 * k;
  return g;
}

ApproxSpec ApproxSpec::arma44(int T) { return ApproxSpec{4, 4, T, default_grid()}; }
ApproxSpec ApproxSpec::ar5(int T) { return ApproxSpec{5, 0, T, default_grid()}; }

void ApproxSpec::validate() const {
  if (v < 0 || w < 0 || v + w == 0) throw std::invalid_argument("approximation orders must be nonnegative and not both zero");
  if (T < 1) throw std::invalid_argument("approximation length T must be positive");
  if (grid.size() < 2) throw std::invalid_argument("approximation grid needs at least two points");
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    if (!std::isfinite(grid[k])) throw std::invalid_argument("approximation grid must be finite");
    if (k > 0 && !(grid[k] > grid[k - 1])) throw std::invalid_argument("approximation grid must be strictly increasing");
  }
}

void ApproxTable::build_splines() {
  splines.clear();
  for (Eigen::Index c = 0; c < coeffs.cols(); ++c) splines.emplace_back(spec.grid, coeffs.col(c));
}

Eigen::VectorXd arma_wold(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& m,
                          int n) {
  if (n < 1) throw std::invalid_argument("arma_wold: n must be positive");
  if (!ar_is_stable(a)) throw std::domain_error("arma_wold: AR polynomial is not stable");
  Eigen::VectorXd psi = Eigen::VectorXd::Zero(n);
  const int v = static_cast<int>(a.size());
  const int w = static_cast<int>(m.size());
  for (int j = 0; j < n; ++j) {
    double s = j == 0 ? 1.0 : 0.0;
    if (j >= 1 && j <= w) s += m[j - 1];
    for (int k = 1; k <= std::min(j, v); ++k) s += a[k - 1] * psi[j - k];
    psi[j] = s;
  }
  return psi;
}

namespace {

// Keeps reflection coefficients strictly inside (-1, 1) after rounding.
constexpr double kMaxPacf = 1.0 - 1e-13;

Eigen::VectorXd ar_part(const Eigen::VectorXd& x, int v) {
  return pacf_to_ar((kMaxPacf * x.head(v).array().tanh()).matrix());
}

Eigen::VectorXd loss_weights(int T) {
  Eigen::VectorXd w(T);
  for (int j = 0; j < T; ++j) w[j] = std::sqrt(static_cast<double>(T - j) / T);
  return w;
}

// Weighted residuals in the unconstrained (tanh-PACF, free MA) coordinates.
Eigen::VectorXd weighted_residuals(const Eigen::VectorXd& x, int v, const Eigen::VectorXd& target,
                                   const Eigen::VectorXd& weights) {
  const int T = static_cast<int>(target.size());
  const Eigen::VectorXd a = ar_part(x, v);
  const Eigen::VectorXd m = x.tail(x.size() - v);
  Eigen::VectorXd psi = Eigen::VectorXd::Zero(T);
  for (int j = 0; j < T; ++j) {
    double s = j == 0 ? 1.0 : 0.0;
    if (j >= 1 && j <= m.size()) s += m[j - 1];
    for (int k = 1; k <= std::min<int>(j, v); ++k) s += a[k - 1] * psi[j - k];
    psi[j] = s;
  }
  return weights.cwiseProduct(psi - target);
}

Eigen::VectorXd to_params(const Eigen::VectorXd& x, int v) {
  Eigen::VectorXd p(x.size());
  p.head(v) = ar_part(x, v);
  p.tail(x.size() - v) = x.tail(x.size() - v);
  return p;
}

}  // namespace

double approx_loss(const Eigen::Ref<const Eigen::VectorXd>& params, int v, double b, int T) {
  if (T < 1) throw std::invalid_argument("approx_loss: T must be positive");
  if (v < 0 || v > params.size()) throw std::invalid_argument("approx_loss: bad AR order");
  const Eigen::VectorXd psi = arma_wold(params.head(v), params.tail(params.size() - v), T);
  const Eigen::VectorXd pi = frac_coeffs(-b, static_cast<std::size_t>(T)).coeffs;
  double s = 0.0;
  for (int j = 0; j < T; ++j) {
    const double e = psi[j] - pi[j];
    s += static_cast<double>(T - j) * e * e;
  }
  return s / T;
}

ApproxTable fit_table(const ApproxSpec& spec) {
  spec.validate();
  const int v = spec.v, w = spec.w, T = spec.T;
  const int k = v + w;
  const Eigen::Index G = spec.grid.size();
  const Eigen::VectorXd weights = loss_weights(T);

  ApproxTable table;
  table.spec = spec;
  table.coeffs.resize(G, k);
  table.losses.resize(G);

  optim::LmOptions lm;
  lm.max_iterations = 400;
  lm.tolerance = 1e-15;
  // A faint pull towards the previous solution keeps the coefficient path
  // on one branch; ARMA fits have nearly flat pole-zero directions.
  constexpr double lambda = 1e-8;
  constexpr int substeps = 5;
  Eigen::VectorXd warm = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(k);
  // Moves the continuation from b_from to b_to in `substeps` increments.
  auto continue_to = [&](double b_from, double b_to, int steps) {
    for (int s = 1; s <= steps; ++s) {
      const double b = b_from + (b_to - b_from) * s / steps;
      const Eigen::VectorXd target = frac_coeffs(-b, static_cast<std::size_t>(T)).coeffs;
      auto res_fn = [&](const Eigen::VectorXd& x) {
        Eigen::VectorXd r(T + k);
        r.head(T) = weighted_residuals(x, v, target, weights);
        r.tail(k) = std::sqrt(lambda) * (to_params(x, v) - prev);
        return r;
      };
      Eigen::VectorXd start = warm;
      start.head(v) = start.head(v).cwiseMax(-8.0).cwiseMin(8.0);
      const optim::Result best = optim::least_squares_lm(res_fn, start, lm);
      if (!std::isfinite(best.value)) throw EstimationError(fmt::format("fit_table: no finite fit at b = {}", b));
      warm = best.x;
      prev = to_params(best.x, v);
    }
  };
  auto store = [&](Eigen::Index g) {
    Eigen::VectorXd params = prev;
    // Near b = 1 the optimum sits on the unit circle; rounding can leave a
    // root marginally outside, so pull it back.
    if (v > 0 && !ar_is_stable(params.head(v))) params.head(v) = project_stable_ar(params.head(v), 1.0 - 1e-6);
    table.coeffs.row(g) = params.transpose();
    table.losses[g] = approx_loss(params, v, spec.grid[g], T);
  };
  // The sweep starts cold at the second knot and runs upward; the first
  // knot is reached last by stepping back down.  Starting at b = 0 itself
  // would pin the path to the zero filter, which is not the limit of the
  // neighbouring solutions.
  continue_to(spec.grid[1], spec.grid[1], 1);
  store(1);
  const Eigen::VectorXd second = warm, second_params = prev;
  for (Eigen::Index g = 2; g < G; ++g) {
    continue_to(spec.grid[g - 1], spec.grid[g], substeps);
    store(g);
  }
  warm = second;
  prev = second_params;
  continue_to(spec.grid[1], spec.grid[0], substeps);
  store(0);
  table.build_splines();
  return table;
}

Eigen::VectorXd eval_approx(const ApproxTable& table, double b, bool* projected) {
  if (!(b >= table.lower() && b <= table.upper()))
    throw std::out_of_range(fmt::format("eval_approx: b = {} outside [{}, {}]", b, table.lower(), table.upper()));
  const int k = table.spec.v + table.spec.w;
  Eigen::VectorXd out(k);
  for (int c = 0; c < k; ++c) out[c] = table.splines[c](b);
  bool moved = false;
  if (table.spec.v > 0 && !ar_is_stable(out.head(table.spec.v)))
    out.head(table.spec.v) = project_stable_ar(out.head(table.spec.v), 0.999, &moved);
  if (projected) *projected = moved;
  return out;
}

Eigen::VectorXd eval_approx_derivative(const ApproxTable& table, double b) {
  if (!(b >= table.lower() && b <= table.upper()))
    throw std::out_of_range(fmt::format("eval_approx_derivative: b = {} outside grid range", b));
  const int k = table.spec.v + table.spec.w;
  Eigen::VectorXd out(k);
  for (int c = 0; c < k; ++c) out[c] = table.splines[c].derivative(b);
  return out;
}

std::string approx_cache_key(const ApproxSpec& spec) {
  std::uint64_t h = 1469598103934665603ULL;
  for (Eigen::Index i = 0; i < spec.grid.size(); ++i) {
    unsigned char bytes[sizeof(double)];
    const double x = spec.grid[i];
    std::memcpy(bytes, &x, sizeof(double));
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 1099511628211ULL;
    }
  }
  return fmt::format("approx_v{}_w{}_T{}_{:016x}", spec.v, spec.w, spec.T, h);
}

void save_table(const ApproxTable& table, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "fracfactor-approx-table";
  j["version"] = 1;
  j["v"] = table.spec.v;
  j["w"] = table.spec.w;
  j["T"] = table.spec.T;
  j["grid"] = std::vector<double>(table.spec.grid.data(), table.spec.grid.data() + table.spec.grid.size());
  j["losses"] = std::vector<double>(table.losses.data(), table.losses.data() + table.losses.size());
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index g = 0; g < table.coeffs.rows(); ++g) {
    std::vector<double> row(table.coeffs.cols());
    for (Eigen::Index c = 0; c < table.coeffs.cols(); ++c) row[c] = table.coeffs(g, c);
    rows.push_back(row);
  }
  j["coeffs"] = rows;
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << j.dump(1) << '\n';
}

ApproxTable load_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  const nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "fracfactor-approx-table" || j.value("version", 0) != 1)
    throw DataError(fmt::format("{} is not an approximation table", path.string()));
  ApproxTable t;
  t.spec.v = j.at("v");
  t.spec.w = j.at("w");
  t.spec.T = j.at("T");
  const auto grid = j.at("grid").get<std::vector<double>>();
  t.spec.grid = Eigen::Map<const Eigen::VectorXd>(grid.data(), static_cast<Eigen::Index>(grid.size()));
  t.spec.validate();
  const auto losses = j.at("losses").get<std::vector<double>>();
  t.losses = Eigen::Map<const Eigen::VectorXd>(losses.data(), static_cast<Eigen::Index>(losses.size()));
  const auto rows = j.at("coeffs").get<std::vector<std::vector<double>>>();
  const int k = t.spec.v + t.spec.w;
  if (static_cast<Eigen::Index>(rows.size()) != t.spec.grid.size() || t.losses.size() != t.spec.grid.size())
    throw DataError(fmt::format("{}: grid and coefficient rows disagree", path.string()));
  t.coeffs.resize(t.spec.grid.size(), k);
  for (std::size_t g = 0; g < rows.size(); ++g) {
    if (static_cast<int>(rows[g].size()) != k) throw DataError(fmt::format("{}: ragged coefficient row", path.string()));
    for (int c = 0; c < k; ++c) t.coeffs(static_cast<Eigen::Index>(g), c) = rows[g][c];
  }
  t.build_splines();
  return t;
}

ApproxTable cached_table(const ApproxSpec& spec, const std::filesystem::path& dir) {
  if (dir.empty()) return fit_table(spec);
  const auto path = dir / (approx_cache_key(spec) + ".json");
  if (std::filesystem::exists(path)) {
    try {
      ApproxTable t = load_table(path);
      if (t.spec.v == spec.v && t.spec.w == spec.w && t.spec.T == spec.T && t.spec.grid == spec.grid) return t;
    } catch (const std::exception&) {
      // Stale or corrupt cache entry: refit below.
    }
  }
  ApproxTable t = fit_table(spec);
  std::filesystem::create_directories(dir);
  save_table(t, path);
  return t;
}

}  // namespace fracfactor
