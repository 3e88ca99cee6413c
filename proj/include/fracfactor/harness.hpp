#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fracfactor/error.hpp"
#include "fracfactor/frac.hpp"
#include "fracfactor/longmem.hpp"
#include "fracfactor/statespace.hpp"

namespace fracfactor {

enum class ForecastModel { kDffm, kDofc, kDffd, kAr, kPc, kPcar };

std::string model_name(ForecastModel m);
/// Case-insensitive; throws std::invalid_argument on an unknown name.
ForecastModel parse_model(const std::string& name);
bool is_benchmark(ForecastModel m);

/// Reads a panel.  The header names the series; when its first cell is
/// "period", "date", "sasdate" or "time" that column holds the period index
/// (non-numeric dates are numbered 0, 1, ...), and rows labelled
/// "transform"/"tcode"/"code" or "diff" in it may follow with integer
/// transform codes and pre-differencing orders.  Missing codes default to 1.
/// Missing cells, ragged rows, malformed numbers and duplicate names throw
/// DataError.
Panel parse_csv(std::istream& in);
Panel ingest_csv(const std::filesystem::path& path);
/// Writes the format parse_csv reads, floats with 17 significant digits.
void write_csv(const Panel& panel, std::ostream& out);

/// "1-12", "1,3,6" or "1-3,6".
std::vector<int> parse_horizons(const std::string& text);

struct ForecastConfig {
  std::vector<ForecastModel> families = {ForecastModel::kDffm, ForecastModel::kDofc, ForecastModel::kDffd,
                                         ForecastModel::kAr,   ForecastModel::kPc,   ForecastModel::kPcar};
  int r = 7, r1 = 3, r2 = 4;
  int p = 1;  // factor AR order
  std::vector<int> horizons = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  /// Row index of the last observation used at the first and last origin.
  /// Non-positive first_origin means half the sample; negative last_origin
  /// means as late as the largest horizon allows.
  int first_origin = 0, last_origin = -1;
  int em_iters = 10;
  int bfgs_iters = 100;
  double elw_alpha = 0.5;
  int pmax = 4;  // AR benchmark (AIC) and idiosyncratic (BIC) order cap
  std::uint64_t seed = 0;
  bool detrend = false;
  /// Subtract a per-series level before fitting (window mean when the ELW
  /// order is below 1/2, first observation otherwise).
  bool center = true;
  std::filesystem::path table_dir;  // empty: fit tables in memory

  /// Throws std::invalid_argument.
  void validate(Eigen::Index periods) const;
  int resolved_first_origin(Eigen::Index periods) const;
  int resolved_last_origin(Eigen::Index periods) const;
};

struct ForecastResult {
  std::vector<int> origins;
  std::vector<int> horizons;
  std::vector<std::string> series;
  std::vector<ForecastModel> families;
  /// Flat origins x horizons x series x families; NaN marks a failed cell.
  std::vector<double> cube;
  /// origins x horizons x series.
  std::vector<double> actuals;
  /// horizons x series x families.
  std::vector<double> mspe, rel_mspe;
  /// horizons x families.
  Eigen::MatrixXi best_count;
  /// Estimated parameters per family and origin (model families only).
  std::map<ForecastModel, std::vector<nlohmann::json>> thetas;
  std::map<ForecastModel, std::vector<std::string>> failures;

  std::size_t cube_index(std::size_t o, std::size_t h, std::size_t i, std::size_t f) const {
    return ((o * horizons.size() + h) * series.size() + i) * families.size() + f;
  }
  std::size_t actual_index(std::size_t o, std::size_t h, std::size_t i) const {
    return (o * horizons.size() + h) * series.size() + i;
  }
  std::size_t mspe_index(std::size_t h, std::size_t i, std::size_t f) const {
    return (h * series.size() + i) * families.size() + f;
  }
};

/// A family failed at more than a fifth of the origins.
class HarnessAbort : public EstimationError {
 public:
  HarnessAbort(const std::string& what, nlohmann::json report) : EstimationError(what), report_(std::move(report)) {}
  const nlohmann::json& report() const { return report_; }

 private:
  nlohmann::json report_;
};

/// Per-series levels removed before fitting, from the first window.
Eigen::VectorXd centering_levels(const Eigen::Ref<const Eigen::MatrixXd>& window, const Eigen::Ref<const Eigen::VectorXd>& d_hat);

/// AR(AIC) iterated forecasts, one row per step 1..h.
Eigen::MatrixXd ar_benchmark(const Eigen::Ref<const Eigen::MatrixXd>& y, int pmax, int h);
/// Direct forecasts from principal components of the integer-differenced
/// panel, with own lags when `own_lags` is set; rows are steps 1..h in levels.
Eigen::MatrixXd pc_benchmark(const Eigen::Ref<const Eigen::MatrixXd>& y, const std::vector<int>& diff_orders, int r,
                             int pmax, int h, bool own_lags);

/// Recursive-window experiment on the panel after transforms.
ForecastResult run_recursive(const Panel& panel, const ForecastConfig& config);

/// Fills mspe, rel_mspe and best_count from cube and actuals.
void mspe_tables(ForecastResult& result);

/// forecasts.csv, mspe.csv, rel_mspe.csv, best_count.csv and
/// theta_<family>_<origin>.json; figure_<series>.csv when `figures` is set.
void write_outputs(const ForecastResult& result, const std::filesystem::path& dir, bool figures);

/// 17 significant digits, "NA" for NaN.
std::string format_double(double v);

}  // namespace fracfactor
