#pragma once

#include <map>

#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "fracfactor/longmem.hpp"

namespace testing_support {

inline Eigen::MatrixXd randn(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline Eigen::VectorXd randn_vec(Eigen::Index n, std::uint64_t seed) { return randn(n, 1, seed).col(0); }

// Share of the variance of `truth` explained by a regression on `est`.
inline double trace_r2(const Eigen::MatrixXd& est, const Eigen::MatrixXd& truth) {
  const Eigen::MatrixXd b = est.colPivHouseholderQr().solve(truth);
  return 1.0 - (truth - est * b).squaredNorm() / truth.squaredNorm();
}

inline const char* table_dir() { return FRACFACTOR_TABLE_DIR; }

inline const fracfactor::ApproxTable& table(const fracfactor::ApproxSpec& spec) {
  static std::map<std::string, fracfactor::ApproxTable> cache;
  const std::string key = fracfactor::approx_cache_key(spec);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, fracfactor::cached_table(spec, table_dir())).first;
  return it->second;
}

}  // namespace testing_support
