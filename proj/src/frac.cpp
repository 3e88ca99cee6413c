#include "fracfactor/frac.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

#include <fmt/format.h>
#include <unsupported/Eigen/FFT>

#include "fracfactor/error.hpp"

namespace fracfactor {

namespace {

// Below this length the direct O(T^2) sum is faster than three FFTs.
constexpr Eigen::Index kDirectConvolutionLimit = 192;

Eigen::VectorXd convolve_direct(const Eigen::Ref<const Eigen::VectorXd>& w,
                                const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd out(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    double s = 0.0;
    for (Eigen::Index j = 0; j <= t; ++j) s += w[j] * x[t - j];
    out[t] = s;
  }
  return out;
}

Eigen::VectorXd convolve_fft(const Eigen::Ref<const Eigen::VectorXd>& w,
                             const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Eigen::Index n = x.size();
  Eigen::Index m = 1;
  while (m < 2 * n) m <<= 1;
  std::vector<std::complex<double>> a(m), b(m), fa, fb, out;
  for (Eigen::Index i = 0; i < n; ++i) {
    a[i] = w[i];
    b[i] = x[i];
  }
  Eigen::FFT<double> fft;
  fft.fwd(fa, a);
  fft.fwd(fb, b);
  for (Eigen::Index i = 0; i < m; ++i) fa[i] *= fb[i];
  fft.inv(out, fa);
  Eigen::VectorXd res(n);
  for (Eigen::Index i = 0; i < n; ++i) res[i] = out[i].real();
  return res;
}

}  // namespace

FracCoeffs frac_coeffs(double d, std::size_t n) {
  if (n == 0) throw std::invalid_argument("frac_coeffs: n must be positive");
  if (!std::isfinite(d)) throw std::invalid_argument("frac_coeffs: d must be finite");
  FracCoeffs out{d, Eigen::VectorXd(static_cast<Eigen::Index>(n))};
  out.coeffs[0] = 1.0;
  for (Eigen::Index j = 1; j < out.coeffs.size(); ++j) {
    out.coeffs[j] = out.coeffs[j - 1] * (static_cast<double>(j) - d - 1.0) / static_cast<double>(j);
  }
  return out;
}

Eigen::VectorXd truncated_convolve(const Eigen::Ref<const Eigen::VectorXd>& w,
                                   const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (w.size() < x.size()) throw std::invalid_argument("truncated_convolve: weights shorter than series");
  if (x.size() <= kDirectConvolutionLimit) return convolve_direct(w, x);
  return convolve_fft(w, x);
}

Eigen::VectorXd frac_diff(const Eigen::Ref<const Eigen::VectorXd>& x, double d) {
  if (x.size() == 0) throw std::invalid_argument("frac_diff: empty series");
  if (d == 0.0) return x;
  const auto pi = frac_coeffs(d, static_cast<std::size_t>(x.size()));
  return truncated_convolve(pi.coeffs, x);
}

Eigen::VectorXd frac_cumulate(const Eigen::Ref<const Eigen::VectorXd>& x, double d) {
  return frac_diff(x, -d);
}

Eigen::MatrixXd frac_diff_columns(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                  const Eigen::Ref<const Eigen::VectorXd>& d) {
  if (d.size() != x.cols()) throw std::invalid_argument("frac_diff_columns: one order per column required");
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) out.col(i) = frac_diff(x.col(i), d[i]);
  return out;
}

void Panel::validate() const {
  const auto n = static_cast<std::size_t>(values.cols());
  if (names.size() != n) throw DataError(fmt::format("panel: {} names for {} series", names.size(), n));
  if (transform_codes.size() != n) {
    throw DataError(fmt::format("panel: {} transform codes for {} series", transform_codes.size(), n));
  }
  if (est_orders && static_cast<std::size_t>(est_orders->size()) != n) {
    throw DataError("panel: est_orders length does not match series count");
  }
  if (diff_codes && diff_codes->size() != n) throw DataError("panel: diff_codes length does not match series count");
  if (period_index.size() != static_cast<std::size_t>(values.rows())) {
    throw DataError("panel: period_index length does not match row count");
  }
  for (std::size_t t = 1; t < period_index.size(); ++t) {
    if (!(period_index[t] > period_index[t - 1])) {
      throw DataError(fmt::format("panel: period index not strictly increasing at row {}", t));
    }
  }
  for (Eigen::Index i = 0; i < values.cols(); ++i) {
    for (Eigen::Index t = 0; t < values.rows(); ++t) {
      if (!std::isfinite(values(t, i))) {
        throw DataError(fmt::format("panel: non-finite value in series '{}' at row {}", names[i], t));
      }
    }
  }
}

Panel Panel::slice_rows(Eigen::Index begin, Eigen::Index end) const {
  if (begin < 0 || end > values.rows() || begin >= end) throw std::invalid_argument("Panel::slice_rows: bad range");
  Panel out = *this;
  out.values = values.middleRows(begin, end - begin);
  out.period_index.assign(period_index.begin() + begin, period_index.begin() + end);
  return out;
}

Panel apply_transforms(const Panel& panel, bool detrend) {
  Panel out = panel;
  const Eigen::Index T = panel.values.rows();
  for (Eigen::Index i = 0; i < panel.values.cols(); ++i) {
    const int code = panel.transform_codes.at(static_cast<std::size_t>(i));
    if (code == static_cast<int>(TransformCode::kLog)) {
      for (Eigen::Index t = 0; t < T; ++t) {
        const double v = panel.values(t, i);
        if (!(v > 0.0)) {
          throw DataError(fmt::format("log transform of non-positive value {} in series '{}' at row {}", v,
                                      panel.names.at(static_cast<std::size_t>(i)), t));
        }
        out.values(t, i) = std::log(v);
      }
    } else if (code != static_cast<int>(TransformCode::kNone)) {
      throw std::invalid_argument(fmt::format("unknown transform code {} for series '{}'", code,
                                              panel.names.at(static_cast<std::size_t>(i))));
    }
  }
  if (detrend && T > 0) {
    Eigen::MatrixXd X(T, 2);
    for (Eigen::Index t = 0; t < T; ++t) {
      X(t, 0) = 1.0;
      X(t, 1) = static_cast<double>(t + 1);
    }
    const auto qr = X.colPivHouseholderQr();
    const Eigen::MatrixXd beta = qr.solve(out.values);
    out.values -= X * beta;
  }
  return out;
}

}  // namespace fracfactor
