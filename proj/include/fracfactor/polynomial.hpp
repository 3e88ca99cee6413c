#pragma once

#include <Eigen/Dense>

namespace fracfactor {

// AR coefficients follow the sign convention a(L) = 1 - a_1 L - ... - a_p L^p
// throughout.

/// True when all roots of 1 - a_1 z - ... - a_p z^p lie strictly outside
/// the unit circle.
bool ar_is_stable(const Eigen::Ref<const Eigen::VectorXd>& a);

/// Partial autocorrelations of a stable AR polynomial (step-down recursion).
/// Throws std::domain_error when the polynomial is not stable.
Eigen::VectorXd ar_to_pacf(const Eigen::Ref<const Eigen::VectorXd>& a);

/// Durbin-Levinson map from partial autocorrelations in (-1, 1) to AR
/// coefficients.  Stable by construction.
Eigen::VectorXd pacf_to_ar(const Eigen::Ref<const Eigen::VectorXd>& pacf);

/// Unconstrained coordinates: pacf_k = tanh(x_k).
Eigen::VectorXd ar_from_unconstrained(const Eigen::Ref<const Eigen::VectorXd>& x);
Eigen::VectorXd ar_to_unconstrained(const Eigen::Ref<const Eigen::VectorXd>& a);

/// Moves every root inside the stable region: companion eigenvalues with
/// modulus above `max_modulus` are shrunk onto that radius and the
/// polynomial is rebuilt.  Returns true in `projected` when anything moved.
Eigen::VectorXd project_stable_ar(const Eigen::Ref<const Eigen::VectorXd>& a, double max_modulus,
                                  bool* projected = nullptr);

/// Full linear convolution of two coefficient sequences.
Eigen::VectorXd poly_multiply(const Eigen::Ref<const Eigen::VectorXd>& a,
                              const Eigen::Ref<const Eigen::VectorXd>& b);

/// Largest modulus among the eigenvalues of a square matrix.
double spectral_radius(const Eigen::Ref<const Eigen::MatrixXd>& m);

}  // namespace fracfactor
