#pragma once

#include <span>
#include <string>

#include "json.hpp"
#include "kalign/types.hpp"

namespace kalign {

enum class KernelFamily { kPolynomial, kGaussian, kCosine };

std::string to_string(KernelFamily family);
KernelFamily kernel_family_from_string(const std::string& name);

/// Kernel family plus parameters.
///
///   polynomial: (gamma * <x, y> + coef0)^degree, optionally normalized as
///               k(x, y) / sqrt(k(x, x) k(y, y))
///   gaussian:   exp(-gamma * |x - y|^2)          (normalized by construction)
///   cosine:     <x, y> / (|x| |y|)               (normalized by construction)
///
/// Every valid kernel equals an inner product <phi(x), phi(y)> in some
/// feature space; phi is never formed here, all evaluation goes through k.
struct KernelSpec {
  KernelFamily family = KernelFamily::kPolynomial;
  double gamma = 1.0;
  double coef0 = 1.0;
  int degree = 3;
  bool normalized = true;

  static KernelSpec polynomial(double gamma, double coef0, int degree, bool normalized);
  static KernelSpec gaussian(double gamma);
  static KernelSpec cosine();

  /// Throws ConfigError. gamma > 0, degree >= 1, coef0 >= 0.
  void validate() const;

  /// True when every value lies in [-1, 1].
  bool bounded() const { return family != KernelFamily::kPolynomial || normalized; }

  bool operator==(const KernelSpec&) const = default;
};

void to_json(nlohmann::json& j, const KernelSpec& spec);
void from_json(const nlohmann::json& j, KernelSpec& spec);

using ConstSpan = std::span<const double>;

inline ConstSpan row_span(const Matrix& m, Index i) {
  return {m.data() + i * m.cols(), static_cast<std::size_t>(m.cols())};
}
inline ConstSpan vec_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

/// k(x, y). Throws ConfigError on dimension mismatch and DataError on
/// zero-norm input to cosine or k(x, x) <= 0 under a normalized polynomial.
double eval(const KernelSpec& spec, ConstSpan x, ConstSpan y);

/// Value and first derivatives of k(x, y) in one pass. The parameter
/// derivatives are only populated for the polynomial family (zero otherwise).
struct KernelDerivatives {
  double value = 0.0;
  Vector dx;
  Vector dy;
  double dgamma = 0.0;
  double dcoef0 = 0.0;
};

KernelDerivatives eval_with_derivatives(const KernelSpec& spec, ConstSpan x, ConstSpan y);

/// Exact dk(x, y)/dx.
Vector grad_wrt_x(const KernelSpec& spec, ConstSpan x, ConstSpan y);

struct KernelParamGrad {
  double dgamma = 0.0;
  double dcoef0 = 0.0;
};

/// dk/dgamma and dk/dcoef0 of the polynomial kernel; ConfigError otherwise.
KernelParamGrad grad_wrt_params(const KernelSpec& spec, ConstSpan x, ConstSpan y);

/// K(i, j) = k(X_i, X_j). Rows are evaluated in parallel; each entry is
/// computed independently so the result does not depend on the schedule.
Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x);
Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x, const Matrix& y);

/// Smallest eigenvalue of kernel_matrix(spec, x); n <= 512.
double psd_probe(const KernelSpec& spec, const Matrix& x);

namespace reference {

/// Serial entry-by-entry kernel matrices, kept as the oracle for the
/// parallel versions.
Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x);
Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x, const Matrix& y);

}  // namespace reference

}  // namespace kalign
