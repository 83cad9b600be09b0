#include "kalign/kernels.hpp"

#include <cmath>

#include "kalign/error.hpp"
#include "kalign/parallel.hpp"

namespace kalign {
namespace {

void check_dims(ConstSpan x, ConstSpan y) {
  if (x.size() != y.size()) {
    throw ConfigError("kernel dimension mismatch: " + std::to_string(x.size()) + " vs " +
                      std::to_string(y.size()));
  }
}

double dot(ConstSpan x, ConstSpan y) {
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) acc += x[k] * y[k];
  return acc;
}

double squared_distance(ConstSpan x, ConstSpan y) {
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double diff = x[k] - y[k];
    acc += diff * diff;
  }
  return acc;
}

double ipow(double base, int exponent) {
  double out = 1.0;
  for (int e = 0; e < exponent; ++e) out *= base;
  return out;
}

Vector to_vector(ConstSpan s) {
  return Eigen::Map<const Vector>(s.data(), static_cast<Index>(s.size()));
}

// Polynomial pieces at inner product s: value, d/ds, d/dgamma, d/dcoef0.
struct PolyTerms {
  double value;
  double ds;
  double dgamma;
  double dcoef0;
};

PolyTerms poly_terms(const KernelSpec& spec, double s) {
  const double base = spec.gamma * s + spec.coef0;
  const double lower = ipow(base, spec.degree - 1);
  const double d = static_cast<double>(spec.degree);
  return {lower * base, d * spec.gamma * lower, d * lower * s, d * lower};
}

double self_poly(const KernelSpec& spec, double s, const char* which) {
  const double v = ipow(spec.gamma * s + spec.coef0, spec.degree);
  if (!(v > 0.0)) {
    throw DataError(std::string("normalized polynomial kernel undefined: k(") + which + ", " +
                    which + ") <= 0 (zero input with coef0 = 0?)");
  }
  return v;
}

double norm_checked(ConstSpan v, const char* which) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0)) throw DataError(std::string("cosine kernel: zero-norm input ") + which);
  return n;
}

}  // namespace

std::string to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::kPolynomial: return "polynomial";
    case KernelFamily::kGaussian: return "gaussian";
    case KernelFamily::kCosine: return "cosine";
  }
  return "unknown";
}

KernelFamily kernel_family_from_string(const std::string& name) {
  if (name == "polynomial") return KernelFamily::kPolynomial;
  if (name == "gaussian") return KernelFamily::kGaussian;
  if (name == "cosine") return KernelFamily::kCosine;
  throw ConfigError("unknown kernel family \"" + name + "\"");
}

KernelSpec KernelSpec::polynomial(double gamma, double coef0, int degree, bool normalized) {
  return {KernelFamily::kPolynomial, gamma, coef0, degree, normalized};
}

KernelSpec KernelSpec::gaussian(double gamma) {
  return {KernelFamily::kGaussian, gamma, 0.0, 1, true};
}

KernelSpec KernelSpec::cosine() { return {KernelFamily::kCosine, 1.0, 0.0, 1, true}; }

void KernelSpec::validate() const {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw ConfigError("kernel gamma must be a finite positive number");
  }
  if (family == KernelFamily::kPolynomial) {
    if (degree < 1) throw ConfigError("polynomial degree must be >= 1");
    if (!(coef0 >= 0.0) || !std::isfinite(coef0)) {
      throw ConfigError("polynomial coef0 must be finite and >= 0");
    }
  }
}

void to_json(nlohmann::json& j, const KernelSpec& spec) {
  j = nlohmann::json{{"family", to_string(spec.family)},
                     {"gamma", spec.gamma},
                     {"coef0", spec.coef0},
                     {"degree", spec.degree},
                     {"normalized", spec.normalized}};
}

void from_json(const nlohmann::json& j, KernelSpec& spec) {
  spec = KernelSpec{};
  spec.family = kernel_family_from_string(j.at("family").get<std::string>());
  if (j.contains("gamma")) spec.gamma = j.at("gamma").get<double>();
  if (j.contains("coef0")) spec.coef0 = j.at("coef0").get<double>();
  if (j.contains("degree")) spec.degree = j.at("degree").get<int>();
  if (j.contains("normalized")) spec.normalized = j.at("normalized").get<bool>();
  if (spec.family != KernelFamily::kPolynomial) spec.normalized = true;
  spec.validate();
}

double eval(const KernelSpec& spec, ConstSpan x, ConstSpan y) {
  check_dims(x, y);
  switch (spec.family) {
    case KernelFamily::kPolynomial: {
      const double pxy = ipow(spec.gamma * dot(x, y) + spec.coef0, spec.degree);
      if (!spec.normalized) return pxy;
      const double pxx = self_poly(spec, dot(x, x), "x");
      const double pyy = self_poly(spec, dot(y, y), "y");
      return pxy / std::sqrt(pxx * pyy);
    }
    case KernelFamily::kGaussian:
      return std::exp(-spec.gamma * squared_distance(x, y));
    case KernelFamily::kCosine: {
      const double nx = norm_checked(x, "x");
      const double ny = norm_checked(y, "y");
      return dot(x, y) / (nx * ny);
    }
  }
  return 0.0;
}

KernelDerivatives eval_with_derivatives(const KernelSpec& spec, ConstSpan x, ConstSpan y) {
  check_dims(x, y);
  KernelDerivatives out;
  const Vector xv = to_vector(x);
  const Vector yv = to_vector(y);
  switch (spec.family) {
    case KernelFamily::kPolynomial: {
      const PolyTerms xy = poly_terms(spec, dot(x, y));
      if (!spec.normalized) {
        out.value = xy.value;
        out.dx = xy.ds * yv;
        out.dy = xy.ds * xv;
        out.dgamma = xy.dgamma;
        out.dcoef0 = xy.dcoef0;
        break;
      }
      const double sxx = dot(x, x);
      const double syy = dot(y, y);
      const double a = self_poly(spec, sxx, "x");
      const double b = self_poly(spec, syy, "y");
      const PolyTerms xx = poly_terms(spec, sxx);
      const PolyTerms yy = poly_terms(spec, syy);
      const double scale = 1.0 / std::sqrt(a * b);
      const double k = xy.value * scale;
      // Quotient rule on p(x,y) * p(x,x)^(-1/2) * p(y,y)^(-1/2); d p(x,x)/dx = 2 p'(s) x.
      out.value = k;
      out.dx = (xy.ds * scale) * yv - (k * xx.ds / a) * xv;
      out.dy = (xy.ds * scale) * xv - (k * yy.ds / b) * yv;
      out.dgamma = xy.dgamma * scale - 0.5 * k * (xx.dgamma / a + yy.dgamma / b);
      out.dcoef0 = xy.dcoef0 * scale - 0.5 * k * (xx.dcoef0 / a + yy.dcoef0 / b);
      break;
    }
    case KernelFamily::kGaussian: {
      const double k = std::exp(-spec.gamma * squared_distance(x, y));
      out.value = k;
      out.dx = (-2.0 * spec.gamma * k) * (xv - yv);
      out.dy = -out.dx;
      break;
    }
    case KernelFamily::kCosine: {
      const double nx = norm_checked(x, "x");
      const double ny = norm_checked(y, "y");
      const double k = dot(x, y) / (nx * ny);
      out.value = k;
      out.dx = yv / (nx * ny) - (k / (nx * nx)) * xv;
      out.dy = xv / (nx * ny) - (k / (ny * ny)) * yv;
      break;
    }
  }
  return out;
}

Vector grad_wrt_x(const KernelSpec& spec, ConstSpan x, ConstSpan y) {
  return eval_with_derivatives(spec, x, y).dx;
}

KernelParamGrad grad_wrt_params(const KernelSpec& spec, ConstSpan x, ConstSpan y) {
  if (spec.family != KernelFamily::kPolynomial) {
    throw ConfigError("grad_wrt_params: unsupported kernel family " + to_string(spec.family));
  }
  const auto d = eval_with_derivatives(spec, x, y);
  return {d.dgamma, d.dcoef0};
}

Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x) {
  const Index n = x.rows();
  Matrix k(n, n);
  detail::parallel_for(n, [&](Index i) {
    for (Index j = i; j < n; ++j) {
      const double v = eval(spec, row_span(x, i), row_span(x, j));
      k(i, j) = v;
      k(j, i) = v;
    }
  });
  return k;
}

Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) {
    throw ConfigError("kernel_matrix: column mismatch " + std::to_string(x.cols()) + " vs " +
                      std::to_string(y.cols()));
  }
  Matrix k(x.rows(), y.rows());
  detail::parallel_for(x.rows(), [&](Index i) {
    for (Index j = 0; j < y.rows(); ++j) k(i, j) = eval(spec, row_span(x, i), row_span(y, j));
  });
  return k;
}

double psd_probe(const KernelSpec& spec, const Matrix& x) {
  if (x.rows() > 512) throw ConfigError("psd_probe: n must be <= 512");
  const Matrix k = kernel_matrix(spec, x);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(k, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericalError("psd_probe: eigensolver did not converge");
  return solver.eigenvalues().minCoeff();
}

namespace reference {

Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x) { return reference::kernel_matrix(spec, x, x); }

Matrix kernel_matrix(const KernelSpec& spec, const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) throw ConfigError("kernel_matrix: column mismatch");
  Matrix k(x.rows(), y.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < y.rows(); ++j) k(i, j) = eval(spec, row_span(x, i), row_span(y, j));
  }
  return k;
}

}  // namespace reference
}  // namespace kalign
