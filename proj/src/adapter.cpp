#include "kalign/adapter.hpp"

#include <cmath>
#include <cstring>

#include "kalign/detail/binary_io.hpp"
#include "kalign/error.hpp"
#include "kalign/parallel.hpp"

namespace kalign {
namespace {

void check_dim(const AdapterParams& params, Index d) {
  if (d != params.dim()) {
    throw ConfigError("adapter dimension mismatch: adapter d = " + std::to_string(params.dim()) +
                      ", input d = " + std::to_string(d));
  }
}

// out = x + W x + b, accumulated in index order.
void apply_row(const AdapterParams& params, const double* x, double* out) {
  const Index d = params.dim();
  for (Index r = 0; r < d; ++r) {
    const double* w = params.W.data() + r * d;
    double acc = 0.0;
    for (Index c = 0; c < d; ++c) acc += w[c] * x[c];
    out[r] = x[r] + acc + params.b[r];
  }
}

}  // namespace

AdapterParams AdapterParams::identity(Index dim, double gamma, double coef0) {
  AdapterParams p;
  p.W = Matrix::Zero(dim, dim);
  p.b = Vector::Zero(dim);
  p.log_gamma = std::log(gamma);
  p.coef0 = coef0;
  return p;
}

double AdapterParams::gamma() const { return std::exp(log_gamma); }

void AdapterParams::validate() const {
  if (W.rows() != b.size() || W.cols() != b.size() || b.size() < 1) {
    throw DataError("adapter shapes inconsistent: W is " + std::to_string(W.rows()) + "x" +
                    std::to_string(W.cols()) + ", b has " + std::to_string(b.size()));
  }
  if (!W.allFinite() || !b.allFinite() || !std::isfinite(log_gamma) || !std::isfinite(coef0)) {
    throw DataError("adapter parameters contain non-finite values");
  }
  if (coef0 < 0.0) throw DataError("adapter coef0 must be >= 0");
}

KernelSpec AdapterParams::source_kernel(const KernelSpec& base) const {
  // Only the polynomial family trains its kernel parameters; the others keep base.
  KernelSpec k = base;
  if (k.family != KernelFamily::kPolynomial) return k;
  k.gamma = gamma();
  k.coef0 = coef0;
  return k;
}

Vector forward(const AdapterParams& params, ConstSpan x) {
  check_dim(params, static_cast<Index>(x.size()));
  Vector out(params.dim());
  apply_row(params, x.data(), out.data());
  return out;
}

Matrix forward_batch(const AdapterParams& params, const Matrix& x) {
  check_dim(params, x.cols());
  Matrix out(x.rows(), x.cols());
  detail::parallel_for(x.rows(), [&](Index i) {
    apply_row(params, x.data() + i * x.cols(), out.data() + i * x.cols());
  });
  return out;
}

std::vector<double> drift(const AdapterParams& params, const Matrix& x) {
  const Matrix fx = forward_batch(params, x);
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) out[i] = (fx.row(i) - x.row(i)).norm();
  return out;
}

std::vector<std::uint8_t> encode_kadp(const AdapterParams& params) {
  params.validate();
  detail::ByteWriter w;
  w.put_bytes("KADP");
  w.put<std::uint32_t>(kKadpVersion);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(params.dim()));
  for (Index i = 0; i < params.W.size(); ++i) w.put<double>(params.W.data()[i]);
  for (Index i = 0; i < params.b.size(); ++i) w.put<double>(params.b[i]);
  w.put<double>(params.log_gamma);
  w.put<double>(params.coef0);
  const std::uint32_t crc = detail::crc32(w.view(0, w.size()));
  w.put<std::uint32_t>(crc);
  return w.release();
}

AdapterParams decode_kadp(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "KADP");
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), "KADP", 4) != 0) {
    throw FormatError(FormatError::Kind::kBadMagic, "bad magic: not a KADP file");
  }
  const auto version = r.get<std::uint32_t>();
  if (version == 0 || version > kKadpVersion) {
    throw FormatError(FormatError::Kind::kBadVersion,
                      "unsupported KADP version " + std::to_string(version));
  }
  const auto d = r.get<std::uint64_t>();
  if (d == 0 || d > (std::uint64_t{1} << 20)) throw DataError("KADP declares invalid d");
  const std::size_t body = (d * d + d + 2) * sizeof(double);
  r.require(body + 4);
  AdapterParams p;
  p.W.resize(static_cast<Index>(d), static_cast<Index>(d));
  p.b.resize(static_cast<Index>(d));
  for (Index i = 0; i < p.W.size(); ++i) p.W.data()[i] = r.get<double>();
  for (Index i = 0; i < p.b.size(); ++i) p.b[i] = r.get<double>();
  p.log_gamma = r.get<double>();
  p.coef0 = r.get<double>();
  const std::size_t covered = r.pos();
  const auto stored = r.get<std::uint32_t>();
  if (detail::crc32(bytes.first(covered)) != stored) {
    throw FormatError(FormatError::Kind::kCrcMismatch, "CRC mismatch: adapter file is corrupt");
  }
  p.validate();
  return p;
}

void save_adapter(const AdapterParams& params, const std::filesystem::path& path) {
  detail::write_file(path, encode_kadp(params));
}

AdapterParams load_adapter(const std::filesystem::path& path) {
  return decode_kadp(detail::read_file(path));
}

}  // namespace kalign
