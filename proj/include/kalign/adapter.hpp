#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kalign/kernels.hpp"
#include "kalign/types.hpp"

namespace kalign {

/// Residual affine map f(x) = x + W x + b over frozen source embeddings,
/// plus the trainable source-kernel parameters. W = 0, b = 0 is the frozen
/// starting point: forward is then exactly the identity.
struct AdapterParams {
  Matrix W;
  Vector b;
  double log_gamma = 0.0;
  double coef0 = 1.0;

  static AdapterParams identity(Index dim, double gamma, double coef0);

  Index dim() const { return b.size(); }
  double gamma() const;

  /// Throws DataError: shapes consistent, entries finite, coef0 >= 0.
  void validate() const;

  /// `base` with gamma and coef0 taken from these parameters (polynomial
  /// family only; other families are returned unchanged).
  KernelSpec source_kernel(const KernelSpec& base) const;
};

Vector forward(const AdapterParams& params, ConstSpan x);
Matrix forward_batch(const AdapterParams& params, const Matrix& x);

/// |f(x_i) - x_i| per row.
std::vector<double> drift(const AdapterParams& params, const Matrix& x);

// KADP v1, little-endian:
//   "KADP" | u32 version | u64 d | W (d*d f64, row major) | b (d f64)
//   | f64 log_gamma | f64 coef0 | u32 crc32(everything before the trailer)
inline constexpr std::uint32_t kKadpVersion = 1;

std::vector<std::uint8_t> encode_kadp(const AdapterParams& params);
AdapterParams decode_kadp(std::span<const std::uint8_t> bytes);
void save_adapter(const AdapterParams& params, const std::filesystem::path& path);
AdapterParams load_adapter(const std::filesystem::path& path);

}  // namespace kalign
