#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kalign/adapter.hpp"
#include "kalign/embedding_store.hpp"
#include "kalign/kernels.hpp"

namespace kalign::verify {

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3): a relative error
/// with an absolute floor, so 1e-6 means "1e-6 relative or 1e-9 absolute".
double gradient_error(double analytic, double numeric);

struct BlockAudit {
  std::string block;
  double worst_error = 0.0;
  Index coordinates = 0;
  bool pass = true;
};

struct GradientAuditOptions {
  Index trials = 200;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-6;
  /// When set, every trial uses these kernels instead of random ones.
  std::optional<KernelSpec> k1;
  std::optional<KernelSpec> k2;
  bool include_feature = true;
  /// Added to dW(0, 0) of the analytic kernel-objective gradient. A non-zero
  /// value must make the audit fail; it exists to test the audit itself.
  double fault = 0.0;
};

struct GradientAuditResult {
  std::vector<BlockAudit> blocks;
  Index coordinates = 0;
  double worst_error = 0.0;
  bool pass = true;

  nlohmann::json to_json() const;
};

/// Central differences against every analytic gradient coordinate of the
/// regularized kernel objective (W, b, log_gamma, coef0) and of the feature
/// baseline (W, b, R), over random instances and kernel families.
GradientAuditResult gradient_audit(const GradientAuditOptions& options);

struct ConcentrationOptions {
  std::vector<Index> m_values{4, 16, 64, 256};
  Index repeats = 200;
  std::uint64_t seed = 0;
  Index loss_batches = 10000;
  Index loss_batch_size = 8;
  double slope_lo = -0.65;
  double slope_hi = -0.35;
};

struct ConcentrationRow {
  Index m = 0;
  double mean_deviation = 0.0;        // mean over repeats of |estimate - exact|
  double deviation_of_mean = 0.0;     // |mean of estimates - exact|
};

struct ConcentrationResult {
  bool degenerate = false;
  double exact_gradient_norm = 0.0;
  std::vector<ConcentrationRow> rows;
  double slope = 0.0;
  bool slope_pass = false;
  double exact_loss = 0.0;
  double batch_loss_mean = 0.0;
  double batch_loss_se = 0.0;
  bool loss_pass = false;

  bool pass() const { return degenerate || (slope_pass && loss_pass); }
  nlohmann::json to_json() const;
};

/// Mini-batch gradient concentration. The exact all-pairs alignment gradient
/// is compared with means of M i.i.d. single-pair gradients; the log-log
/// slope of the mean deviation against M should be near -1/2. Also checks
/// that the disjoint-pair batch loss is an unbiased estimate of the
/// all-pairs loss (within 3 standard errors).
ConcentrationResult concentration_experiment(const PairedEmbeddings& paired,
                                             const AdapterParams& params, const KernelSpec& k1_base,
                                             const KernelSpec& k2,
                                             const ConcentrationOptions& options);

/// Default experiment: n = 64, i.i.d. Gaussian 8-d source and target,
/// identity adapter, default kernels.
ConcentrationResult default_concentration(const ConcentrationOptions& options);

struct Prop2Options {
  Index trials = 100000;
  std::uint64_t seed = 0;
};

struct Prop2Result {
  Index trials = 0;
  Index violations = 0;
  Index zero_drift_trials = 0;
  Index stress_trials = 0;
  double worst_ratio = 0.0;  // max change / bound over trials with bound > 0

  bool pass() const { return violations == 0; }
  nlohmann::json to_json() const;
};

/// Monte Carlo over random (x, anchor, adapter) triples checking the cosine
/// drift bound. Every tenth trial has zero drift, every tenth (offset 5) has
/// |f(x)| = 1e-8 |x|. Trial t draws from seed + t, so thread count is irrelevant.
Prop2Result prop2_audit(const Prop2Options& options);

struct KernelAuditRow {
  KernelSpec spec;
  Index draws = 0;
  bool symmetry_ok = true;
  bool range_ok = true;  // vacuous for unbounded kernels
  double max_abs_value = 0.0;
  double lambda_min = 0.0;
  bool psd_ok = true;    // lambda_min >= -n * 1e-10

  bool pass() const { return symmetry_ok && range_ok && psd_ok; }
};

/// Symmetry and range over `draws` random (x, y) pairs, plus the smallest
/// eigenvalue of a 64 x 8 random kernel matrix, for each spec.
std::vector<KernelAuditRow> kernel_audit(const std::vector<KernelSpec>& specs, std::uint64_t seed,
                                         Index draws = 1000);

/// Random family and parameters (normalized polynomials keep coef0 >= 0).
KernelSpec random_kernel_spec(Rng& rng, Index dim);

nlohmann::json to_json(const std::vector<KernelAuditRow>& rows);

struct VerifyOptions {
  std::uint64_t seed = 0;
  Index gradient_trials = 200;
  Index prop2_trials = 100000;
  Index concentration_repeats = 200;
  double gradient_fault = 0.0;
};

struct VerifyReport {
  GradientAuditResult gradient;
  ConcentrationResult concentration;
  Prop2Result prop2;
  std::vector<KernelAuditRow> kernels;

  bool pass() const;
  nlohmann::json to_json() const;
};

/// All four audits with their release gates.
VerifyReport run_all(const VerifyOptions& options);

}  // namespace kalign::verify
