#pragma once

#include <span>

#include "json.hpp"
#include "kalign/adapter.hpp"
#include "kalign/embedding_store.hpp"
#include "kalign/kernels.hpp"

namespace kalign {

/// total = w * alignment + regularization.
struct LossBreakdown {
  double alignment = 0.0;
  double regularization = 0.0;
  double total = 0.0;
  double w = 1.0;
};

/// Gradient with the same block structure as AdapterParams.
struct GradientBundle {
  Matrix dW;
  Vector db;
  double dlog_gamma = 0.0;
  double dcoef0 = 0.0;

  static GradientBundle zeros(Index dim);

  /// W (row major), b, log_gamma, coef0 stacked into one vector.
  Vector flatten() const;
};

struct LossAndGrad {
  LossBreakdown loss;
  GradientBundle grad;
};

// The source kernel is `k1_base` with gamma = exp(params.log_gamma) and
// coef0 = params.coef0; family, degree and normalization come from k1_base.
// Only the polynomial family has trainable kernel parameters; for the other
// families dlog_gamma and dcoef0 are zero. Target kernel values are
// evaluated per batch, never cached as an n x n matrix.

/// Mean over the batch of (k1(f(x_i), f(x_j)) - k2(g_i, g_j))^2.
double alignment_loss(const AdapterParams& params, const PairedEmbeddings& paired,
                      const PairBatch& batch, const KernelSpec& k1_base, const KernelSpec& k2);

/// Alignment loss and its exact gradient (no regularizer).
LossAndGrad alignment_loss_and_grad(const AdapterParams& params, const PairedEmbeddings& paired,
                                    const PairBatch& batch, const KernelSpec& k1_base,
                                    const KernelSpec& k2);

/// Mean over `rows` of |f(x_i) - x_i|^2.
double regularization_loss(const AdapterParams& params, const EmbeddingSet& source,
                           std::span<const Index> rows);

/// The regularized objective on one batch: w * alignment over the batch
/// pairs plus the regularizer over the batch endpoints, with the exact
/// gradient in every parameter block. Reductions use a fixed order, so the
/// result is bit-identical for any thread count.
LossAndGrad total_loss_and_grad(const AdapterParams& params, const PairedEmbeddings& paired,
                                const PairBatch& batch, double w, const KernelSpec& k1_base,
                                const KernelSpec& k2);

/// Feature-matching baseline: mean over rows of
///   w |f(x_i) - R g_i|^2 + |f(x_i) - x_i|^2,  R is d x d'.
/// `alignment` reports the feature term, so total = w * alignment + reg here too.
struct FeatureLossAndGrad {
  LossBreakdown loss;
  Matrix dW;
  Vector db;
  Matrix dR;
};

FeatureLossAndGrad feature_alignment_loss_and_grad(const AdapterParams& params, const Matrix& R,
                                                   const PairedEmbeddings& paired,
                                                   std::span<const Index> rows, double w);

/// Closed-form ridge regression of source rows on target rows:
///   P = argmin sum_i |P g_i - x_i|^2 + ridge |P|_F^2,  P is d x d'.
Matrix projection_fit(const PairedEmbeddings& paired, double ridge);

/// Rows P g_i, i.e. the target set mapped into the source space.
Matrix apply_projection(const Matrix& P, const Matrix& target);

void to_json(nlohmann::json& j, const LossBreakdown& loss);

namespace reference {

/// Straight serial loops over pairs and rows, accumulating in place. Same
/// mathematics as the parallel path; kept as its oracle.
LossAndGrad total_loss_and_grad(const AdapterParams& params, const PairedEmbeddings& paired,
                                const PairBatch& batch, double w, const KernelSpec& k1_base,
                                const KernelSpec& k2);

}  // namespace reference
}  // namespace kalign
