#include "kalign/objective.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "kalign/error.hpp"
#include "kalign/parallel.hpp"
#include "kalign/reduce.hpp"

namespace kalign {
namespace {

void check_batch(const PairedEmbeddings& paired, const PairBatch& batch) {
  const Index n = paired.rows();
  if (batch.pairs.empty()) throw ConfigError("empty pair batch");
  for (std::size_t p = 0; p < batch.pairs.size(); ++p) {
    const auto [i, j] = batch.pairs[p];
    if (i < 0 || j < 0 || i >= n || j >= n || i == j) {
      throw ConfigError("invalid pair " + std::to_string(p) + ": (" + std::to_string(i) + ", " +
                        std::to_string(j) + ")");
    }
  }
}

void check_rows(const EmbeddingSet& set, std::span<const Index> rows) {
  if (rows.empty()) throw ConfigError("empty row set");
  for (Index r : rows) {
    if (r < 0 || r >= set.rows()) throw ConfigError("row index " + std::to_string(r) + " out of range");
  }
}

// Rethrows a kernel failure with the pair that caused it, keeping its category.
[[noreturn]] void rethrow_for_pair(std::size_t p, const std::pair<Index, Index>& ij) {
  const std::string where = "pair " + std::to_string(p) + " (" + std::to_string(ij.first) + ", " +
                            std::to_string(ij.second) + "): ";
  try {
    throw;
  } catch (const DataError& e) {
    throw DataError(where + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(where + e.what());
  } catch (const std::exception& e) {
    throw NumericalError(where + e.what());
  }
}

bool polynomial(const KernelSpec& k) { return k.family == KernelFamily::kPolynomial; }

// Per-slot gradients with respect to the adapter outputs u_s = f(x_rows[s]).
struct SlotGradients {
  Matrix du;
  std::vector<Index> rows;
};

struct AlignmentTerms {
  SlotGradients slots;
  std::vector<double> squared_gaps;
  std::vector<double> dlog_gamma_terms;
  std::vector<double> dcoef0_terms;
};

AlignmentTerms alignment_terms(const AdapterParams& params, const PairedEmbeddings& paired,
                               const PairBatch& batch, const KernelSpec& k1_base,
                               const KernelSpec& k2, bool with_grad) {
  check_batch(paired, batch);
  const KernelSpec k1 = params.source_kernel(k1_base);
  const Index d = params.dim();
  const auto& x = paired.source.data;
  const auto& g = paired.target.data;
  const Index bsz = batch.batch_size();
  const double inv_b = 1.0 / static_cast<double>(bsz);

  AlignmentTerms t;
  t.squared_gaps.assign(static_cast<std::size_t>(bsz), 0.0);
  if (with_grad) {
    t.slots.du.resize(2 * bsz, d);
    t.slots.rows = batch.rows();
    t.dlog_gamma_terms.assign(static_cast<std::size_t>(bsz), 0.0);
    t.dcoef0_terms.assign(static_cast<std::size_t>(bsz), 0.0);
  }
  const double gamma = k1.gamma;
  const bool trainable = polynomial(k1);

  detail::parallel_for(bsz, [&](Index p) {
    const auto& ij = batch.pairs[static_cast<std::size_t>(p)];
    try {
      const Vector ui = forward(params, row_span(x, ij.first));
      const Vector uj = forward(params, row_span(x, ij.second));
      const double target = eval(k2, row_span(g, ij.first), row_span(g, ij.second));
      if (!with_grad) {
        const double gap = eval(k1, vec_span(ui), vec_span(uj)) - target;
        t.squared_gaps[p] = gap * gap;
        return;
      }
      const KernelDerivatives kd = eval_with_derivatives(k1, vec_span(ui), vec_span(uj));
      const double gap = kd.value - target;
      t.squared_gaps[p] = gap * gap;
      const double coef = 2.0 * gap * inv_b;
      t.slots.du.row(2 * p) = coef * kd.dx.transpose();
      t.slots.du.row(2 * p + 1) = coef * kd.dy.transpose();
      if (trainable) {
        t.dlog_gamma_terms[p] = coef * kd.dgamma * gamma;  // chain rule through gamma = exp(log_gamma)
        t.dcoef0_terms[p] = coef * kd.dcoef0;
      }
    } catch (...) {
      rethrow_for_pair(static_cast<std::size_t>(p), ij);
    }
  });
  return t;
}

// Returns sum_s coef(s, :)^T data(rows[s], :) as a (coef.cols x data.cols)
// matrix. Each output row is owned by one iteration and summed over slots in
// slot order.
Matrix outer_accumulate(const Matrix& coef, const std::vector<Index>& rows, const Matrix& data) {
  Matrix out = Matrix::Zero(coef.cols(), data.cols());
  detail::parallel_for(coef.cols(), [&](Index a) {
    for (std::size_t s = 0; s < rows.size(); ++s) {
      const double c = coef(static_cast<Index>(s), a);
      if (c == 0.0) continue;
      out.row(a) += c * data.row(rows[s]);
    }
  });
  return out;
}

Vector column_sums(const Matrix& coef) {
  Vector out = Vector::Zero(coef.cols());
  for (Index s = 0; s < coef.rows(); ++s) out += coef.row(s).transpose();
  return out;
}

void require_finite(const GradientBundle& g) {
  if (!g.dW.allFinite()) throw NumericalError("non-finite gradient in block W");
  if (!g.db.allFinite()) throw NumericalError("non-finite gradient in block b");
  if (!std::isfinite(g.dlog_gamma)) throw NumericalError("non-finite gradient in block log_gamma");
  if (!std::isfinite(g.dcoef0)) throw NumericalError("non-finite gradient in block coef0");
}

double mean_of(const std::vector<double>& v) {
  return pairwise_sum(v) / static_cast<double>(v.size());
}

}  // namespace

GradientBundle GradientBundle::zeros(Index dim) {
  return {Matrix::Zero(dim, dim), Vector::Zero(dim), 0.0, 0.0};
}

Vector GradientBundle::flatten() const {
  Vector out(dW.size() + db.size() + 2);
  out.head(dW.size()) = Eigen::Map<const Vector>(dW.data(), dW.size());
  out.segment(dW.size(), db.size()) = db;
  out[out.size() - 2] = dlog_gamma;
  out[out.size() - 1] = dcoef0;
  return out;
}

double alignment_loss(const AdapterParams& params, const PairedEmbeddings& paired,
                      const PairBatch& batch, const KernelSpec& k1_base, const KernelSpec& k2) {
  return mean_of(alignment_terms(params, paired, batch, k1_base, k2, false).squared_gaps);
}

LossAndGrad alignment_loss_and_grad(const AdapterParams& params, const PairedEmbeddings& paired,
                                    const PairBatch& batch, const KernelSpec& k1_base,
                                    const KernelSpec& k2) {
  AlignmentTerms t = alignment_terms(params, paired, batch, k1_base, k2, true);
  LossAndGrad out;
  out.loss.alignment = mean_of(t.squared_gaps);
  out.loss.w = 1.0;
  out.loss.total = out.loss.alignment;
  out.grad.dW = outer_accumulate(t.slots.du, t.slots.rows, paired.source.data);
  out.grad.db = column_sums(t.slots.du);
  out.grad.dlog_gamma = pairwise_sum(t.dlog_gamma_terms);
  out.grad.dcoef0 = pairwise_sum(t.dcoef0_terms);
  require_finite(out.grad);
  return out;
}

double regularization_loss(const AdapterParams& params, const EmbeddingSet& source,
                           std::span<const Index> rows) {
  check_rows(source, rows);
  std::vector<double> terms(rows.size());
  detail::parallel_for(static_cast<Index>(rows.size()), [&](Index s) {
    const Vector u = forward(params, source.row(rows[s]));
    terms[s] = (u - Eigen::Map<const Vector>(source.row(rows[s]).data(), source.dim())).squaredNorm();
  });
  return mean_of(terms);
}

LossAndGrad total_loss_and_grad(const AdapterParams& params, const PairedEmbeddings& paired,
                                const PairBatch& batch, double w, const KernelSpec& k1_base,
                                const KernelSpec& k2) {
  if (!(w > 0.0)) throw ConfigError("objective coefficient w must be > 0");
  AlignmentTerms t = alignment_terms(params, paired, batch, k1_base, k2, true);
  const auto& x = paired.source.data;
  const Index slots = static_cast<Index>(t.slots.rows.size());
  const double inv_s = 1.0 / static_cast<double>(slots);

  // Regularizer over the batch endpoints; merged into the slot gradients.
  std::vector<double> reg_terms(static_cast<std::size_t>(slots));
  Matrix du = w * t.slots.du;
  detail::parallel_for(slots, [&](Index s) {
    const Index r = t.slots.rows[s];
    const Vector u = forward(params, row_span(x, r));
    const Vector delta = u - x.row(r).transpose();
    reg_terms[s] = delta.squaredNorm();
    du.row(s) += (2.0 * inv_s) * delta.transpose();
  });

  LossAndGrad out;
  out.loss.w = w;
  out.loss.alignment = mean_of(t.squared_gaps);
  out.loss.regularization = mean_of(reg_terms);
  out.loss.total = w * out.loss.alignment + out.loss.regularization;
  out.grad.dW = outer_accumulate(du, t.slots.rows, x);
  out.grad.db = column_sums(du);
  out.grad.dlog_gamma = w * pairwise_sum(t.dlog_gamma_terms);
  out.grad.dcoef0 = w * pairwise_sum(t.dcoef0_terms);
  require_finite(out.grad);
  return out;
}

FeatureLossAndGrad feature_alignment_loss_and_grad(const AdapterParams& params, const Matrix& R,
                                                   const PairedEmbeddings& paired,
                                                   std::span<const Index> rows, double w) {
  if (!(w > 0.0)) throw ConfigError("objective coefficient w must be > 0");
  const auto& x = paired.source.data;
  const auto& g = paired.target.data;
  if (R.rows() != x.cols() || R.cols() != g.cols()) {
    throw ConfigError("feature map R must be " + std::to_string(x.cols()) + "x" +
                      std::to_string(g.cols()) + ", got " + std::to_string(R.rows()) + "x" +
                      std::to_string(R.cols()));
  }
  check_rows(paired.source, rows);
  const Index slots = static_cast<Index>(rows.size());
  const double inv_s = 1.0 / static_cast<double>(slots);

  std::vector<double> feat_terms(rows.size());
  std::vector<double> reg_terms(rows.size());
  Matrix du(slots, x.cols());
  Matrix dr_coef(slots, x.cols());
  detail::parallel_for(slots, [&](Index s) {
    const Index r = rows[s];
    const Vector u = forward(params, row_span(x, r));
    const Vector e = u - R * g.row(r).transpose();
    const Vector delta = u - x.row(r).transpose();
    feat_terms[s] = e.squaredNorm();
    reg_terms[s] = delta.squaredNorm();
    du.row(s) = (2.0 * inv_s) * (w * e + delta).transpose();
    dr_coef.row(s) = (-2.0 * w * inv_s) * e.transpose();
  });

  const std::vector<Index> row_vec(rows.begin(), rows.end());
  FeatureLossAndGrad out;
  out.loss.w = w;
  out.loss.alignment = mean_of(feat_terms);
  out.loss.regularization = mean_of(reg_terms);
  out.loss.total = w * out.loss.alignment + out.loss.regularization;
  out.dW = outer_accumulate(du, row_vec, x);
  out.db = column_sums(du);
  out.dR = outer_accumulate(dr_coef, row_vec, g);
  if (!out.dW.allFinite() || !out.db.allFinite()) throw NumericalError("non-finite gradient in block W/b");
  if (!out.dR.allFinite()) throw NumericalError("non-finite gradient in block R");
  return out;
}

Matrix projection_fit(const PairedEmbeddings& paired, double ridge) {
  if (!(ridge >= 0.0)) throw ConfigError("ridge must be >= 0");
  const Matrix& g = paired.target.data;
  const Matrix& x = paired.source.data;
  if (g.rows() < g.cols() && ridge == 0.0) {
    throw ConfigError("projection_fit needs n >= d' or ridge > 0");
  }
  Eigen::MatrixXd normal = g.transpose() * g;
  normal.diagonal().array() += ridge;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(normal, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 1e-12 * std::max(hi, 1.0))) {
    throw NumericalError("projection_fit: singular normal matrix (increase ridge)");
  }
  const Eigen::MatrixXd rhs = g.transpose() * x;  // d' x d
  const Eigen::MatrixXd pt = normal.llt().solve(rhs);
  return pt.transpose();
}

Matrix apply_projection(const Matrix& P, const Matrix& target) {
  if (P.cols() != target.cols()) throw ConfigError("apply_projection: dimension mismatch");
  return target * P.transpose();
}

void to_json(nlohmann::json& j, const LossBreakdown& loss) {
  j = nlohmann::json{{"alignment", loss.alignment},
                     {"regularization", loss.regularization},
                     {"total", loss.total},
                     {"w", loss.w}};
}

namespace reference {

LossAndGrad total_loss_and_grad(const AdapterParams& params, const PairedEmbeddings& paired,
                                const PairBatch& batch, double w, const KernelSpec& k1_base,
                                const KernelSpec& k2) {
  check_batch(paired, batch);
  const KernelSpec k1 = params.source_kernel(k1_base);
  const auto& x = paired.source.data;
  const auto& g = paired.target.data;
  const double nb = static_cast<double>(batch.batch_size());
  const double ns = 2.0 * nb;

  LossAndGrad out;
  out.grad = GradientBundle::zeros(params.dim());
  out.loss.w = w;
  for (const auto& [i, j] : batch.pairs) {
    const Vector ui = forward(params, row_span(x, i));
    const Vector uj = forward(params, row_span(x, j));
    const KernelDerivatives kd = eval_with_derivatives(k1, vec_span(ui), vec_span(uj));
    const double gap = kd.value - eval(k2, row_span(g, i), row_span(g, j));
    out.loss.alignment += gap * gap / nb;
    const double coef = w * 2.0 * gap / nb;
    out.grad.dW += coef * kd.dx * x.row(i);
    out.grad.dW += coef * kd.dy * x.row(j);
    out.grad.db += coef * (kd.dx + kd.dy);
    if (polynomial(k1)) {
      out.grad.dlog_gamma += coef * kd.dgamma * k1.gamma;
      out.grad.dcoef0 += coef * kd.dcoef0;
    }
    for (Index r : {i, j}) {
      const Vector delta = forward(params, row_span(x, r)) - x.row(r).transpose();
      out.loss.regularization += delta.squaredNorm() / ns;
      out.grad.dW += (2.0 / ns) * delta * x.row(r);
      out.grad.db += (2.0 / ns) * delta;
    }
  }
  out.loss.total = w * out.loss.alignment + out.loss.regularization;
  return out;
}

}  // namespace reference
}  // namespace kalign
