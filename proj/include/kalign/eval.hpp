#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "kalign/adapter.hpp"
#include "kalign/embedding_store.hpp"
#include "kalign/kernels.hpp"
#include "kalign/rng.hpp"

namespace kalign {

/// One embedding per class (e.g. encoded class prompts).
struct ClassAnchors {
  Matrix anchors;
  std::vector<std::string> names;

  Index classes() const { return anchors.rows(); }
  /// C >= 2, rows finite and nonzero, one name per row.
  void validate() const;

  /// Names come from the set's ids, or "class<i>" when it has none.
  static ClassAnchors from_set(const EmbeddingSet& set);
};

/// Flat metric map plus optional per-class rows; serializes to JSON or CSV.
struct EvalReport {
  std::map<std::string, double> metrics;
  std::vector<std::map<std::string, double>> per_class;
  std::vector<std::string> class_names;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct ZeroShotResult {
  std::vector<Index> predictions;
  double accuracy = 0.0;               // NaN when no labels were given
  std::vector<double> per_class_accuracy;
  std::vector<Index> per_class_count;
};

/// argmax_c cos(x_i, anchor_c); ties go to the lowest class index.
ZeroShotResult zero_shot_classify(const Matrix& embeddings, const ClassAnchors& anchors,
                                  const std::vector<std::int64_t>* labels = nullptr);

/// Zero-based rank of gallery[i] among all gallery rows for query i, by
/// descending cosine; equal scores rank the lower index first.
std::vector<Index> retrieval_ranks(const Matrix& queries, const Matrix& gallery);

/// R@K for each K (K is capped at n). Gallery row i is the match of query i.
std::map<Index, double> retrieval(const Matrix& queries, const Matrix& gallery,
                                  const std::vector<Index>& ks = {1, 5, 10});

struct ProbeOptions {
  double l2 = 1e-4;
  double grad_tol = 1e-6;
  Index max_steps = 10000;
  bool multilabel = false;  // labels are bitmasks over classes
};

struct ProbeResult {
  double test_accuracy = 0.0;      // multiclass: accuracy; multilabel: mean per-label accuracy
  double macro_recall = 0.0;       // multilabel only
  Index classes = 0;
  Index steps = 0;
  double final_grad_norm = 0.0;
  bool converged = false;
  Matrix weights;                  // classes x (d + 1), last column is the bias
};

/// Logistic-regression probe on frozen embeddings, fitted by deterministic
/// full-batch gradient descent (softmax cross entropy, or per-class binary
/// cross entropy in multilabel mode) until |grad| <= grad_tol or max_steps.
/// Non-convergence is reported in the result, never hidden.
ProbeResult linear_probe(const EmbeddingSet& train, const EmbeddingSet& test,
                         const ProbeOptions& options = {});

/// Mean squared kernel gap between mapped source rows and target rows.
struct Discrepancy {
  double value = 0.0;
  double standard_error = 0.0;  // 0 in exact mode
  bool exact = true;
  Index pairs = 0;
};

/// All-pairs mean over i < j of (k1(a_i, a_j) - k2(g_i, g_j))^2.
Discrepancy kernel_discrepancy_exact(const Matrix& mapped_source, const Matrix& target,
                                     const KernelSpec& k1, const KernelSpec& k2);

/// Unbiased estimate from `pairs` independent uniform pairs, with its SE.
Discrepancy kernel_discrepancy_sampled(const Matrix& mapped_source, const Matrix& target,
                                       const KernelSpec& k1, const KernelSpec& k2, Index pairs,
                                       Rng& rng);

/// Exact for n <= 4096, sampled (2^20 pairs, fixed seed) beyond.
Discrepancy kernel_discrepancy(const PairedEmbeddings& paired, const AdapterParams& params,
                               const KernelSpec& k1_base, const KernelSpec& k2);

/// Cosine change against one anchor and the drift bound
///   |cos(x, a) - cos(f(x), a)| <= 2 |f(x) - x| / max(|f(x)|, |x|).
struct CosineChange {
  double change = 0.0;
  double bound = 0.0;
  double lambda = 0.0;
  bool holds = true;
};

CosineChange cosine_change(ConstSpan x, ConstSpan fx, ConstSpan anchor);

struct DriftRow {
  double lambda = 0.0;
  double max_change = 0.0;
  double bound = 0.0;
  bool holds = true;
};

/// Per sample: drift lambda, the largest cosine change over all anchors, and
/// the bound. `holds` must be true everywhere.
std::vector<DriftRow> cosine_drift_report(const AdapterParams& params, const EmbeddingSet& source,
                                          const ClassAnchors& anchors);

/// Mean over rows of |N_a(i) & N_b(i)| / k, where N(i) are the k most similar
/// other rows under each space's kernel (ties by index).
double knn_overlap(const Matrix& a, const KernelSpec& ka, const Matrix& b, const KernelSpec& kb,
                   Index k);

}  // namespace kalign
