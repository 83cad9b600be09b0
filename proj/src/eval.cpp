#include "kalign/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "kalign/error.hpp"
#include "kalign/parallel.hpp"
#include "kalign/reduce.hpp"

namespace kalign {
namespace {

// Rows scaled to unit norm; zero rows are rejected.
Matrix unit_rows(const Matrix& m, const char* what) {
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) throw DataError(std::string(what) + ": zero-norm row " + std::to_string(i));
    out.row(i) /= n;
  }
  return out;
}

double norm_of(ConstSpan v) {
  double acc = 0.0;
  for (double e : v) acc += e * e;
  return std::sqrt(acc);
}

double dot_of(ConstSpan a, ConstSpan b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double lipschitz_bound(const Eigen::MatrixXd& xt, double curvature, double l2) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(xt.transpose() * xt / static_cast<double>(xt.rows()),
                                                     Eigen::EigenvaluesOnly);
  return curvature * eig.eigenvalues().maxCoeff() + l2;
}

Eigen::MatrixXd with_bias(const Matrix& x) {
  Eigen::MatrixXd out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

}  // namespace

void ClassAnchors::validate() const {
  if (anchors.rows() < 2) throw DataError("class anchors need at least 2 classes");
  if (static_cast<Index>(names.size()) != anchors.rows()) {
    throw DataError("class anchors: one name per anchor row required");
  }
  if (!anchors.allFinite()) throw DataError("class anchors contain non-finite values");
  for (Index c = 0; c < anchors.rows(); ++c) {
    if (!(anchors.row(c).norm() > 0.0)) throw DataError("class anchor " + std::to_string(c) + " is zero");
  }
}

ClassAnchors ClassAnchors::from_set(const EmbeddingSet& set) {
  ClassAnchors a;
  a.anchors = set.data;
  if (set.ids) {
    a.names = *set.ids;
  } else {
    for (Index c = 0; c < set.rows(); ++c) a.names.push_back("class" + std::to_string(c));
  }
  a.validate();
  return a;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["metrics"] = metrics;
  if (!per_class.empty()) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      nlohmann::json row = per_class[c];
      row["class"] = c < class_names.size() ? class_names[c] : std::to_string(c);
      rows.push_back(row);
    }
    j["per_class"] = rows;
  }
  j["config"] = config;
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "metric,value\n";
  for (const auto& [k, v] : metrics) os << k << ',' << fmt(v) << '\n';
  if (!per_class.empty()) {
    os << "\nclass";
    for (const auto& [k, _] : per_class.front()) os << ',' << k;
    os << '\n';
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      os << (c < class_names.size() ? class_names[c] : std::to_string(c));
      for (const auto& [_, v] : per_class[c]) os << ',' << fmt(v);
      os << '\n';
    }
  }
  return os.str();
}

ZeroShotResult zero_shot_classify(const Matrix& embeddings, const ClassAnchors& anchors,
                                  const std::vector<std::int64_t>* labels) {
  anchors.validate();
  if (embeddings.cols() != anchors.anchors.cols()) {
    throw ConfigError("zero-shot: embedding dim " + std::to_string(embeddings.cols()) +
                      " != anchor dim " + std::to_string(anchors.anchors.cols()));
  }
  const Matrix e = unit_rows(embeddings, "zero-shot embeddings");
  const Matrix a = unit_rows(anchors.anchors, "anchors");
  const Index n = e.rows();
  const Index classes = a.rows();

  ZeroShotResult out;
  out.predictions.assign(static_cast<std::size_t>(n), 0);
  detail::parallel_for(n, [&](Index i) {
    Index best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < classes; ++c) {
      const double s = dot_of(row_span(e, i), row_span(a, c));
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    out.predictions[i] = best;
  });

  out.per_class_accuracy.assign(static_cast<std::size_t>(classes), 0.0);
  out.per_class_count.assign(static_cast<std::size_t>(classes), 0);
  if (!labels) {
    out.accuracy = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  if (static_cast<Index>(labels->size()) != n) throw DataError("zero-shot: label count != n");
  Index correct = 0;
  std::vector<Index> hits(static_cast<std::size_t>(classes), 0);
  for (Index i = 0; i < n; ++i) {
    const auto y = (*labels)[i];
    if (y < 0 || y >= classes) throw DataError("zero-shot: label " + std::to_string(y) + " out of range");
    ++out.per_class_count[y];
    if (out.predictions[i] == y) {
      ++correct;
      ++hits[y];
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  for (Index c = 0; c < classes; ++c) {
    out.per_class_accuracy[c] = out.per_class_count[c] > 0
                                    ? static_cast<double>(hits[c]) / static_cast<double>(out.per_class_count[c])
                                    : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

std::vector<Index> retrieval_ranks(const Matrix& queries, const Matrix& gallery) {
  if (queries.rows() != gallery.rows() || queries.cols() != gallery.cols()) {
    throw ConfigError("retrieval: queries and gallery must have the same shape");
  }
  const Matrix q = unit_rows(queries, "retrieval queries");
  const Matrix g = unit_rows(gallery, "retrieval gallery");
  const Index n = q.rows();
  std::vector<Index> ranks(static_cast<std::size_t>(n));
  detail::parallel_for(n, [&](Index i) {
    const double truth = dot_of(row_span(q, i), row_span(g, i));
    Index rank = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double s = dot_of(row_span(q, i), row_span(g, j));
      if (s > truth || (s == truth && j < i)) ++rank;
    }
    ranks[i] = rank;
  });
  return ranks;
}

std::map<Index, double> retrieval(const Matrix& queries, const Matrix& gallery,
                                  const std::vector<Index>& ks) {
  const auto ranks = retrieval_ranks(queries, gallery);
  const auto n = static_cast<Index>(ranks.size());
  std::map<Index, double> out;
  for (Index k : ks) {
    if (k < 1) throw ConfigError("retrieval: K must be >= 1");
    const Index cap = std::min(k, n);
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [cap](Index r) { return r < cap; });
    out[k] = static_cast<double>(hits) / static_cast<double>(n);
  }
  return out;
}

ProbeResult linear_probe(const EmbeddingSet& train, const EmbeddingSet& test,
                         const ProbeOptions& options) {
  if (!train.labels || !test.labels) throw DataError("linear probe needs labels on train and test sets");
  if (train.dim() != test.dim()) throw ConfigError("linear probe: train/test dimension mismatch");
  if (!(options.l2 >= 0.0)) throw ConfigError("linear probe: l2 must be >= 0");

  const Eigen::MatrixXd xt = with_bias(train.data);
  const Eigen::MatrixXd xs = with_bias(test.data);
  const auto n = static_cast<double>(train.rows());
  const Index feat = xt.cols();

  // Class index per label value (multiclass) or bit count (multilabel).
  Index classes = 0;
  std::vector<std::int64_t> values;
  if (options.multilabel) {
    std::int64_t all = 0;
    for (auto y : *train.labels) {
      if (y < 0) throw DataError("multilabel probe: labels must be non-negative bitmasks");
      all |= y;
    }
    while (classes < 63 && (all >> classes) != 0) ++classes;
    if (classes < 1) throw DataError("multilabel probe: training labels are all empty");
  } else {
    std::set<std::int64_t> seen(train.labels->begin(), train.labels->end());
    if (seen.size() < 2) throw DataError("linear probe: training set has a single class");
    values.assign(seen.begin(), seen.end());
    classes = static_cast<Index>(values.size());
    for (auto y : *test.labels) {
      if (!seen.contains(y)) throw DataError("linear probe: test label " + std::to_string(y) + " unseen in training");
    }
  }

  auto targets = [&](const EmbeddingSet& set) {
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(set.rows(), classes);
    for (Index i = 0; i < set.rows(); ++i) {
      const auto label = (*set.labels)[i];
      if (options.multilabel) {
        for (Index c = 0; c < classes; ++c) y(i, c) = ((label >> c) & 1) ? 1.0 : 0.0;
      } else {
        const auto it = std::lower_bound(values.begin(), values.end(), label);
        y(i, std::distance(values.begin(), it)) = 1.0;
      }
    }
    return y;
  };
  const Eigen::MatrixXd yt = targets(train);

  auto predict = [&](const Eigen::MatrixXd& x, const Eigen::MatrixXd& w) {
    Eigen::MatrixXd z = x * w.transpose();
    if (options.multilabel) return Eigen::MatrixXd((1.0 + (-z.array()).exp()).inverse());
    for (Index i = 0; i < z.rows(); ++i) {
      const double mx = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - mx).exp();
      z.row(i) /= z.row(i).sum();
    }
    return z;
  };

  const double L = lipschitz_bound(xt, options.multilabel ? 0.25 : 0.5, options.l2);
  const double step = 1.0 / L;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(classes, feat);
  ProbeResult out;
  out.classes = classes;
  for (out.steps = 0; out.steps < options.max_steps; ++out.steps) {
    Eigen::MatrixXd grad = (predict(xt, w) - yt).transpose() * xt / n;
    grad.leftCols(feat - 1) += options.l2 * w.leftCols(feat - 1);
    out.final_grad_norm = grad.norm();
    if (out.final_grad_norm <= options.grad_tol) {
      out.converged = true;
      break;
    }
    w -= step * grad;
  }
  if (!w.allFinite()) throw NumericalError("linear probe diverged");
  out.weights = w;

  const Eigen::MatrixXd ps = predict(xs, w);
  const Eigen::MatrixXd ys = targets(test);
  if (options.multilabel) {
    double correct = 0.0;
    double recall_sum = 0.0;
    Index recall_classes = 0;
    for (Index c = 0; c < classes; ++c) {
      double tp = 0.0;
      double pos = 0.0;
      for (Index i = 0; i < ps.rows(); ++i) {
        const bool pred = ps(i, c) > 0.5;
        const bool truth = ys(i, c) > 0.5;
        correct += pred == truth ? 1.0 : 0.0;
        if (truth) {
          pos += 1.0;
          tp += pred ? 1.0 : 0.0;
        }
      }
      if (pos > 0.0) {
        recall_sum += tp / pos;
        ++recall_classes;
      }
    }
    out.test_accuracy = correct / static_cast<double>(ps.rows() * classes);
    out.macro_recall = recall_classes > 0 ? recall_sum / static_cast<double>(recall_classes) : 0.0;
  } else {
    Index correct = 0;
    for (Index i = 0; i < ps.rows(); ++i) {
      Index pred;
      ps.row(i).maxCoeff(&pred);
      Index truth;
      ys.row(i).maxCoeff(&truth);
      correct += pred == truth ? 1 : 0;
    }
    out.test_accuracy = static_cast<double>(correct) / static_cast<double>(ps.rows());
  }
  return out;
}

Discrepancy kernel_discrepancy_exact(const Matrix& mapped_source, const Matrix& target,
                                     const KernelSpec& k1, const KernelSpec& k2) {
  const Index n = mapped_source.rows();
  if (n != target.rows()) throw ConfigError("kernel discrepancy: row-count mismatch");
  if (n < 2) throw DataError("kernel discrepancy needs n >= 2");
  std::vector<double> row_sums(static_cast<std::size_t>(n), 0.0);
  detail::parallel_for(n, [&](Index i) {
    std::vector<double> terms;
    terms.reserve(static_cast<std::size_t>(n - i - 1));
    for (Index j = i + 1; j < n; ++j) {
      const double gap = eval(k1, row_span(mapped_source, i), row_span(mapped_source, j)) -
                         eval(k2, row_span(target, i), row_span(target, j));
      terms.push_back(gap * gap);
    }
    row_sums[i] = pairwise_sum(terms);
  });
  Discrepancy out;
  out.pairs = n * (n - 1) / 2;
  out.value = pairwise_sum(row_sums) / static_cast<double>(out.pairs);
  return out;
}

Discrepancy kernel_discrepancy_sampled(const Matrix& mapped_source, const Matrix& target,
                                       const KernelSpec& k1, const KernelSpec& k2, Index pairs,
                                       Rng& rng) {
  const Index n = mapped_source.rows();
  if (n != target.rows()) throw ConfigError("kernel discrepancy: row-count mismatch");
  if (n < 2) throw DataError("kernel discrepancy needs n >= 2");
  if (pairs < 2) throw ConfigError("sampled kernel discrepancy needs >= 2 pairs");
  std::vector<std::pair<Index, Index>> ij(static_cast<std::size_t>(pairs));
  const auto un = static_cast<std::uint64_t>(n);
  for (auto& [i, j] : ij) {
    i = static_cast<Index>(uniform_below(rng, un));
    j = static_cast<Index>(uniform_below(rng, un - 1));
    if (j >= i) ++j;
  }
  std::vector<double> terms(ij.size());
  detail::parallel_for(pairs, [&](Index p) {
    const auto [i, j] = ij[p];
    const double gap = eval(k1, row_span(mapped_source, i), row_span(mapped_source, j)) -
                       eval(k2, row_span(target, i), row_span(target, j));
    terms[p] = gap * gap;
  });
  const double mean = pairwise_sum(terms) / static_cast<double>(pairs);
  std::vector<double> dev(terms.size());
  for (std::size_t p = 0; p < terms.size(); ++p) dev[p] = (terms[p] - mean) * (terms[p] - mean);
  const double var = pairwise_sum(dev) / static_cast<double>(pairs - 1);
  return {mean, std::sqrt(var / static_cast<double>(pairs)), false, pairs};
}

Discrepancy kernel_discrepancy(const PairedEmbeddings& paired, const AdapterParams& params,
                               const KernelSpec& k1_base, const KernelSpec& k2) {
  const Matrix mapped = forward_batch(params, paired.source.data);
  const KernelSpec k1 = params.source_kernel(k1_base);
  if (paired.rows() <= 4096) return kernel_discrepancy_exact(mapped, paired.target.data, k1, k2);
  Rng rng(0x6b616c69676e);
  return kernel_discrepancy_sampled(mapped, paired.target.data, k1, k2, Index{1} << 20, rng);
}

CosineChange cosine_change(ConstSpan x, ConstSpan fx, ConstSpan anchor) {
  if (x.size() != fx.size() || x.size() != anchor.size()) throw ConfigError("cosine_change: dimension mismatch");
  const double nx = norm_of(x);
  const double nf = norm_of(fx);
  const double na = norm_of(anchor);
  if (!(nx > 0.0) || !(nf > 0.0) || !(na > 0.0)) throw DataError("cosine_change: zero-norm vector");
  CosineChange out;
  const double before = dot_of(x, anchor) / (nx * na);
  const double after = dot_of(fx, anchor) / (nf * na);
  out.change = std::abs(before - after);
  double sq = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) sq += (fx[k] - x[k]) * (fx[k] - x[k]);
  out.lambda = std::sqrt(sq);
  out.bound = 2.0 * out.lambda / std::max(nf, nx);
  out.holds = out.change <= out.bound + 1e-12;
  return out;
}

std::vector<DriftRow> cosine_drift_report(const AdapterParams& params, const EmbeddingSet& source,
                                          const ClassAnchors& anchors) {
  anchors.validate();
  if (anchors.anchors.cols() != source.dim()) throw ConfigError("drift report: anchor dimension mismatch");
  const Matrix fx = forward_batch(params, source.data);
  std::vector<DriftRow> rows(static_cast<std::size_t>(source.rows()));
  detail::parallel_for(source.rows(), [&](Index i) {
    DriftRow r;
    for (Index c = 0; c < anchors.classes(); ++c) {
      const auto cc = cosine_change(source.row(i), row_span(fx, i), row_span(anchors.anchors, c));
      r.lambda = cc.lambda;
      r.bound = cc.bound;
      r.max_change = std::max(r.max_change, cc.change);
      r.holds = r.holds && cc.holds;
    }
    rows[i] = r;
  });
  return rows;
}

double knn_overlap(const Matrix& a, const KernelSpec& ka, const Matrix& b, const KernelSpec& kb,
                   Index k) {
  const Index n = a.rows();
  if (b.rows() != n) throw ConfigError("knn_overlap: row-count mismatch");
  if (k < 1 || k >= n) throw ConfigError("knn_overlap: need 1 <= k < n");
  auto neighbours = [&](const Matrix& m, const KernelSpec& spec, Index i) {
    std::vector<std::pair<double, Index>> sims;
    sims.reserve(static_cast<std::size_t>(n - 1));
    for (Index j = 0; j < n; ++j) {
      if (j != i) sims.emplace_back(-eval(spec, row_span(m, i), row_span(m, j)), j);
    }
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end());
    std::vector<Index> out;
    for (Index t = 0; t < k; ++t) out.push_back(sims[t].second);
    std::sort(out.begin(), out.end());
    return out;
  };
  std::vector<double> overlap(static_cast<std::size_t>(n));
  detail::parallel_for(n, [&](Index i) {
    const auto na = neighbours(a, ka, i);
    const auto nb = neighbours(b, kb, i);
    std::vector<Index> common;
    std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(common));
    overlap[i] = static_cast<double>(common.size()) / static_cast<double>(k);
  });
  return pairwise_sum(overlap) / static_cast<double>(n);
}

}  // namespace kalign
