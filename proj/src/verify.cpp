#include "kalign/verify.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include "kalign/error.hpp"
#include "kalign/eval.hpp"
#include "kalign/objective.hpp"
#include "kalign/parallel.hpp"
#include "kalign/reduce.hpp"
#include "kalign/synthetic.hpp"

namespace kalign::verify {
namespace {

constexpr std::array<const char*, 7> kBlocks = {"W",         "b",         "log_gamma", "coef0",
                                                "feature_W", "feature_b", "feature_R"};

Index block_index(const std::string& name) {
  for (std::size_t i = 0; i < kBlocks.size(); ++i) {
    if (name == kBlocks[i]) return static_cast<Index>(i);
  }
  return -1;
}

struct Instance {
  PairedEmbeddings paired;
  AdapterParams params;
  PairBatch batch;
  KernelSpec k1_base;
  KernelSpec k2;
  double w = 1.0;
  Matrix R;
  std::vector<Index> rows;
};

KernelSpec random_trial_kernel(Rng& rng, Index trial_kind) {
  switch (trial_kind % 6) {
    case 0: return KernelSpec::polynomial(0.3, 1.0, 3, true);
    case 1: return KernelSpec::polynomial(0.3, 1.0, 1 + static_cast<int>(uniform_below(rng, 4)), true);
    case 2: return KernelSpec::polynomial(0.3, 0.8, 2, false);
    case 3: return KernelSpec::gaussian(uniform(rng, 0.1, 0.5));
    case 4: return KernelSpec::cosine();
    default: return KernelSpec::polynomial(0.3, 1.0, 3, true);
  }
}

Instance random_instance(Rng& rng, const GradientAuditOptions& o, Index trial) {
  Instance inst;
  const Index n = 4 + static_cast<Index>(uniform_below(rng, 7));
  const Index d = 2 + static_cast<Index>(uniform_below(rng, 4));
  const Index dt = 2 + static_cast<Index>(uniform_below(rng, 4));
  EmbeddingSet src;
  src.data = synth::gaussian_matrix(n, d, rng);
  EmbeddingSet tgt;
  tgt.data = synth::gaussian_matrix(n, dt, rng);
  inst.paired = pair(std::move(src), std::move(tgt));

  inst.k1_base = o.k1 ? *o.k1 : random_trial_kernel(rng, trial);
  inst.k2 = o.k2 ? *o.k2 : random_trial_kernel(rng, static_cast<Index>(uniform_below(rng, 6)));
  inst.params.W = 0.2 * synth::gaussian_matrix(d, d, rng);
  inst.params.b = 0.2 * Eigen::Map<const Vector>(synth::gaussian_matrix(d, 1, rng).data(), d);
  if (inst.k1_base.family == KernelFamily::kPolynomial) {
    inst.params.log_gamma = o.k1 ? std::log(o.k1->gamma) : std::log(uniform(rng, 0.1, 0.6));
    inst.params.coef0 = o.k1 ? o.k1->coef0 : uniform(rng, 0.5, 1.5);
  } else {
    inst.params.log_gamma = std::log(inst.k1_base.gamma);
    inst.params.coef0 = 0.0;
  }
  inst.w = uniform(rng, 0.1, 2.0);

  const Index bsz = 1 + static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(n / 2)));
  inst.batch = sample_pair_batch(inst.paired, bsz, rng);
  inst.R = 0.3 * synth::gaussian_matrix(d, dt, rng);
  const auto perm = shuffled_indices(n, rng);
  const Index nrows = 1 + static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(n)));
  inst.rows.assign(perm.begin(), perm.begin() + nrows);
  return inst;
}

double kernel_objective(const Instance& in, const AdapterParams& p) {
  const auto rows = in.batch.rows();
  return in.w * alignment_loss(p, in.paired, in.batch, in.k1_base, in.k2) +
         regularization_loss(p, in.paired.source, rows);
}

double feature_objective(const Instance& in, const AdapterParams& p, const Matrix& R) {
  return feature_alignment_loss_and_grad(p, R, in.paired, in.rows, in.w).loss.total;
}

using BlockWorst = std::array<std::pair<double, Index>, kBlocks.size()>;

void record(BlockWorst& acc, const char* block, double analytic, double numeric) {
  auto& [worst, count] = acc[static_cast<std::size_t>(block_index(block))];
  worst = std::max(worst, gradient_error(analytic, numeric));
  ++count;
}

BlockWorst audit_instance(const Instance& in, const GradientAuditOptions& o) {
  BlockWorst acc{};
  const double h = o.step;
  LossAndGrad lg = total_loss_and_grad(in.params, in.paired, in.batch, in.w, in.k1_base, in.k2);
  lg.grad.dW(0, 0) += o.fault;

  auto central = [&](auto&& perturb) {
    AdapterParams plus = in.params;
    AdapterParams minus = in.params;
    perturb(plus, +h);
    perturb(minus, -h);
    return (kernel_objective(in, plus) - kernel_objective(in, minus)) / (2.0 * h);
  };
  const Index d = in.params.dim();
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c < d; ++c) {
      const double num = central([&](AdapterParams& p, double s) { p.W(r, c) += s; });
      record(acc, "W", lg.grad.dW(r, c), num);
    }
    const double num = central([&](AdapterParams& p, double s) { p.b[r] += s; });
    record(acc, "b", lg.grad.db[r], num);
  }
  record(acc, "log_gamma", lg.grad.dlog_gamma,
         central([&](AdapterParams& p, double s) { p.log_gamma += s; }));
  if (in.k1_base.family == KernelFamily::kPolynomial) {
    record(acc, "coef0", lg.grad.dcoef0, central([&](AdapterParams& p, double s) { p.coef0 += s; }));
  } else {
    record(acc, "coef0", lg.grad.dcoef0, 0.0);
  }

  if (!o.include_feature) return acc;
  const FeatureLossAndGrad fg = feature_alignment_loss_and_grad(in.params, in.R, in.paired, in.rows, in.w);
  auto fcentral = [&](auto&& perturb) {
    AdapterParams pp = in.params, pm = in.params;
    Matrix rp = in.R, rm = in.R;
    perturb(pp, rp, +h);
    perturb(pm, rm, -h);
    return (feature_objective(in, pp, rp) - feature_objective(in, pm, rm)) / (2.0 * h);
  };
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c < d; ++c) {
      record(acc, "feature_W", fg.dW(r, c),
             fcentral([&](AdapterParams& p, Matrix&, double s) { p.W(r, c) += s; }));
    }
    record(acc, "feature_b", fg.db[r], fcentral([&](AdapterParams& p, Matrix&, double s) { p.b[r] += s; }));
    for (Index c = 0; c < in.R.cols(); ++c) {
      record(acc, "feature_R", fg.dR(r, c),
             fcentral([&](AdapterParams&, Matrix& m, double s) { m(r, c) += s; }));
    }
  }
  return acc;
}

double fit_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

double gradient_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / scale;
}

nlohmann::json GradientAuditResult::to_json() const {
  nlohmann::json blocks_json = nlohmann::json::object();
  for (const auto& b : blocks) {
    blocks_json[b.block] = {{"worst_error", b.worst_error}, {"coordinates", b.coordinates}, {"pass", b.pass}};
  }
  return {{"blocks", blocks_json}, {"coordinates", coordinates}, {"worst_error", worst_error}, {"pass", pass}};
}

GradientAuditResult gradient_audit(const GradientAuditOptions& o) {
  if (o.trials < 1) throw ConfigError("gradient audit needs trials >= 1");
  std::vector<BlockWorst> per_trial(static_cast<std::size_t>(o.trials));
  detail::parallel_for(o.trials, [&](Index t) {
    Rng rng = derived_rng(o.seed, static_cast<std::uint64_t>(t));
    per_trial[t] = audit_instance(random_instance(rng, o, t), o);
  });

  GradientAuditResult out;
  for (std::size_t b = 0; b < kBlocks.size(); ++b) {
    BlockAudit audit;
    audit.block = kBlocks[b];
    for (const auto& trial : per_trial) {
      audit.worst_error = std::max(audit.worst_error, trial[b].first);
      audit.coordinates += trial[b].second;
    }
    if (audit.coordinates == 0) continue;
    audit.pass = audit.worst_error < o.tolerance;
    out.coordinates += audit.coordinates;
    out.worst_error = std::max(out.worst_error, audit.worst_error);
    out.pass = out.pass && audit.pass;
    out.blocks.push_back(audit);
  }
  return out;
}

nlohmann::json ConcentrationResult::to_json() const {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows) {
    table.push_back({{"M", r.m}, {"mean_deviation", r.mean_deviation}, {"deviation_of_mean", r.deviation_of_mean}});
  }
  return {{"degenerate", degenerate},
          {"exact_gradient_norm", exact_gradient_norm},
          {"table", table},
          {"slope", slope},
          {"slope_pass", slope_pass},
          {"exact_loss", exact_loss},
          {"batch_loss_mean", batch_loss_mean},
          {"batch_loss_se", batch_loss_se},
          {"loss_pass", loss_pass},
          {"pass", pass()}};
}

ConcentrationResult concentration_experiment(const PairedEmbeddings& paired,
                                             const AdapterParams& params, const KernelSpec& k1_base,
                                             const KernelSpec& k2, const ConcentrationOptions& o) {
  const Index n = paired.rows();
  if (n > 64) throw ConfigError("concentration experiment expects n <= 64");
  if (o.repeats < 100) throw ConfigError("concentration experiment needs repeats >= 100");
  if (o.m_values.empty() || !std::is_sorted(o.m_values.begin(), o.m_values.end()) ||
      std::adjacent_find(o.m_values.begin(), o.m_values.end()) != o.m_values.end()) {
    throw ConfigError("M values must be strictly increasing");
  }

  PairBatch all;
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) all.pairs.emplace_back(i, j);
  }
  const Index npairs = all.batch_size();
  const Index dim = params.dim() * params.dim() + params.dim() + 2;
  Matrix per_pair(npairs, dim);
  detail::parallel_for(npairs, [&](Index p) {
    PairBatch one;
    one.pairs.push_back(all.pairs[p]);
    per_pair.row(p) = alignment_loss_and_grad(params, paired, one, k1_base, k2).grad.flatten().transpose();
  });

  ConcentrationResult out;
  const Vector exact = per_pair.colwise().mean().transpose();
  out.exact_gradient_norm = exact.norm();
  out.exact_loss = alignment_loss(params, paired, all, k1_base, k2);
  if (!(out.exact_gradient_norm > 1e-12)) {
    out.degenerate = true;
    return out;
  }

  std::vector<double> log_m, log_dev;
  for (std::size_t mi = 0; mi < o.m_values.size(); ++mi) {
    const Index m = o.m_values[mi];
    std::vector<double> dev(static_cast<std::size_t>(o.repeats));
    Matrix estimates(o.repeats, dim);
    detail::parallel_for(o.repeats, [&](Index r) {
      Rng rng = derived_rng(o.seed, mi * 1000003 + static_cast<std::uint64_t>(r));
      Vector est = Vector::Zero(dim);
      for (Index k = 0; k < m; ++k) {
        est += per_pair.row(static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(npairs)))).transpose();
      }
      est /= static_cast<double>(m);
      dev[r] = (est - exact).norm();
      estimates.row(r) = est.transpose();
    });
    ConcentrationRow row;
    row.m = m;
    row.mean_deviation = pairwise_sum(dev) / static_cast<double>(o.repeats);
    row.deviation_of_mean = (estimates.colwise().mean().transpose() - exact).norm();
    out.rows.push_back(row);
    log_m.push_back(std::log(static_cast<double>(m)));
    log_dev.push_back(std::log(row.mean_deviation));
  }
  out.slope = o.m_values.size() >= 2 ? fit_slope(log_m, log_dev) : 0.0;
  out.slope_pass = out.slope >= o.slope_lo && out.slope <= o.slope_hi;

  std::vector<double> losses(static_cast<std::size_t>(o.loss_batches));
  detail::parallel_for(o.loss_batches, [&](Index b) {
    Rng rng = derived_rng(o.seed ^ 0x5bd1e995ULL, static_cast<std::uint64_t>(b));
    const PairBatch batch = sample_pair_batch(paired, o.loss_batch_size, rng);
    losses[b] = alignment_loss(params, paired, batch, k1_base, k2);
  });
  out.batch_loss_mean = pairwise_sum(losses) / static_cast<double>(losses.size());
  std::vector<double> sq(losses.size());
  for (std::size_t b = 0; b < losses.size(); ++b) {
    sq[b] = (losses[b] - out.batch_loss_mean) * (losses[b] - out.batch_loss_mean);
  }
  const double sd = std::sqrt(pairwise_sum(sq) / static_cast<double>(losses.size() - 1));
  out.batch_loss_se = sd / std::sqrt(static_cast<double>(losses.size()));
  out.loss_pass = std::abs(out.batch_loss_mean - out.exact_loss) < 3.0 * out.batch_loss_se;
  return out;
}

ConcentrationResult default_concentration(const ConcentrationOptions& o) {
  Rng rng(o.seed);
  EmbeddingSet src;
  src.data = synth::gaussian_matrix(64, 8, rng);
  EmbeddingSet tgt;
  tgt.data = synth::gaussian_matrix(64, 8, rng);
  const PairedEmbeddings paired = pair(std::move(src), std::move(tgt));
  const KernelSpec k = KernelSpec::polynomial(1.0 / 8.0, 1.0, 3, true);
  return concentration_experiment(paired, AdapterParams::identity(8, k.gamma, k.coef0), k, k, o);
}

nlohmann::json Prop2Result::to_json() const {
  return {{"trials", trials},
          {"violations", violations},
          {"zero_drift_trials", zero_drift_trials},
          {"stress_trials", stress_trials},
          {"worst_ratio", worst_ratio},
          {"pass", pass()}};
}

Prop2Result prop2_audit(const Prop2Options& o) {
  struct Trial {
    bool violated = false;
    double ratio = 0.0;
  };
  std::vector<Trial> trials(static_cast<std::size_t>(o.trials));
  detail::parallel_for(o.trials, [&](Index t) {
    Rng rng = derived_rng(o.seed, static_cast<std::uint64_t>(t));
    const Index d = 2 + static_cast<Index>(uniform_below(rng, 31));
    const Matrix xm = synth::gaussian_matrix(1, d, rng);
    const Matrix am = synth::gaussian_matrix(1, d, rng);
    AdapterParams p = AdapterParams::identity(d, 1.0, 1.0);
    if (t % 10 == 5) {
      // |f(x)| = 1e-8 |x| along a random direction: solve b = f - x - W x.
      p.W = synth::gaussian_matrix(d, d, rng) / std::sqrt(static_cast<double>(d));
      Vector v = Eigen::Map<const Vector>(synth::gaussian_matrix(d, 1, rng).data(), d);
      const Vector x = xm.row(0).transpose();
      const Vector f = 1e-8 * x.norm() * v.normalized();
      p.b = f - x - p.W * x;
    } else if (t % 10 != 0) {
      const double scale = std::pow(10.0, uniform(rng, -4.0, 1.0));
      p.W = scale * synth::gaussian_matrix(d, d, rng) / std::sqrt(static_cast<double>(d));
      p.b = scale * Eigen::Map<const Vector>(synth::gaussian_matrix(d, 1, rng).data(), d);
    }
    const Vector fx = forward(p, row_span(xm, 0));
    const CosineChange cc = cosine_change(row_span(xm, 0), vec_span(fx), row_span(am, 0));
    trials[t].violated = !cc.holds;
    trials[t].ratio = cc.bound > 0.0 ? cc.change / cc.bound : 0.0;
  });

  Prop2Result out;
  out.trials = o.trials;
  for (Index t = 0; t < o.trials; ++t) {
    out.violations += trials[t].violated ? 1 : 0;
    out.worst_ratio = std::max(out.worst_ratio, trials[t].ratio);
    if (t % 10 == 0) ++out.zero_drift_trials;
    if (t % 10 == 5) ++out.stress_trials;
  }
  return out;
}

KernelSpec random_kernel_spec(Rng& rng, Index dim) {
  const double inv = 1.0 / static_cast<double>(dim);
  switch (uniform_below(rng, 3)) {
    case 0:
      return KernelSpec::polynomial(uniform(rng, 0.2, 1.0) * inv, uniform(rng, 0.0, 2.0),
                                    1 + static_cast<int>(uniform_below(rng, 5)), uniform01(rng) < 0.7);
    case 1: return KernelSpec::gaussian(uniform(rng, 0.1, 2.0) * inv);
    default: return KernelSpec::cosine();
  }
}

std::vector<KernelAuditRow> kernel_audit(const std::vector<KernelSpec>& specs, std::uint64_t seed,
                                         Index draws) {
  std::vector<KernelAuditRow> rows(specs.size());
  detail::parallel_for(static_cast<Index>(specs.size()), [&](Index s) {
    Rng rng = derived_rng(seed, static_cast<std::uint64_t>(s));
    KernelAuditRow row;
    row.spec = specs[s];
    row.draws = draws;
    constexpr Index kDim = 8;
    for (Index k = 0; k < draws; ++k) {
      const double scale = std::pow(10.0, uniform(rng, -1.0, 1.0));
      const Matrix xy = scale * synth::gaussian_matrix(2, kDim, rng);
      const double a = eval(row.spec, row_span(xy, 0), row_span(xy, 1));
      const double b = eval(row.spec, row_span(xy, 1), row_span(xy, 0));
      row.symmetry_ok = row.symmetry_ok && a == b;
      row.max_abs_value = std::max(row.max_abs_value, std::abs(a));
      if (row.spec.bounded()) row.range_ok = row.range_ok && std::abs(a) <= 1.0 + 1e-12;
    }
    const Matrix x = synth::gaussian_matrix(64, kDim, rng);
    row.lambda_min = psd_probe(row.spec, x);
    row.psd_ok = row.lambda_min >= -64.0 * 1e-10;
    rows[s] = row;
  });
  return rows;
}

nlohmann::json to_json(const std::vector<KernelAuditRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"spec", r.spec},
                   {"draws", r.draws},
                   {"symmetry_ok", r.symmetry_ok},
                   {"range_ok", r.range_ok},
                   {"max_abs_value", r.max_abs_value},
                   {"lambda_min", r.lambda_min},
                   {"psd_ok", r.psd_ok},
                   {"pass", r.pass()}});
  }
  return out;
}

bool VerifyReport::pass() const {
  return gradient.pass && concentration.pass() && prop2.pass() &&
         std::all_of(kernels.begin(), kernels.end(), [](const auto& r) { return r.pass(); });
}

nlohmann::json VerifyReport::to_json() const {
  return {{"gradient_audit", gradient.to_json()},
          {"concentration", concentration.to_json()},
          {"prop2_audit", prop2.to_json()},
          {"kernel_audit", verify::to_json(kernels)},
          {"pass", pass()}};
}

VerifyReport run_all(const VerifyOptions& o) {
  VerifyReport report;
  GradientAuditOptions g;
  g.trials = o.gradient_trials;
  g.seed = o.seed;
  g.fault = o.gradient_fault;
  report.gradient = gradient_audit(g);

  ConcentrationOptions c;
  c.seed = o.seed;
  c.repeats = o.concentration_repeats;
  report.concentration = default_concentration(c);

  report.prop2 = prop2_audit({o.prop2_trials, o.seed});

  const std::vector<KernelSpec> specs = {
      KernelSpec::polynomial(1.0 / 8.0, 1.0, 3, true), KernelSpec::polynomial(1.0 / 8.0, 1.0, 3, false),
      KernelSpec::polynomial(1.0 / 8.0, 0.0, 2, true), KernelSpec::gaussian(1.0 / 8.0),
      KernelSpec::cosine()};
  report.kernels = kernel_audit(specs, o.seed);
  return report;
}

}  // namespace kalign::verify
