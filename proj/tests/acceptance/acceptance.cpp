// Release gates. One PASS/FAIL line per criterion, exit 1 if any fails.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "json.hpp"
#include "kalign/adapter.hpp"
#include "kalign/cli.hpp"
#include "kalign/embedding_store.hpp"
#include "kalign/eval.hpp"
#include "kalign/objective.hpp"
#include "kalign/parallel.hpp"
#include "kalign/synthetic.hpp"
#include "kalign/trainer.hpp"
#include "kalign/verify.hpp"

#ifndef KALIGN_SOURCE_DIR
#define KALIGN_SOURCE_DIR "."
#endif

namespace fs = std::filesystem;
using namespace kalign;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Runs body, returns wall seconds.
double timed(const std::function<void()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  body();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Scratch {
  fs::path path;
  Scratch() {
    path = fs::temp_directory_path() / ("kalign_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

void kernel_correctness() {
  std::vector<verify::KernelAuditRow> rows;
  const double secs = timed([&] {
    Rng rng(1);
    std::vector<KernelSpec> specs;
    for (int i = 0; i < 1000; ++i) specs.push_back(verify::random_kernel_spec(rng, 8));
    rows = verify::kernel_audit(specs, 1, 1);
  });
  bool ok = rows.size() == 1000;
  double worst_lambda = 0.0, worst_abs = 0.0;
  for (const auto& r : rows) {
    ok = ok && r.pass();
    worst_lambda = std::min(worst_lambda, r.lambda_min);
    if (r.spec.bounded()) worst_abs = std::max(worst_abs, r.max_abs_value);
  }
  report("kernel_correctness", ok && secs < 10.0,
         fmt("%zu draws, min lambda %.3g (>= -6.4e-9), max |k| normalized %.17g, %.2fs (< 10s)", rows.size(),
             worst_lambda, worst_abs, secs));
}

void gradient_exactness() {
  verify::GradientAuditResult r;
  const double secs = timed([&] { r = verify::gradient_audit(verify::GradientAuditOptions{}); });
  std::string blocks;
  for (const auto& b : r.blocks) blocks += fmt(" %s=%.2g", b.block.c_str(), b.worst_error);
  report("gradient_exactness", r.pass && r.coordinates >= 200 && secs < 30.0,
         fmt("%td coordinates, worst %.3g (<= 1e-6);%s; %.2fs (< 30s)", r.coordinates, r.worst_error,
             blocks.c_str(), secs));
}

void drift_bound() {
  verify::Prop2Result r;
  const double secs = timed([&] { r = verify::prop2_audit(verify::Prop2Options{}); });
  report("cosine_drift_bound", r.pass() && r.trials == 100000 && r.stress_trials > 0 && secs < 20.0,
         fmt("%td trials (%td stress, %td zero-drift), %td violations, worst ratio %.6f, %.2fs (< 20s)", r.trials,
             r.stress_trials, r.zero_drift_trials, r.violations, r.worst_ratio, secs));
}

void gradient_concentration() {
  verify::ConcentrationResult r;
  const double secs = timed([&] { r = verify::default_concentration(verify::ConcentrationOptions{}); });
  report("gradient_concentration", !r.degenerate && r.slope_pass && r.loss_pass && secs < 120.0,
         fmt("slope %.4f in [-0.65, -0.35]; batch loss %.6g vs exact %.6g (|diff| %.3g SE); %.2fs (< 120s)", r.slope,
             r.batch_loss_mean, r.exact_loss,
             r.batch_loss_se > 0 ? std::abs(r.batch_loss_mean - r.exact_loss) / r.batch_loss_se : 0.0, secs));
}

TrainConfig e2e_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  return nlohmann::json::parse(in).get<TrainConfig>();
}

double mean_drift(const AdapterParams& p, const Matrix& x) { return mean(drift(p, x)); }

void end_to_end(const TrainConfig& config) {
  synth::CorpusOptions o;  // 256 x 16, rank 8, noise 0.05
  o.seed = 0;
  const PairedEmbeddings paired = synth::detail_loss_corpus(o);
  const KernelSpec k1_base = config.k1_init.resolve(paired.source.dim());
  const KernelSpec k2 = config.k2_spec.resolve(paired.target.dim());

  TrainReport main_run;
  std::vector<double> sweep_drift;
  const std::vector<double> sweep{0.1, 1.0, 10.0};
  double tiny_drift = 0.0;
  double d0 = 0.0, d1 = 0.0, knn0 = 0.0, knn1 = 0.0, align0 = 0.0, align1 = 0.0;

  const double secs = timed([&] {
    main_run = train(paired, config);
    d0 = kernel_discrepancy(paired, initial_params(paired, config), k1_base, k2).value;
    d1 = kernel_discrepancy(paired, main_run.final_params, k1_base, k2).value;
    knn0 = knn_overlap(paired.source.data, k1_base, paired.target.data, k2, 10);
    knn1 = knn_overlap(forward_batch(main_run.final_params, paired.source.data), main_run.k1, paired.target.data,
                       k2, 10);
    align0 = main_run.history.front().loss.alignment;
    align1 = main_run.history.back().loss.alignment;
    for (double w : sweep) {
      TrainConfig c = config;
      c.w = w;
      sweep_drift.push_back(mean_drift(train(paired, c).final_params, paired.source.data));
    }
    TrainConfig c = config;
    c.w = 1e-12;
    tiny_drift = mean_drift(train(paired, c).final_params, paired.source.data);
  });

  const std::string timing = fmt("%.1fs for 5 runs (< 180s)", secs);
  report("e2e_a_discrepancy", d1 <= 0.5 * d0 && secs < 180.0,
         fmt("%.6f -> %.6f, ratio %.4f (<= 0.5); batch alignment %.4g -> %.4g; %s", d0, d1, d1 / d0, align0, align1,
             timing.c_str()));
  report("e2e_b_knn_overlap", knn1 > knn0, fmt("10-NN overlap %.4f -> %.4f (must increase)", knn0, knn1));
  bool monotone = true;
  for (std::size_t i = 1; i < sweep_drift.size(); ++i) monotone = monotone && sweep_drift[i - 1] < sweep_drift[i];
  report("e2e_c_drift_anchoring", monotone,
         fmt("mean drift w=0.1: %.6g, w=1: %.6g, w=10: %.6g (increasing in w)", sweep_drift[0], sweep_drift[1],
             sweep_drift[2]));
  report("e2e_d_tiny_w", tiny_drift < 1e-6, fmt("w=1e-12 mean drift %.3g (< 1e-6)", tiny_drift));

  // Moving average of the logged alignment term.
  const auto& h = main_run.history;
  const std::size_t window = 50;
  std::vector<double> ma;
  for (std::size_t i = window; i <= h.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = i - window; k < i; ++k) s += h[k].loss.alignment;
    ma.push_back(s / static_cast<double>(window));
  }
  std::size_t good = 0;
  for (std::size_t i = 1; i < ma.size(); ++i) good += ma[i] <= ma[i - 1] ? 1 : 0;
  const double frac = ma.size() > 1 ? static_cast<double>(good) / static_cast<double>(ma.size() - 1) : 0.0;
  report("e2e_moving_average_trend", frac >= 0.9,
         fmt("%zu of %zu consecutive 50-step MA comparisons non-increasing = %.3f (>= 0.90); MA %.4g -> %.4g", good,
             ma.size() - 1, frac, ma.front(), ma.back()));
}

void determinism(const std::string& config_path, const Scratch& scratch) {
  std::ostringstream out, err;
  const fs::path dir = scratch.path / "det";
  auto cli = [&](const std::vector<std::string>& args) { return run_cli(args, out, err); };
  int code = cli({"synth", "--kind", "detail", "--out", (dir / "data").string(), "--seed", "3"});
  code += cli({"train", "--source", (dir / "data/source.kemb").string(), "--target",
               (dir / "data/target.kemb").string(), "--config", config_path, "--out", (dir / "t1").string(),
               "--threads", "1"});
  code += cli({"train", "--manifest", (dir / "t1/manifest.json").string(), "--out", (dir / "t4").string(),
               "--threads", "4"});
  const std::string log1 = slurp(dir / "t1/train.jsonl");
  const bool logs = !log1.empty() && log1 == slurp(dir / "t4/train.jsonl");
  const std::string a1 = slurp(dir / "t1/adapter.kadp");
  const bool adapters = !a1.empty() && a1 == slurp(dir / "t4/adapter.kadp");
  report("determinism", code == 0 && logs && adapters,
         fmt("threads 1 vs 4 from one manifest: train.jsonl %s (%zu bytes), adapter.kadp %s%s",
             logs ? "identical" : "DIFFERENT", log1.size(), adapters ? "identical" : "DIFFERENT",
             code == 0 ? "" : ("; cli error: " + err.str()).c_str()));
}

EmbeddingSet random_set(Rng& rng, Dtype dtype) {
  EmbeddingSet s;
  const Index n = 1 + static_cast<Index>(uniform_below(rng, 24));
  const Index d = 1 + static_cast<Index>(uniform_below(rng, 12));
  s.data.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) {
      const double v = standard_normal(rng) * std::pow(10.0, uniform(rng, -6.0, 6.0));
      s.data(i, j) = dtype == Dtype::kFloat32 ? static_cast<double>(static_cast<float>(v)) : v;
    }
  }
  if (uniform_below(rng, 2) == 0) {
    std::vector<std::int64_t> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<std::int64_t>(rng());
    s.labels = labels;
  }
  if (uniform_below(rng, 2) == 0) {
    std::vector<std::string> ids(static_cast<std::size_t>(n));
    for (auto& id : ids) {
      const auto len = uniform_below(rng, 12);
      for (std::uint64_t k = 0; k < len; ++k) id.push_back(static_cast<char>(32 + uniform_below(rng, 95)));
    }
    s.ids = ids;
  }
  const auto meta = uniform_below(rng, 3);
  for (std::uint64_t k = 0; k < meta; ++k) s.meta["key" + std::to_string(k)] = std::to_string(rng());
  return s;
}

void format_round_trip() {
  Rng rng(2024);
  Index exact = 0, detected = 0;
  const Index trials = 10000;
  const double secs = timed([&] {
    for (Index t = 0; t < trials; ++t) {
      const Dtype dtype = t % 2 == 0 ? Dtype::kFloat64 : Dtype::kFloat32;
      const EmbeddingSet s = random_set(rng, dtype);
      auto bytes = encode_kemb(s, dtype);
      const EmbeddingSet back = decode_kemb(bytes);
      const bool same = back.data.rows() == s.data.rows() && back.data.cols() == s.data.cols() &&
                        std::memcmp(back.data.data(), s.data.data(), sizeof(double) * s.data.size()) == 0 &&
                        back.labels == s.labels && back.ids == s.ids && back.meta == s.meta;
      exact += same ? 1 : 0;

      // One corrupted byte in the value block, which is what the CRC covers.
      const auto span = static_cast<std::uint64_t>(s.data.size()) * (dtype == Dtype::kFloat32 ? 4 : 8);
      const auto at = kKembHeaderBytes + uniform_below(rng, span);
      bytes[at] ^= static_cast<std::uint8_t>(1 + uniform_below(rng, 255));
      try {
        decode_kemb(bytes);
      } catch (const FormatError&) {
        ++detected;
      }
    }
  });
  report("format", exact == trials && detected == trials,
         fmt("%td/%td round trips bit-exact, %td/%td payload corruptions detected, %.2fs", exact, trials, detected,
             trials, secs));
}

void baseline(const TrainConfig& config) {
  synth::CorpusOptions o;
  o.seed = 0;
  const PairedEmbeddings paired = synth::nonlinear_corpus(o);
  const KernelSpec k1_base = config.k1_init.resolve(paired.source.dim());
  const KernelSpec k2 = config.k2_spec.resolve(paired.target.dim());
  const TrainReport r = train(paired, config);
  const double identity = kernel_discrepancy(paired, initial_params(paired, config), k1_base, k2).value;
  const double kernel = kernel_discrepancy(paired, r.final_params, k1_base, k2).value;
  const Matrix p = projection_fit(paired, 0.0);
  const double projection =
      kernel_discrepancy_exact(apply_projection(p, paired.target.data), paired.target.data, k1_base, k2).value;
  report("baseline_kernel_vs_projection", kernel < projection,
         fmt("nonlinear corpus (gain %.1f): identity %.6f, projection %.6f, kernel alignment %.6f", o.gain, identity,
             projection, kernel));
}

}  // namespace

int main(int argc, char** argv) {
  const std::string config_path = argc > 1 ? argv[1] : std::string(KALIGN_SOURCE_DIR) + "/configs/e2e.json";
  try {
    const TrainConfig config = e2e_config(config_path);
    Scratch scratch;
    kernel_correctness();
    gradient_exactness();
    drift_bound();
    gradient_concentration();
    end_to_end(config);
    determinism(config_path, scratch);
    format_round_trip();
    baseline(config);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance: unexpected error: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
