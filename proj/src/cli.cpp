#include "kalign/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "kalign/adapter.hpp"
#include "kalign/detail/binary_io.hpp"
#include "kalign/embedding_store.hpp"
#include "kalign/error.hpp"
#include "kalign/eval.hpp"
#include "kalign/parallel.hpp"
#include "kalign/synthetic.hpp"
#include "kalign/trainer.hpp"
#include "kalign/verify.hpp"

namespace kalign {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  return 2;
}

void apply_threads(int threads) {
  if (threads > 0) {
    set_num_threads(threads);
    return;
  }
  if (const char* env = std::getenv("KALIGN_THREADS"); env && *env) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError("KALIGN_THREADS must be a positive integer");
    set_num_threads(static_cast<int>(n));
  }
}

std::string crc_hex(std::uint32_t crc) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc;
  return os.str();
}

std::string file_crc(const fs::path& p) { return crc_hex(detail::crc32(detail::read_file(p))); }

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
  if (!os) throw DataError("write failed: " + p.string());
}

std::string require_flag(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
  return value;
}

AdapterParams adapter_or_identity(const std::string& path, Index dim, const KernelSpec& k1) {
  if (path.empty()) {
    return AdapterParams::identity(dim, k1.gamma, k1.family == KernelFamily::kPolynomial ? k1.coef0 : 0.0);
  }
  AdapterParams p = load_adapter(path);
  if (p.dim() != dim) {
    throw ConfigError("adapter dim " + std::to_string(p.dim()) + " != embedding dim " + std::to_string(dim));
  }
  return p;
}

TrainConfig config_or_default(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  return read_json_file(path).get<TrainConfig>();
}

void emit(const EvalReport& report, const std::string& format, const std::string& out_path,
          std::ostream& out) {
  std::string text;
  if (format == "json") text = report.to_json().dump(2) + "\n";
  else text = report.to_csv();
  if (out_path.empty()) out << text;
  else write_text(out_path, text);
}

// ---- train ----

struct TrainArgs {
  std::string source, target, config, out, manifest;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  Index checkpoint_every = 0;
};

int command_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig config;
  std::string source = a.source, target = a.target;
  Index checkpoint_every = a.checkpoint_every;
  std::optional<json> manifest;
  if (!a.manifest.empty()) {
    manifest = read_json_file(a.manifest);
    try {
      config = manifest->at("config").get<TrainConfig>();
      if (source.empty()) source = manifest->at("source").at("path").get<std::string>();
      if (target.empty()) target = manifest->at("target").at("path").get<std::string>();
      if (checkpoint_every == 0) checkpoint_every = manifest->value("checkpoint_every", Index{0});
    } catch (const json::exception& e) {
      throw ConfigError("manifest: " + std::string(e.what()));
    }
  } else {
    config = config_or_default(a.config);
  }
  require_flag(source, "--source");
  require_flag(target, "--target");
  require_flag(a.out, "--out");
  if (a.seed) config.seed = *a.seed;
  if (checkpoint_every < 0) throw ConfigError("--checkpoint-every must be >= 0");

  const std::string source_crc = file_crc(source);
  const std::string target_crc = file_crc(target);
  if (manifest) {
    if (manifest->at("source").value("crc32", "") != source_crc) {
      throw DataError("source checksum differs from manifest: " + source);
    }
    if (manifest->at("target").value("crc32", "") != target_crc) {
      throw DataError("target checksum differs from manifest: " + target);
    }
  }
  const PairedEmbeddings paired = pair(load(source), load(target));

  const fs::path dir = a.out;
  fs::create_directories(dir);
  if (checkpoint_every > 0) fs::create_directories(dir / "checkpoints");
  json m = {{"version", kVersion},
            {"config", config},
            {"seed", config.seed},
            {"source", {{"path", source}, {"crc32", source_crc}}},
            {"target", {{"path", target}, {"crc32", target_crc}}},
            {"checkpoint_every", checkpoint_every}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");

  std::ofstream log(dir / "train.jsonl", std::ios::binary);
  if (!log) throw DataError("cannot write " + (dir / "train.jsonl").string());
  auto observer = [&](const StepRecord& rec, const AdapterParams& params) {
    log << to_json_line(rec).dump() << '\n';
    const Index done = rec.step + 1;
    if (checkpoint_every > 0 && done % checkpoint_every == 0) {
      std::ostringstream name;
      name << "step_" << std::setw(6) << std::setfill('0') << done << ".kadp";
      save_adapter(params, dir / "checkpoints" / name.str());
    }
  };

  TrainReport report;
  try {
    report = train(paired, config, observer);
  } catch (const TrainingAborted&) {
    log.flush();
    throw;
  }
  log.flush();
  save_adapter(report.final_params, dir / "adapter.kadp");

  const KernelSpec k1_base = config.k1_init.resolve(paired.source.dim());
  const Discrepancy before =
      kernel_discrepancy(paired, initial_params(paired, config), k1_base, report.k2);
  const Discrepancy after = kernel_discrepancy(paired, report.final_params, k1_base, report.k2);
  const auto drifts = drift(report.final_params, paired.source.data);
  const double mean_drift =
      std::accumulate(drifts.begin(), drifts.end(), 0.0) / static_cast<double>(drifts.size());
  json r = {{"steps", report.wall_steps},
            {"steps_per_epoch", report.steps_per_epoch},
            {"final_loss", report.history.empty() ? json(nullptr) : json(report.history.back().loss)},
            {"k1", report.k1},
            {"k2", report.k2},
            {"discrepancy_identity", before.value},
            {"discrepancy_trained", after.value},
            {"discrepancy_exact", after.exact},
            {"mean_drift", mean_drift}};
  write_text(dir / "report.json", r.dump(2) + "\n");
  out << "trained " << report.wall_steps << " steps; discrepancy " << before.value << " -> "
      << after.value << "; outputs in " << dir.string() << "\n";
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string source, target, anchors, gallery, train, test, adapter, config, out;
  std::string format = "json";
  std::vector<Index> ks{1, 5, 10};
  bool multilabel = false;
  double l2 = 1e-4;
  int threads = 0;
};

KernelSpec eval_k1_base(const TrainConfig& c, Index dim) { return c.k1_init.resolve(dim); }

int eval_zeroshot(const EvalArgs& a, std::ostream& out) {
  const EmbeddingSet set = load(require_flag(a.source, "--source"));
  const ClassAnchors anchors = ClassAnchors::from_set(load(require_flag(a.anchors, "--anchors")));
  const TrainConfig c = config_or_default(a.config);
  const AdapterParams p = adapter_or_identity(a.adapter, set.dim(), eval_k1_base(c, set.dim()));
  const ZeroShotResult r =
      zero_shot_classify(forward_batch(p, set.data), anchors, set.labels ? &*set.labels : nullptr);
  EvalReport report;
  report.metrics["accuracy"] = r.accuracy;
  report.metrics["n"] = static_cast<double>(set.rows());
  report.class_names = anchors.names;
  for (std::size_t k = 0; k < r.per_class_accuracy.size(); ++k) {
    report.per_class.push_back({{"accuracy", r.per_class_accuracy[k]},
                                {"count", static_cast<double>(r.per_class_count[k])}});
  }
  report.config = {{"command", "zeroshot"}, {"adapter", a.adapter.empty() ? "identity" : a.adapter}};
  emit(report, a.format, a.out, out);
  return 0;
}

int eval_retrieval(const EvalArgs& a, std::ostream& out) {
  const EmbeddingSet q = load(require_flag(a.source, "--source"));
  const EmbeddingSet g = load(require_flag(a.gallery, "--gallery"));
  const TrainConfig c = config_or_default(a.config);
  const AdapterParams p = adapter_or_identity(a.adapter, q.dim(), eval_k1_base(c, q.dim()));
  const auto recall = retrieval(forward_batch(p, q.data), g.data, a.ks);
  EvalReport report;
  for (const auto& [k, v] : recall) report.metrics["R@" + std::to_string(k)] = v;
  report.config = {{"command", "retrieval"}, {"adapter", a.adapter.empty() ? "identity" : a.adapter}};
  emit(report, a.format, a.out, out);
  return 0;
}

int eval_probe(const EvalArgs& a, std::ostream& out) {
  EmbeddingSet tr = load(require_flag(a.train, "--train"));
  EmbeddingSet te = load(require_flag(a.test, "--test"));
  const TrainConfig c = config_or_default(a.config);
  const AdapterParams p = adapter_or_identity(a.adapter, tr.dim(), eval_k1_base(c, tr.dim()));
  tr.data = forward_batch(p, tr.data);
  te.data = forward_batch(p, te.data);
  ProbeOptions opts;
  opts.multilabel = a.multilabel;
  opts.l2 = a.l2;
  const ProbeResult r = linear_probe(tr, te, opts);
  EvalReport report;
  report.metrics["test_accuracy"] = r.test_accuracy;
  if (a.multilabel) report.metrics["macro_recall"] = r.macro_recall;
  report.metrics["steps"] = static_cast<double>(r.steps);
  report.metrics["final_grad_norm"] = r.final_grad_norm;
  report.metrics["converged"] = r.converged ? 1.0 : 0.0;
  report.config = {{"command", "probe"},
                   {"adapter", a.adapter.empty() ? "identity" : a.adapter},
                   {"multilabel", a.multilabel},
                   {"l2", a.l2}};
  emit(report, a.format, a.out, out);
  return 0;
}

int eval_discrepancy(const EvalArgs& a, std::ostream& out) {
  const PairedEmbeddings paired =
      pair(load(require_flag(a.source, "--source")), load(require_flag(a.target, "--target")));
  const TrainConfig c = config_or_default(a.config);
  const KernelSpec k1 = eval_k1_base(c, paired.source.dim());
  const KernelSpec k2 = c.k2_spec.resolve(paired.target.dim());
  const AdapterParams p = adapter_or_identity(a.adapter, paired.source.dim(), k1);
  const Discrepancy d = kernel_discrepancy(paired, p, k1, k2);
  EvalReport report;
  report.metrics["discrepancy"] = d.value;
  report.metrics["standard_error"] = d.standard_error;
  report.metrics["exact"] = d.exact ? 1.0 : 0.0;
  report.metrics["pairs"] = static_cast<double>(d.pairs);
  report.config = {{"command", "discrepancy"},
                   {"adapter", a.adapter.empty() ? "identity" : a.adapter},
                   {"k1", p.source_kernel(k1)},
                   {"k2", k2}};
  emit(report, a.format, a.out, out);
  return 0;
}

int eval_drift(const EvalArgs& a, std::ostream& out) {
  const EmbeddingSet set = load(require_flag(a.source, "--source"));
  const ClassAnchors anchors = ClassAnchors::from_set(load(require_flag(a.anchors, "--anchors")));
  const TrainConfig c = config_or_default(a.config);
  const AdapterParams p = adapter_or_identity(a.adapter, set.dim(), eval_k1_base(c, set.dim()));
  const auto rows = cosine_drift_report(p, set, anchors);
  double mean_lambda = 0.0, max_change = 0.0, violations = 0.0;
  for (const auto& r : rows) {
    mean_lambda += r.lambda;
    max_change = std::max(max_change, r.max_change);
    violations += r.holds ? 0.0 : 1.0;
  }
  EvalReport report;
  report.metrics["mean_drift"] = rows.empty() ? 0.0 : mean_lambda / static_cast<double>(rows.size());
  report.metrics["max_cosine_change"] = max_change;
  report.metrics["bound_violations"] = violations;
  report.config = {{"command", "drift"}, {"adapter", a.adapter.empty() ? "identity" : a.adapter}};
  emit(report, a.format, a.out, out);
  return violations > 0 ? 1 : 0;
}

// ---- verify ----

struct VerifyArgs {
  std::uint64_t seed = 0;
  Index trials = 0;
  std::string out;
  double fault = 0.0;
  int threads = 0;
};

int command_verify(const VerifyArgs& a, std::ostream& out) {
  verify::VerifyOptions o;
  o.seed = a.seed;
  if (a.trials < 0) throw ConfigError("--trials must be >= 1");
  if (a.trials > 0) {
    o.gradient_trials = a.trials;
    o.prop2_trials = a.trials * 500;
  }
  o.gradient_fault = a.fault;
  const verify::VerifyReport report = verify::run_all(o);
  json j = report.to_json();
  j["seed"] = a.seed;
  j["version"] = kVersion;
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) out << text;
  else write_text(a.out, text);
  return report.pass() ? 0 : 1;
}

// ---- inspect ----

int command_inspect(const std::string& path, std::ostream& out) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() >= 4 && std::string(bytes.begin(), bytes.begin() + 4) == "KADP") {
    const AdapterParams p = decode_kadp(bytes);
    out << "format: KADP v" << kKadpVersion << "\n"
        << "d: " << p.dim() << "\n"
        << "gamma: " << p.gamma() << "\n"
        << "coef0: " << p.coef0 << "\n"
        << "|W|_F: " << p.W.norm() << "\n"
        << "|b|: " << p.b.norm() << "\n"
        << "checksum: ok\n";
    return 0;
  }
  const KembHeader h = read_kemb_header(bytes);
  out << "format: KEMB v" << h.version << "\n"
      << "dtype: " << (h.dtype == Dtype::kFloat32 ? "f32" : "f64") << "\n"
      << "shape: " << h.rows << " x " << h.cols << "\n";
  try {
    const EmbeddingSet set = decode_kemb(bytes);
    out << "labels: " << (set.labels ? "yes" : "no") << "\n"
        << "ids: " << (set.ids ? "yes" : "no") << "\n";
    for (const auto& [k, v] : set.meta) out << "meta." << k << ": " << v << "\n";
    out << "checksum: ok\n";
  } catch (const FormatError& e) {
    if (e.kind() == FormatError::Kind::kCrcMismatch) out << "checksum: MISMATCH\n";
    throw;
  }
  return 0;
}

// ---- synth ----

struct SynthArgs {
  std::string kind = "detail";
  std::string out;
  synth::CorpusOptions corpus;
  Index classes = 5;
};

int command_synth(const SynthArgs& a, std::ostream& out) {
  const fs::path dir = require_flag(a.out, "--out");
  fs::create_directories(dir);
  if (a.kind == "labelled") {
    const synth::LabelledCorpus c = synth::labelled_corpus(a.corpus, a.classes);
    save(c.paired.source, dir / "source.kemb");
    save(c.paired.target, dir / "target.kemb");
    save(c.anchors, dir / "anchors.kemb");
  } else {
    const PairedEmbeddings p =
        a.kind == "nonlinear" ? synth::nonlinear_corpus(a.corpus) : synth::detail_loss_corpus(a.corpus);
    save(p.source, dir / "source.kemb");
    save(p.target, dir / "target.kemb");
  }
  out << "wrote " << a.kind << " corpus (n=" << a.corpus.n << ", d=" << a.corpus.dim << ") to "
      << dir.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Kernel-space embedding alignment toolkit", "kalign"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Fit an adapter on paired embeddings");
  train_cmd->add_option("--source", ta.source, "source KEMB file");
  train_cmd->add_option("--target", ta.target, "target KEMB file");
  train_cmd->add_option("--config", ta.config, "JSON training config");
  train_cmd->add_option("--out", ta.out, "output directory");
  train_cmd->add_option("--manifest", ta.manifest, "rerun from a manifest.json");
  train_cmd->add_option("--seed", ta.seed, "override the config seed");
  train_cmd->add_option("--threads", ta.threads, "thread cap (default: KALIGN_THREADS or all cores)");
  train_cmd->add_option("--checkpoint-every", ta.checkpoint_every, "write a KADP checkpoint every k steps");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate embeddings, optionally through an adapter");
  eval_cmd->require_subcommand(1);
  auto common = [&](CLI::App* c) {
    c->add_option("--adapter", ea.adapter, "KADP adapter (identity when absent)");
    c->add_option("--config", ea.config, "JSON config supplying kernel settings");
    c->add_option("--format", ea.format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
    c->add_option("--out", ea.out, "write the report here instead of stdout");
    c->add_option("--threads", ea.threads, "thread cap");
  };
  auto* zs = eval_cmd->add_subcommand("zeroshot", "Nearest-anchor classification");
  zs->add_option("--source", ea.source, "labelled KEMB embeddings");
  zs->add_option("--anchors", ea.anchors, "KEMB class anchors (ids are class names)");
  common(zs);
  auto* rt = eval_cmd->add_subcommand("retrieval", "Recall@K; gallery row i matches query i");
  rt->add_option("--source", ea.source, "query KEMB embeddings");
  rt->add_option("--gallery", ea.gallery, "gallery KEMB embeddings");
  rt->add_option("--ks", ea.ks, "cut-offs")->delimiter(',');
  common(rt);
  auto* pr = eval_cmd->add_subcommand("probe", "Logistic-regression probe");
  pr->add_option("--train", ea.train, "labelled KEMB training split");
  pr->add_option("--test", ea.test, "labelled KEMB test split");
  pr->add_flag("--multilabel", ea.multilabel, "labels are class bitmasks");
  pr->add_option("--l2", ea.l2, "ridge penalty");
  common(pr);
  auto* dc = eval_cmd->add_subcommand("discrepancy", "All-pairs kernel discrepancy");
  dc->add_option("--source", ea.source, "source KEMB file");
  dc->add_option("--target", ea.target, "target KEMB file");
  common(dc);
  auto* dr = eval_cmd->add_subcommand("drift", "Cosine drift against anchors and its bound");
  dr->add_option("--source", ea.source, "source KEMB file");
  dr->add_option("--anchors", ea.anchors, "KEMB anchors");
  common(dr);

  VerifyArgs va;
  auto* verify_cmd = app.add_subcommand("verify", "Run the numerical audits");
  verify_cmd->add_option("--seed", va.seed, "audit seed");
  verify_cmd->add_option("--trials", va.trials, "quick mode: N gradient trials, 500N drift trials");
  verify_cmd->add_option("--out", va.out, "write the JSON report here instead of stdout");
  verify_cmd->add_option("--fault-inject", va.fault, "perturb one analytic gradient entry");
  verify_cmd->add_option("--threads", va.threads, "thread cap");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print KEMB / KADP header and checksum status");
  inspect_cmd->add_option("file", inspect_path, "KEMB or KADP file")->required();

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic paired corpus");
  synth_cmd->add_option("--kind", sa.kind, "detail, nonlinear or labelled")
      ->check(CLI::IsMember({"detail", "nonlinear", "labelled"}));
  synth_cmd->add_option("--out", sa.out, "output directory");
  synth_cmd->add_option("--n", sa.corpus.n, "rows");
  synth_cmd->add_option("--dim", sa.corpus.dim, "dimension");
  synth_cmd->add_option("--rank", sa.corpus.rank, "projector rank");
  synth_cmd->add_option("--noise", sa.corpus.noise, "source noise scale");
  synth_cmd->add_option("--seed", sa.corpus.seed, "corpus seed");
  synth_cmd->add_option("--gain", sa.corpus.gain, "squash gain (nonlinear kind)");
  synth_cmd->add_option("--classes", sa.classes, "classes (labelled kind)");

  if (!args.empty() && !args[0].starts_with("-")) {
    const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
    const bool known = std::any_of(subs.begin(), subs.end(),
                                   [&](const CLI::App* s) { return s->get_name() == args[0]; });
    if (!known) {
      err << "error: unknown subcommand '" << args[0] << "'\n" << app.help();
      return 2;
    }
  }

  std::vector<std::string> full{"kalign"};
  full.insert(full.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : full) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (eval_cmd->parsed()) err << eval_cmd->help();
    else err << app.help();
    return 2;
  }

  try {
    if (train_cmd->parsed()) {
      apply_threads(ta.threads);
      return command_train(ta, out);
    }
    if (eval_cmd->parsed()) {
      apply_threads(ea.threads);
      if (zs->parsed()) return eval_zeroshot(ea, out);
      if (rt->parsed()) return eval_retrieval(ea, out);
      if (pr->parsed()) return eval_probe(ea, out);
      if (dc->parsed()) return eval_discrepancy(ea, out);
      return eval_drift(ea, out);
    }
    if (verify_cmd->parsed()) {
      apply_threads(va.threads);
      return command_verify(va, out);
    }
    if (inspect_cmd->parsed()) return command_inspect(inspect_path, out);
    apply_threads(0);
    return command_synth(sa, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace kalign
