#include "kalign/trainer.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <string>

namespace kalign {
namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
std::span<const double> cspan_of(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
std::span<const double> cspan_of(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace

KernelSpec KernelSetting::resolve(Index dim) const {
  KernelSpec k = spec;
  if (auto_gamma) k.gamma = 1.0 / static_cast<double>(dim);
  k.validate();
  return k;
}

void to_json(nlohmann::json& j, const KernelSetting& s) {
  j = s.spec;
  if (s.auto_gamma) j["gamma"] = "auto";
}

void from_json(const nlohmann::json& j, KernelSetting& s) {
  nlohmann::json copy = j;
  s.auto_gamma = !copy.contains("gamma") || copy.at("gamma").is_string();
  if (s.auto_gamma) {
    if (copy.contains("gamma") && copy.at("gamma").get<std::string>() != "auto") {
      throw ConfigError("kernel gamma must be a number or \"auto\"");
    }
    copy["gamma"] = 1.0;
  }
  s.spec = copy.get<KernelSpec>();
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (!(w > 0.0) || !std::isfinite(w)) fail("w must be > 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) fail("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) fail("beta2 must lie in (0, 1)");
  if (!(eps > 0.0)) fail("eps must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  k1_init.resolve(1);
  k2_spec.resolve(1);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"w", c.w},
      {"lr", c.lr},
      {"weight_decay", c.weight_decay},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"eps", c.eps},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"warmup_steps", c.warmup_steps},
      {"scheduler", c.scheduler == Scheduler::kCosine ? "cosine" : "constant"},
      {"seed", c.seed},
      {"objective", c.objective == ObjectiveKind::kKernel ? "kernel" : "feature"},
      {"k2_spec", c.k2_spec},
      {"k1_init", c.k1_init},
  };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known = {
      "w",      "lr",           "weight_decay", "beta1", "beta2",     "eps",     "batch_size",
      "epochs", "warmup_steps", "scheduler",    "seed",  "objective", "k2_spec", "k1_init"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown field \"" + key + "\"");
  }
  c = TrainConfig{};
  try {
    read_opt(j, "w", c.w);
    read_opt(j, "lr", c.lr);
    read_opt(j, "weight_decay", c.weight_decay);
    read_opt(j, "beta1", c.beta1);
    read_opt(j, "beta2", c.beta2);
    read_opt(j, "eps", c.eps);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "warmup_steps", c.warmup_steps);
    read_opt(j, "seed", c.seed);
    if (j.contains("scheduler")) {
      const auto s = j.at("scheduler").get<std::string>();
      if (s == "cosine") c.scheduler = Scheduler::kCosine;
      else if (s == "constant") c.scheduler = Scheduler::kConstant;
      else throw ConfigError("config: unknown scheduler \"" + s + "\"");
    }
    if (j.contains("objective")) {
      const auto s = j.at("objective").get<std::string>();
      if (s == "kernel") c.objective = ObjectiveKind::kKernel;
      else if (s == "feature") c.objective = ObjectiveKind::kFeature;
      else throw ConfigError("config: unknown objective \"" + s + "\"");
    }
    read_opt(j, "k2_spec", c.k2_spec);
    read_opt(j, "k1_init", c.k1_init);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
}

double lr_at(const TrainConfig& config, Index step, Index total_steps) {
  if (total_steps <= config.warmup_steps) {
    throw ConfigError("total_steps (" + std::to_string(total_steps) + ") must exceed warmup_steps (" +
                      std::to_string(config.warmup_steps) + ")");
  }
  if (step < 0 || step > total_steps) throw ConfigError("lr_at: step out of range");
  if (step < config.warmup_steps) {
    return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  if (config.scheduler == Scheduler::kConstant) return config.lr;
  const double progress = static_cast<double>(step - config.warmup_steps) /
                          static_cast<double>(total_steps - config.warmup_steps);
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState AdamState::zeros(Index dim) {
  return {AdamMoments::zeros(dim * dim), AdamMoments::zeros(dim), AdamMoments::zeros(1),
          AdamMoments::zeros(1)};
}

void adamw_update(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
                  Index t, double lr_now, const TrainConfig& config, bool decay) {
  if (t < 1) throw ConfigError("adamw step index must be >= 1");
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  const double shrink = decay ? 1.0 - lr_now * config.weight_decay : 1.0;
  for (std::size_t k = 0; k < param.size(); ++k) {
    const double g = grad[k];
    double& m = moments.m[static_cast<Index>(k)];
    double& v = moments.v[static_cast<Index>(k)];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    param[k] = param[k] * shrink - lr_now * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

void adamw_step(AdapterParams& params, const GradientBundle& grads, AdamState& state, Index t,
                double lr_now, const TrainConfig& config) {
  if (grads.dW.rows() != params.dim() || grads.db.size() != params.dim()) {
    throw ConfigError("adamw_step: gradient shape mismatch");
  }
  AdapterParams next = params;
  adamw_update(span_of(next.W), cspan_of(grads.dW), state.W, t, lr_now, config, true);
  adamw_update(span_of(next.b), cspan_of(grads.db), state.b, t, lr_now, config, true);
  adamw_update({&next.log_gamma, 1}, {&grads.dlog_gamma, 1}, state.log_gamma, t, lr_now, config,
               false);
  adamw_update({&next.coef0, 1}, {&grads.dcoef0, 1}, state.coef0, t, lr_now, config, false);
  next.coef0 = std::max(next.coef0, 0.0);
  if (!next.W.allFinite()) throw NumericalError("non-finite update in block W");
  if (!next.b.allFinite()) throw NumericalError("non-finite update in block b");
  if (!std::isfinite(next.log_gamma)) throw NumericalError("non-finite update in block log_gamma");
  if (!std::isfinite(next.coef0)) throw NumericalError("non-finite update in block coef0");
  params = std::move(next);
}

nlohmann::json to_json_line(const StepRecord& r) {
  return nlohmann::json{{"step", r.step},
                        {"alignment", r.loss.alignment},
                        {"regularization", r.loss.regularization},
                        {"total", r.loss.total},
                        {"lr", r.lr},
                        {"gamma", r.gamma},
                        {"coef0", r.coef0}};
}

AdapterParams initial_params(const PairedEmbeddings& paired, const TrainConfig& config) {
  const KernelSpec k1 = config.k1_init.resolve(paired.source.dim());
  return AdapterParams::identity(paired.source.dim(), k1.gamma,
                                 k1.family == KernelFamily::kPolynomial ? k1.coef0 : 0.0);
}

TrainReport train(const PairedEmbeddings& paired, const TrainConfig& config,
                  const StepObserver& observer) {
  config.validate();
  const Index n = paired.rows();
  if (n < 2) throw DataError("training needs at least 2 rows");

  TrainReport report;
  report.config = config;
  report.k2 = config.k2_spec.resolve(paired.target.dim());
  const KernelSpec k1_base = config.k1_init.resolve(paired.source.dim());
  report.steps_per_epoch = (n + 2 * config.batch_size - 1) / (2 * config.batch_size);
  const Index total_steps = config.epochs * report.steps_per_epoch;
  if (total_steps <= config.warmup_steps) {
    throw ConfigError("config: warmup_steps must be smaller than the " + std::to_string(total_steps) +
                      " training steps");
  }

  AdapterParams params = initial_params(paired, config);
  AdamState state = AdamState::zeros(params.dim());
  Matrix feature_map;
  AdamMoments feature_moments;
  if (config.objective == ObjectiveKind::kFeature) {
    feature_map = Matrix::Zero(paired.source.dim(), paired.target.dim());
    feature_moments = AdamMoments::zeros(feature_map.size());
  }

  Rng rng(config.seed);
  Index step = 0;
  auto finish = [&] {
    report.final_params = params;
    report.wall_steps = static_cast<Index>(report.history.size());
    report.k1 = params.source_kernel(k1_base);
    if (config.objective == ObjectiveKind::kFeature) report.final_feature_map = feature_map;
  };

  try {
    for (Index epoch = 0; epoch < config.epochs; ++epoch) {
      const auto batches = epoch_pair_batches(n, config.batch_size, rng);
      for (const auto& batch : batches) {
        const double lr_now = lr_at(config, step, total_steps);
        StepRecord rec;
        rec.step = step;
        rec.lr = lr_now;
        rec.gamma = params.gamma();
        rec.coef0 = params.coef0;
        if (config.objective == ObjectiveKind::kKernel) {
          const LossAndGrad lg =
              total_loss_and_grad(params, paired, batch, config.w, k1_base, report.k2);
          rec.loss = lg.loss;
          adamw_step(params, lg.grad, state, step + 1, lr_now, config);
        } else {
          const auto rows = batch.rows();
          const FeatureLossAndGrad lg =
              feature_alignment_loss_and_grad(params, feature_map, paired, rows, config.w);
          rec.loss = lg.loss;
          GradientBundle g{lg.dW, lg.db, 0.0, 0.0};
          adamw_step(params, g, state, step + 1, lr_now, config);
          adamw_update(span_of(feature_map), cspan_of(lg.dR), feature_moments, step + 1, lr_now,
                       config, true);
          if (!feature_map.allFinite()) throw NumericalError("non-finite update in block R");
        }
        report.history.push_back(rec);
        if (observer) observer(rec, params);
        ++step;
      }
    }
  } catch (const Error& e) {
    finish();
    throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + e.what(),
                          std::move(report));
  }
  finish();
  return report;
}

}  // namespace kalign
