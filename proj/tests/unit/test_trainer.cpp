#include <cmath>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "kalign/parallel.hpp"
#include "kalign/synthetic.hpp"
#include "kalign/trainer.hpp"
#include "test_support.hpp"

using namespace kalign;

namespace {

PairedEmbeddings tiny_corpus(Index n = 32) {
  synth::CorpusOptions o;
  o.n = n;
  o.dim = 6;
  o.rank = 3;
  o.seed = 4;
  return synth::detail_loss_corpus(o);
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.lr = 0.1;
  c.warmup_steps = 10;
  CHECK(lr_at(c, 0, 110) == 0.0);
  CHECK(lr_at(c, 5, 110) == doctest::Approx(0.05));
  CHECK(lr_at(c, 10, 110) == doctest::Approx(0.1));
  CHECK(lr_at(c, 60, 110) == doctest::Approx(0.05));
  CHECK(lr_at(c, 110, 110) == doctest::Approx(0.0).scale(1.0));
  CHECK(lr_at(c, 35, 110) == doctest::Approx(0.05 * (1.0 + std::cos(std::numbers::pi / 4))));
  c.scheduler = Scheduler::kConstant;
  CHECK(lr_at(c, 77, 110) == 0.1);
  CHECK_THROWS_AS(lr_at(c, 0, 10), ConfigError);
  CHECK_THROWS_AS(lr_at(c, 111, 110), ConfigError);
}

TEST_CASE("first AdamW step has the closed form") {
  TrainConfig c;
  c.weight_decay = 0.01;
  const double lr = 0.1;
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g{0.3, -1e-3, 0.0};
  AdamMoments m = AdamMoments::zeros(3);
  adamw_update(p, g, m, 1, lr, c, true);
  const double shrink = 1.0 - lr * c.weight_decay;
  CHECK(p[0] == doctest::Approx(1.0 * shrink - lr * 0.3 / (0.3 + c.eps)).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(-2.0 * shrink + lr * 1e-3 / (1e-3 + c.eps)).epsilon(1e-14));
  CHECK(p[2] == doctest::Approx(0.5 * shrink).epsilon(1e-14));

  // Second step against a hand recursion, no decay.
  std::vector<double> q{1.0};
  AdamMoments mq = AdamMoments::zeros(1);
  adamw_update(q, std::vector<double>{2.0}, mq, 1, lr, c, false);
  adamw_update(q, std::vector<double>{-1.0}, mq, 2, lr, c, false);
  const double m2 = 0.9 * 0.1 * 2.0 + 0.1 * -1.0;
  const double v2 = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
  const double m_hat = m2 / (1.0 - 0.81);
  const double v_hat = v2 / (1.0 - 0.999 * 0.999);
  const double q1 = 1.0 - lr * 2.0 / (2.0 + c.eps);
  CHECK(q[0] == doctest::Approx(q1 - lr * m_hat / (std::sqrt(v_hat) + c.eps)).epsilon(1e-13));
  CHECK_THROWS_AS(adamw_update(q, std::vector<double>{1.0}, mq, 0, lr, c, false), ConfigError);
}

TEST_CASE("adamw_step decays W and b only and keeps coef0 non-negative") {
  TrainConfig c;
  c.weight_decay = 0.5;
  AdapterParams p = AdapterParams::identity(2, 1.0, 1e-4);
  p.W.setConstant(1.0);
  p.b.setConstant(1.0);
  GradientBundle g = GradientBundle::zeros(2);
  g.dcoef0 = 1.0;  // pushes coef0 below zero
  AdamState s = AdamState::zeros(2);
  adamw_step(p, g, s, 1, 0.1, c);
  CHECK(p.W(0, 0) == doctest::Approx(0.95));
  CHECK(p.b[1] == doctest::Approx(0.95));
  CHECK(p.log_gamma == 0.0);
  CHECK(p.coef0 == 0.0);
}

TEST_CASE("config round trips and rejects bad input") {
  TrainConfig c;
  c.w = 1.0;
  c.lr = 3e-4;
  c.batch_size = 16;
  c.scheduler = Scheduler::kConstant;
  c.objective = ObjectiveKind::kFeature;
  c.k2_spec.spec = KernelSpec::gaussian(0.5);
  c.k2_spec.auto_gamma = false;
  const nlohmann::json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.k1_init.auto_gamma);
  CHECK(back.k2_spec.resolve(8).gamma == 0.5);
  CHECK(back.k1_init.resolve(8).gamma == 0.125);

  auto parse = [](const char* text) { return nlohmann::json::parse(text).get<TrainConfig>(); };
  CHECK(parse("{}").lr == TrainConfig{}.lr);
  CHECK_THROWS_AS(parse(R"({"learning_rate": 1})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"w": 0})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"batch_size": 0})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"scheduler": "step"})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"lr": "fast"})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"k1_init": {"family": "polynomial", "gamma": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse("[1, 2]"), ConfigError);
}

TEST_CASE("step accounting") {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 1;
  const TrainReport r = train(tiny_corpus(32), c);
  CHECK(r.steps_per_epoch == 4);
  CHECK(r.history.size() == 4);
  for (Index i = 0; i < 4; ++i) CHECK(r.history[i].step == i);

  c.epochs = 3;
  c.batch_size = 5;  // 2B = 10 does not divide 32
  CHECK(train(tiny_corpus(32), c).history.size() == 12);

  c.warmup_steps = 12;
  CHECK_THROWS_AS(train(tiny_corpus(32), c), ConfigError);
}

TEST_CASE("training lowers the alignment term and is reproducible") {
  TrainConfig c;
  c.batch_size = 8;
  c.epochs = 40;
  c.lr = 5e-3;
  const PairedEmbeddings data = tiny_corpus(64);
  set_num_threads(1);
  const TrainReport a = train(data, c);
  set_num_threads(3);
  const TrainReport b = train(data, c);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(to_json_line(a.history[i]).dump() == to_json_line(b.history[i]).dump());
  }
  CHECK(a.final_params.W == b.final_params.W);

  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 20; ++i) {
    head += a.history[static_cast<std::size_t>(i)].loss.alignment;
    tail += a.history[a.history.size() - 1 - static_cast<std::size_t>(i)].loss.alignment;
  }
  CHECK(tail < head);

  c.seed = 1;
  CHECK(train(data, c).final_params.W != a.final_params.W);
}

TEST_CASE("feature objective trains the map R as well") {
  TrainConfig c;
  c.objective = ObjectiveKind::kFeature;
  c.batch_size = 8;
  c.epochs = 30;
  c.lr = 1e-2;
  const TrainReport r = train(tiny_corpus(64), c);
  REQUIRE(r.final_feature_map);
  CHECK(r.final_feature_map->rows() == 6);
  CHECK(r.final_feature_map->norm() > 0.0);
  CHECK(r.history.back().loss.alignment < r.history.front().loss.alignment);
}

TEST_CASE("a failing step aborts with the partial history") {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 1;
  int calls = 0;
  auto observer = [&](const StepRecord&, const AdapterParams&) {
    if (++calls == 3) throw NumericalError("injected");
  };
  try {
    train(tiny_corpus(32), c, observer);
    FAIL("expected abort");
  } catch (const TrainingAborted& e) {
    CHECK(e.partial().history.size() == 3);
    CHECK(std::string(e.what()).find("injected") != std::string::npos);
  }
}

TEST_CASE("log line fields") {
  StepRecord r;
  r.step = 7;
  r.loss = {0.25, 0.5, 0.625, 0.5};
  r.lr = 1e-3;
  r.gamma = 0.1;
  r.coef0 = 1.0;
  const auto j = to_json_line(r);
  for (const char* key : {"step", "alignment", "regularization", "total", "lr", "gamma", "coef0"}) {
    CHECK(j.contains(key));
  }
  CHECK(j.size() == 7);
  CHECK(j["step"] == 7);
}

TEST_CASE("desk-scale run: alignment halves and drift grows with w") {
  synth::CorpusOptions o;  // 256 x 16
  const PairedEmbeddings data = synth::detail_loss_corpus(o);
  TrainConfig c;
  c.lr = 5e-3;
  c.batch_size = 128;
  c.epochs = 200;
  c.warmup_steps = 14;

  const TrainReport r = train(data, c);
  const KernelSpec k1 = c.k1_init.resolve(16);
  const KernelSpec k2 = c.k2_spec.resolve(16);
  PairBatch every;
  for (Index i = 0; i < data.rows(); ++i) {
    for (Index j = i + 1; j < data.rows(); ++j) every.pairs.emplace_back(i, j);
  }
  const double before = alignment_loss(initial_params(data, c), data, every, k1, k2);
  const double after = alignment_loss(r.final_params, data, every, k1, k2);
  CHECK(after <= 0.5 * before);

  double last = 0.0;
  for (double w : {0.1, 0.5, 1.0, 5.0, 10.0}) {
    c.w = w;
    const auto d = drift(train(data, c).final_params, data.source.data);
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    CHECK(std::isfinite(mean));
    CHECK(mean > last);
    last = mean;
  }
}
