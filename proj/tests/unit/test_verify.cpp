#include <cmath>
#include <set>

#include "doctest.h"
#include "kalign/error.hpp"
#include "kalign/parallel.hpp"
#include "kalign/synthetic.hpp"
#include "kalign/verify.hpp"
#include "test_support.hpp"

using namespace kalign;

TEST_CASE("gradient error has a relative form with an absolute floor") {
  CHECK(verify::gradient_error(1.0, 1.0) == 0.0);
  CHECK(verify::gradient_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(verify::gradient_error(-1.0, 1.0) == doctest::Approx(2.0));
  // Below the floor the denominator is 1e-3.
  CHECK(verify::gradient_error(1e-9, 0.0) == doctest::Approx(1e-6));
  CHECK(verify::gradient_error(0.0, 0.0) == 0.0);
}

TEST_CASE("gradient audit passes and catches an injected fault") {
  verify::GradientAuditOptions o;
  o.trials = 12;
  o.seed = 3;
  const auto ok = verify::gradient_audit(o);
  CHECK(ok.pass);
  CHECK(ok.worst_error < 1e-6);
  CHECK(ok.coordinates > 200);
  std::set<std::string> names;
  for (const auto& b : ok.blocks) names.insert(b.block);
  for (const char* name : {"W", "b", "log_gamma", "coef0", "feature_W", "feature_b", "feature_R"}) {
    CHECK(names.contains(name));
  }

  o.fault = 1e-3;
  const auto bad = verify::gradient_audit(o);
  CHECK_FALSE(bad.pass);
  for (const auto& b : bad.blocks) CHECK(b.pass == (b.block != "W"));

  // Thread count does not change the result.
  o.fault = 0.0;
  set_num_threads(1);
  const auto one = verify::gradient_audit(o);
  set_num_threads(3);
  CHECK(verify::gradient_audit(o).to_json() == one.to_json());
}

TEST_CASE("gradient audit with fixed kernels") {
  verify::GradientAuditOptions o;
  o.trials = 6;
  o.k1 = KernelSpec::polynomial(0.3, 0.5, 2, false);
  o.k2 = KernelSpec::cosine();
  o.include_feature = false;
  const auto r = verify::gradient_audit(o);
  CHECK(r.pass);
  for (const auto& b : r.blocks) CHECK(b.block.rfind("feature", 0) != 0);
}

TEST_CASE("cosine drift bound audit") {
  verify::Prop2Options o;
  o.trials = 5000;
  o.seed = 11;
  const auto r = verify::prop2_audit(o);
  CHECK(r.pass());
  CHECK(r.trials == 5000);
  CHECK(r.zero_drift_trials == 500);
  CHECK(r.stress_trials == 500);
  CHECK(r.worst_ratio <= 1.0);
  CHECK(r.worst_ratio > 0.0);
}

TEST_CASE("mini-batch gradient deviation shrinks like one over root M") {
  verify::ConcentrationOptions o;
  o.repeats = 100;
  o.loss_batches = 2000;
  const auto r = verify::default_concentration(o);
  CHECK_FALSE(r.degenerate);
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows.front().mean_deviation > r.rows.back().mean_deviation);
  CHECK(r.slope_pass);
  CHECK(r.slope > -0.65);
  CHECK(r.slope < -0.35);
  CHECK(r.loss_pass);
  CHECK(std::abs(r.batch_loss_mean - r.exact_loss) <= 3.0 * r.batch_loss_se);
}

TEST_CASE("aligned spaces have a zero gradient and are reported as degenerate") {
  synth::CorpusOptions c;
  c.n = 20;
  c.dim = 4;
  c.rank = 2;
  PairedEmbeddings p = synth::detail_loss_corpus(c);
  p.target = p.source;
  const KernelSpec k = KernelSpec::polynomial(0.25, 1.0, 3, true);
  const auto params = AdapterParams::identity(4, 0.25, 1.0);
  verify::ConcentrationOptions o;
  o.repeats = 100;
  o.loss_batches = 200;
  const auto r = verify::concentration_experiment(p, params, k, k, o);
  CHECK(r.degenerate);
  CHECK(r.pass());
  CHECK(r.exact_gradient_norm <= 1e-12);

  o.repeats = 10;
  CHECK_THROWS_AS(verify::concentration_experiment(p, params, k, k, o), ConfigError);
}

TEST_CASE("kernel audit over fixed and random specs") {
  std::vector<KernelSpec> specs{KernelSpec::polynomial(0.125, 1.0, 3, true), KernelSpec::gaussian(0.125),
                                KernelSpec::cosine()};
  Rng rng(12);
  for (int i = 0; i < 20; ++i) specs.push_back(verify::random_kernel_spec(rng, 8));
  const auto rows = verify::kernel_audit(specs, 4, 200);
  REQUIRE(rows.size() == specs.size());
  for (const auto& r : rows) {
    CHECK(r.pass());
    CHECK(r.draws == 200);
    if (r.spec.bounded()) CHECK(r.max_abs_value <= 1.0 + 1e-12);
  }
  CHECK(verify::to_json(rows).size() == rows.size());
}

TEST_CASE("run_all gates") {
  verify::VerifyOptions o;
  o.gradient_trials = 5;
  o.prop2_trials = 2000;
  o.concentration_repeats = 100;
  const auto r = verify::run_all(o);
  CHECK(r.pass());
  const auto j = r.to_json();
  for (const char* key : {"gradient_audit", "concentration", "prop2_audit", "kernel_audit", "pass"}) CHECK(j.contains(key));
  o.gradient_fault = 1e-2;
  CHECK_FALSE(verify::run_all(o).pass());
}
