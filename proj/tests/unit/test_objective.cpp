#include <cmath>

#include "doctest.h"
#include "kalign/error.hpp"
#include "kalign/objective.hpp"
#include "kalign/parallel.hpp"
#include "test_support.hpp"

using namespace kalign;
using kalign::testing::random_matrix;

namespace {

struct Fixture {
  PairedEmbeddings paired;
  AdapterParams params;
  PairBatch batch;
};

Fixture make_fixture(std::uint64_t seed, Index n = 10, Index d = 4, Index dt = 3) {
  Rng rng(seed);
  Fixture f;
  EmbeddingSet s, t;
  s.data = random_matrix(n, d, rng);
  t.data = random_matrix(n, dt, rng);
  f.paired = pair(s, t);
  f.params = AdapterParams::identity(d, 0.3, 0.9);
  f.params.W = random_matrix(d, d, rng, 0.2);
  f.params.b = random_matrix(d, 1, rng, 0.2).col(0);
  f.batch = sample_pair_batch(f.paired, n / 2, rng);
  return f;
}

// The objective written out directly from its definition, for finite differences.
double direct_objective(const AdapterParams& p, const Fixture& f, double w, const KernelSpec& k1_base,
                        const KernelSpec& k2) {
  KernelSpec k1 = k1_base;
  if (k1.family == KernelFamily::kPolynomial) {
    k1.gamma = std::exp(p.log_gamma);
    k1.coef0 = p.coef0;
  }
  auto map = [&](Index i) {
    const Vector x = f.paired.source.data.row(i).transpose();
    return Vector(x + p.W * x + p.b);
  };
  double align = 0.0, reg = 0.0;
  for (auto [i, j] : f.batch.pairs) {
    const Vector ui = map(i), uj = map(j);
    const double r = eval(k1, vec_span(ui), vec_span(uj)) -
                     eval(k2, row_span(f.paired.target.data, i), row_span(f.paired.target.data, j));
    align += r * r;
    reg += (ui - f.paired.source.data.row(i).transpose()).squaredNorm();
    reg += (uj - f.paired.source.data.row(j).transpose()).squaredNorm();
  }
  const double nb = static_cast<double>(f.batch.batch_size());
  return w * align / nb + reg / (2.0 * nb);
}

void check_against_fd(const Fixture& f, double w, const KernelSpec& k1, const KernelSpec& k2) {
  const LossAndGrad lg = total_loss_and_grad(f.params, f.paired, f.batch, w, k1, k2);
  CHECK(lg.loss.total == doctest::Approx(direct_objective(f.params, f, w, k1, k2)).epsilon(1e-12));
  const double h = 1e-6;
  auto fd = [&](auto&& poke) {
    AdapterParams a = f.params, b = f.params;
    poke(a, h);
    poke(b, -h);
    return (direct_objective(a, f, w, k1, k2) - direct_objective(b, f, w, k1, k2)) / (2 * h);
  };
  const Index d = f.params.dim();
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c < d; ++c) {
      CHECK(lg.grad.dW(r, c) ==
            doctest::Approx(fd([&](AdapterParams& p, double s) { p.W(r, c) += s; })).epsilon(1e-6).scale(1e-3));
    }
    CHECK(lg.grad.db[r] ==
          doctest::Approx(fd([&](AdapterParams& p, double s) { p.b[r] += s; })).epsilon(1e-6).scale(1e-3));
  }
  CHECK(lg.grad.dlog_gamma ==
        doctest::Approx(fd([&](AdapterParams& p, double s) { p.log_gamma += s; })).epsilon(1e-6).scale(1e-3));
  CHECK(lg.grad.dcoef0 ==
        doctest::Approx(fd([&](AdapterParams& p, double s) { p.coef0 += s; })).epsilon(1e-6).scale(1e-3));
}

}  // namespace

TEST_CASE("single pair at the identity adapter") {
  EmbeddingSet s, t;
  s.data.resize(2, 2);
  s.data << 1.0, 2.0, 3.0, -1.0;
  t.data.resize(2, 1);
  t.data << 1.0, 2.0;
  const PairedEmbeddings paired = pair(s, t);
  PairBatch batch;
  batch.pairs = {{0, 1}};
  const AdapterParams p = AdapterParams::identity(2, 0.5, 1.0);
  const KernelSpec k1 = KernelSpec::polynomial(0.5, 1.0, 2, true);
  const KernelSpec k2 = KernelSpec::cosine();
  // k1 = 2.25 / 21 (see the kernel tests); k2 = 1 for parallel 1-d targets.
  const double r = 2.25 / 21.0 - 1.0;
  CHECK(alignment_loss(p, paired, batch, k1, k2) == doctest::Approx(r * r).epsilon(1e-14));
  const LossAndGrad lg = total_loss_and_grad(p, paired, batch, 0.5, k1, k2);
  CHECK(lg.loss.regularization == 0.0);
  CHECK(lg.loss.total == doctest::Approx(0.5 * r * r).epsilon(1e-14));
  CHECK(lg.loss.w == 0.5);
}

TEST_CASE("regularizer is the mean squared shift") {
  const Fixture f = make_fixture(1);
  AdapterParams p = AdapterParams::identity(4, 1.0, 1.0);
  p.b << 1.0, 2.0, 0.0, -2.0;
  const std::vector<Index> rows{0, 3, 3, 7};
  CHECK(regularization_loss(p, f.paired.source, rows) == doctest::Approx(9.0));
  // Its gradient vanishes at the identity, leaving the alignment gradient alone.
  const AdapterParams id = AdapterParams::identity(4, 0.3, 0.9);
  const KernelSpec k = KernelSpec::polynomial(1.0, 1.0, 3, true);
  const LossAndGrad total = total_loss_and_grad(id, f.paired, f.batch, 1.0, k, k);
  const LossAndGrad align = alignment_loss_and_grad(id, f.paired, f.batch, k, k);
  CHECK(total.loss.regularization == 0.0);
  CHECK(total.grad.dW == align.grad.dW);
  CHECK(total.grad.db == align.grad.db);
}

TEST_CASE("analytic gradient matches finite differences of the direct objective") {
  const std::vector<std::pair<KernelSpec, KernelSpec>> cases = {
      {KernelSpec::polynomial(1.0, 1.0, 3, true), KernelSpec::polynomial(0.5, 1.0, 3, true)},
      {KernelSpec::polynomial(1.0, 1.0, 2, false), KernelSpec::gaussian(0.4)},
      {KernelSpec::polynomial(1.0, 1.0, 1, true), KernelSpec::cosine()},
      {KernelSpec::gaussian(0.3), KernelSpec::polynomial(0.5, 1.0, 3, true)},
      {KernelSpec::cosine(), KernelSpec::gaussian(0.2)},
  };
  std::uint64_t seed = 10;
  for (const auto& [k1, k2] : cases) {
    for (double w : {0.5, 2.0}) check_against_fd(make_fixture(seed++), w, k1, k2);
  }
}

TEST_CASE("non-polynomial source kernels have frozen parameters") {
  const Fixture f = make_fixture(3);
  const LossAndGrad lg =
      total_loss_and_grad(f.params, f.paired, f.batch, 1.0, KernelSpec::gaussian(0.3), KernelSpec::cosine());
  CHECK(lg.grad.dlog_gamma == 0.0);
  CHECK(lg.grad.dcoef0 == 0.0);
}

TEST_CASE("parallel path agrees with the serial reference and is thread independent") {
  const Fixture f = make_fixture(4, 64, 6, 5);
  const KernelSpec k1 = KernelSpec::polynomial(1.0, 1.0, 3, true);
  const KernelSpec k2 = KernelSpec::gaussian(0.2);
  const LossAndGrad ref = reference::total_loss_and_grad(f.params, f.paired, f.batch, 0.7, k1, k2);
  set_num_threads(1);
  const LossAndGrad one = total_loss_and_grad(f.params, f.paired, f.batch, 0.7, k1, k2);
  set_num_threads(4);
  const LossAndGrad four = total_loss_and_grad(f.params, f.paired, f.batch, 0.7, k1, k2);
  CHECK(one.loss.total == four.loss.total);
  CHECK(one.grad.flatten() == four.grad.flatten());
  CHECK(one.loss.total == doctest::Approx(ref.loss.total).epsilon(1e-12));
  CHECK((one.grad.flatten() - ref.grad.flatten()).norm() <= 1e-12 * (1.0 + ref.grad.flatten().norm()));
}

TEST_CASE("flatten order is W row-major, b, log_gamma, coef0") {
  GradientBundle g = GradientBundle::zeros(2);
  g.dW << 1, 2, 3, 4;
  g.db << 5, 6;
  g.dlog_gamma = 7;
  g.dcoef0 = 8;
  const Vector v = g.flatten();
  REQUIRE(v.size() == 8);
  for (Index i = 0; i < 8; ++i) CHECK(v[i] == static_cast<double>(i + 1));
}

TEST_CASE("feature baseline gradient matches finite differences") {
  const Fixture f = make_fixture(5);
  Rng rng(6);
  const Matrix R = random_matrix(4, 3, rng, 0.5);
  const std::vector<Index> rows{1, 2, 2, 5, 9};
  const double w = 0.8;
  auto direct = [&](const AdapterParams& p, const Matrix& r) {
    double sum = 0.0;
    for (Index i : rows) {
      const Vector x = f.paired.source.data.row(i).transpose();
      const Vector u = x + p.W * x + p.b;
      const Vector g = f.paired.target.data.row(i).transpose();
      sum += w * (u - r * g).squaredNorm() + (u - x).squaredNorm();
    }
    return sum / static_cast<double>(rows.size());
  };
  const FeatureLossAndGrad lg = feature_alignment_loss_and_grad(f.params, R, f.paired, rows, w);
  CHECK(lg.loss.total == doctest::Approx(direct(f.params, R)).epsilon(1e-12));
  const double h = 1e-6;
  for (Index a = 0; a < 4; ++a) {
    for (Index b = 0; b < 3; ++b) {
      Matrix rp = R, rm = R;
      rp(a, b) += h;
      rm(a, b) -= h;
      CHECK(lg.dR(a, b) == doctest::Approx((direct(f.params, rp) - direct(f.params, rm)) / (2 * h)).epsilon(1e-6));
    }
    AdapterParams pp = f.params, pm = f.params;
    pp.b[a] += h;
    pm.b[a] -= h;
    CHECK(lg.db[a] == doctest::Approx((direct(pp, R) - direct(pm, R)) / (2 * h)).epsilon(1e-6));
    for (Index c = 0; c < 4; ++c) {
      pp = f.params;
      pm = f.params;
      pp.W(a, c) += h;
      pm.W(a, c) -= h;
      CHECK(lg.dW(a, c) == doctest::Approx((direct(pp, R) - direct(pm, R)) / (2 * h)).epsilon(1e-6));
    }
  }
}

TEST_CASE("projection fit recovers an exact linear map") {
  Rng rng(7);
  const Matrix A = random_matrix(5, 3, rng);
  EmbeddingSet s, t;
  t.data = random_matrix(40, 3, rng);
  s.data = t.data * A.transpose();
  const PairedEmbeddings paired = pair(s, t);
  const Matrix P = projection_fit(paired, 0.0);
  CHECK((P - A).norm() < 1e-10);
  CHECK((apply_projection(P, t.data) - s.data).norm() < 1e-9);

  // Ridge shrinks toward zero.
  CHECK(projection_fit(paired, 100.0).norm() < P.norm());

  EmbeddingSet few_s, few_t;
  few_t.data = random_matrix(2, 3, rng);
  few_s.data = random_matrix(2, 5, rng);
  const PairedEmbeddings under = pair(few_s, few_t);
  CHECK_THROWS_AS(projection_fit(under, 0.0), ConfigError);
  CHECK_NOTHROW(projection_fit(under, 1e-3));

  EmbeddingSet dup_t = t;
  dup_t.data.col(2) = dup_t.data.col(1);
  CHECK_THROWS_AS(projection_fit(pair(s, dup_t), 0.0), NumericalError);
}

TEST_CASE("batch indices are checked") {
  const Fixture f = make_fixture(8);
  PairBatch bad;
  bad.pairs = {{0, 42}};
  CHECK_THROWS(alignment_loss(f.params, f.paired, bad, KernelSpec::cosine(), KernelSpec::cosine()));
  PairBatch empty;
  CHECK_THROWS(alignment_loss(f.params, f.paired, empty, KernelSpec::cosine(), KernelSpec::cosine()));
}
