// Serial reference vs OpenMP paths. Run with --benchmark_filter to pick one.
#include <benchmark/benchmark.h>

#include "kalign/embedding_store.hpp"
#include "kalign/kernels.hpp"
#include "kalign/objective.hpp"
#include "kalign/parallel.hpp"
#include "kalign/synthetic.hpp"

using namespace kalign;

namespace {

const KernelSpec kPoly = KernelSpec::polynomial(1.0 / 64, 1.0, 3, true);

Matrix points(Index n, Index d) {
  Rng rng(1);
  return synth::gaussian_matrix(n, d, rng);
}

void BM_KernelMatrixReference(benchmark::State& state) {
  const Matrix x = points(state.range(0), 64);
  for (auto _ : state) benchmark::DoNotOptimize(reference::kernel_matrix(kPoly, x));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}

void BM_KernelMatrixParallel(benchmark::State& state) {
  set_num_threads(static_cast<int>(state.range(1)));
  const Matrix x = points(state.range(0), 64);
  for (auto _ : state) benchmark::DoNotOptimize(kernel_matrix(kPoly, x));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}

struct LossFixture {
  PairedEmbeddings paired;
  PairBatch batch;
  AdapterParams params;

  explicit LossFixture(Index batch_size) {
    synth::CorpusOptions o;
    o.n = 4096;
    o.dim = 64;
    o.rank = 32;
    paired = synth::detail_loss_corpus(o);
    Rng rng(2);
    batch = sample_pair_batch(paired, batch_size, rng);
    params = AdapterParams::identity(64, kPoly.gamma, kPoly.coef0);
    params.W = 0.01 * synth::gaussian_matrix(64, 64, rng);
  }
};

void BM_LossAndGradReference(benchmark::State& state) {
  const LossFixture f(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(reference::total_loss_and_grad(f.params, f.paired, f.batch, 0.5, kPoly, kPoly));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_LossAndGradParallel(benchmark::State& state) {
  set_num_threads(static_cast<int>(state.range(1)));
  const LossFixture f(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(total_loss_and_grad(f.params, f.paired, f.batch, 0.5, kPoly, kPoly));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_KernelMatrixReference)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_KernelMatrixParallel)->ArgsProduct({{256, 1024}, {1, 4}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LossAndGradReference)->Arg(128)->Arg(1024)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LossAndGradParallel)->ArgsProduct({{128, 1024}, {1, 4}})->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
