#include <benchmark/benchmark.h>

#include "hfedatm/fot.hpp"
#include "hfedatm/merge.hpp"
#include "hfedatm/model.hpp"

using namespace hfedatm;

namespace {

Matrix random_cost(SeededRng& rng, std::size_t k) {
  Matrix c(k, k);
  for (double& v : c.data) v = 4.0 * rng.uniform01();
  return c;
}

Tensor4 random_batch(SeededRng& rng, std::size_t n, const ModelSpec& spec) {
  Tensor4 t(n, spec.input.c, spec.input.h, spec.input.w);
  for (double& v : t.data) v = rng.normal();
  return t;
}

}  // namespace

static void BM_Sinkhorn(benchmark::State& state) {
  SeededRng rng(1);
  const Matrix cost = random_cost(rng, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(sinkhorn(cost, 0.05, 25, 0.0));
  }
}
BENCHMARK(BM_Sinkhorn)->Arg(6)->Arg(16)->Arg(64);

static void BM_RegmeanSolve(benchmark::State& state) {
  const std::size_t d = static_cast<std::size_t>(state.range(0));
  SeededRng rng(2);
  std::vector<std::pair<Matrix, Matrix>> pairs;
  for (int e = 0; e < 3; ++e) {
    Matrix x(2 * d, d), w(d, 8);
    for (double& v : x.data) v = rng.normal();
    for (double& v : w.data) v = rng.normal();
    pairs.emplace_back(matmul(transpose(x), x), std::move(w));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(regmean_solve(pairs));
  }
}
BENCHMARK(BM_RegmeanSolve)->Arg(16)->Arg(64)->Arg(128);

static void BM_TrainStep(benchmark::State& state) {
  const ModelSpec spec = ModelSpec::reduced_lenet(4, 1, 14, 14);
  SeededRng rng(3);
  ModelWeights w = ModelWeights::random_init(spec, rng);
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const Tensor4 batch = random_batch(rng, n, spec);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(i % 4));
  for (auto _ : state) {
    benchmark::DoNotOptimize(backward_sgd_step(spec, w, batch, labels, 0.05));
  }
}
BENCHMARK(BM_TrainStep)->Arg(8)->Arg(32);

static void BM_AlignStation(benchmark::State& state) {
  const ModelSpec spec = ModelSpec::reduced_lenet(4, 1, 14, 14);
  SeededRng rng(4);
  const ModelWeights ref = ModelWeights::random_init(spec, rng);
  const ModelWeights other = ModelWeights::random_init(spec, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(align_station(spec, ref, spec, other, 0.05, 25));
  }
}
BENCHMARK(BM_AlignStation);

BENCHMARK_MAIN();
