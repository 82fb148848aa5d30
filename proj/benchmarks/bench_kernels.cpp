#include <benchmark/benchmark.h>

#include "murag/backbone.hpp"
#include "murag/memory_index.hpp"
#include "support/oracles.hpp"

namespace {

using namespace murag;

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<float> av(n * n), bv(n * n);
  for (auto& x : av) x = static_cast<float>(rng.normal());
  for (auto& x : bv) x = static_cast<float>(rng.normal());
  const auto a = Tensor::from({n, n}, av), b = Tensor::from({n, n}, bv);
  TapePause pause;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

void BM_TopK(benchmark::State& state) {
  Rng rng(2);
  const auto index = testing::random_index(rng, static_cast<std::size_t>(state.range(0)), 32);
  std::vector<float> q(32);
  for (auto& x : q) x = static_cast<float>(rng.normal());
  const auto k = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(top_k(q, index, k));
}
BENCHMARK(BM_TopK)->Args({10000, 1})->Args({10000, 4})->Args({10000, 20})->Args({100000, 4});

void BM_TopKBlocked(benchmark::State& state) {
  Rng rng(3);
  const auto index = testing::random_index(rng, 100000, 32);
  std::vector<float> q(32);
  for (auto& x : q) x = static_cast<float>(rng.normal());
  const auto workers = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(top_k_blocked(q, index, 4, workers, 4096));
}
BENCHMARK(BM_TopKBlocked)->Arg(1)->Arg(4);

void BM_EncodeEntry(benchmark::State& state) {
  Backbone<float> model(ModelConfig::toy(), 4);
  Rng rng(5);
  MemoryEntry e{"e", testing::random_image(rng, 16), testing::random_tokens(rng, 8, 64), EntryKind::image_text_pair};
  for (auto _ : state) benchmark::DoNotOptimize(encode_entry(model, e));
}
BENCHMARK(BM_EncodeEntry);

}  // namespace

BENCHMARK_MAIN();
