#include <benchmark/benchmark.h>

#include <random>

#include "mse2d/encoder.hpp"
#include "mse2d/eval.hpp"
#include "mse2d/io.hpp"

using namespace mse2d;

namespace {

EncoderConfig bench_config() {
  EncoderConfig c;
  c.num_layers = 12;
  return c;
}

std::vector<TokenSequence> batch(const EncoderConfig& c, std::size_t size, std::size_t tokens) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::uint32_t> id(kNumReservedIds, static_cast<std::uint32_t>(c.vocab_size - 1));
  std::vector<TokenSequence> out(size);
  for (TokenSequence& s : out) {
    s.ids.push_back(kClsId);
    while (s.ids.size() < tokens) s.ids.push_back(id(rng));
  }
  return out;
}

// Early exit after n of 12 layers, batch 32, 16 tokens.
void BM_EmbedEarlyExit(benchmark::State& state) {
  static const EncoderModel model = init_model(bench_config());
  const auto seqs = batch(model.config(), 32, 16);
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(embed(model, seqs, n, model.hidden_dim()));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_EmbedEarlyExit)->DenseRange(1, 12, 1)->Unit(benchmark::kMillisecond);

void BM_Spearman(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<double> x(static_cast<std::size_t>(state.range(0))), y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = g(rng);
    y[i] = static_cast<double>(i % 2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(spearman(x, y));
}
BENCHMARK(BM_Spearman)->Arg(1024)->Arg(16384);

void BM_CheckpointRoundTrip(benchmark::State& state) {
  const EncoderModel model = init_model(EncoderConfig{});
  for (auto _ : state) benchmark::DoNotOptimize(deserialize_checkpoint(serialize_checkpoint(model)));
}
BENCHMARK(BM_CheckpointRoundTrip)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
