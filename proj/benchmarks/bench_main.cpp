#include <benchmark/benchmark.h>

#include "icl/circuits.hpp"
#include "icl/model.hpp"
#include "icl/patch.hpp"
#include "icl/tasks.hpp"

using namespace icl;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_model = 64;
  mc.seed = 7;
  return mc;
}

PromptInstance sample_prompt(int n_shots) {
  auto tasks = make_synthetic_tasks(3);
  RngStream rng(3, "bench", 0);
  return build_prompt(tasks[1], n_shots, rng);
}

void BM_forward(benchmark::State& state) {
  TransformerModel model(small_config());
  PromptInstance p = sample_prompt(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(p).logits);
}
BENCHMARK(BM_forward)->Arg(3)->Arg(10);

void BM_train_step(benchmark::State& state) {
  TransformerModel model(small_config());
  auto tasks = make_synthetic_tasks(3);
  RngStream rng(3, "bench-train", 0);
  std::vector<std::vector<int>> toks;
  std::vector<std::vector<int>> tgts;
  std::vector<std::vector<std::uint8_t>> masks;
  for (int b = 0; b < 16; ++b) {
    PromptInstance p = build_prompt(tasks[1], 10, rng);
    std::vector<int> t = p.tokens;
    std::vector<int> g(t.size(), kTokNl);
    std::vector<std::uint8_t> m(t.size(), 0);
    for (std::size_t i = 0; i + 1 < t.size(); ++i) g[i] = t[i + 1];
    m[t.size() - 1] = 1;
    toks.push_back(std::move(t));
    tgts.push_back(std::move(g));
    masks.push_back(std::move(m));
  }
  AdamOptimizer opt(model.parameters(), 1e-3, 10);
  for (auto _ : state) {
    Tensor loss = model.train_loss_tokens(toks, tgts, masks);
    backward(loss);
    opt.step();
  }
}
BENCHMARK(BM_train_step);

void BM_ablated_run(benchmark::State& state) {
  TransformerModel model(small_config());
  auto tasks = make_synthetic_tasks(3);
  RngStream rng(3, "bench-patch", 0);
  PromptInstance clean = build_prompt(tasks[1], 10, rng);
  CorruptionSpec spec;
  PromptInstance corrupted = corrupt(clean, tasks[1], spec, rng);
  ForwardTrace donor = model.forward(corrupted);
  Circuit agg = make_aggregation_circuit(10);
  for (auto _ : state)
    benchmark::DoNotOptimize(run_ablated(model, clean, donor, agg).logits);
}
BENCHMARK(BM_ablated_run);

}  // namespace

BENCHMARK_MAIN();
