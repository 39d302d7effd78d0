#include <benchmark/benchmark.h>

#include <random>

#include "smdt/assignment.hpp"
#include "smdt/data.hpp"
#include "smdt/geometry.hpp"
#include "smdt/model.hpp"

namespace {

using namespace smdt;

CostMatrix random_costs(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  CostMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = u(rng);
  }
  return m;
}

void BM_Hungarian(benchmark::State& state) {
  const CostMatrix cost = random_costs(static_cast<std::size_t>(state.range(0)),
                                       static_cast<std::size_t>(state.range(1)), 3);
  for (auto _ : state) benchmark::DoNotOptimize(hungarian(cost));
}
BENCHMARK(BM_Hungarian)->Args({128, 3})->Args({512, 16})->Args({2048, 32})->Unit(benchmark::kMicrosecond);

void BM_GiouLoss(benchmark::State& state) {
  const Box a(0.4, 0.5, 0.2, 0.3), b(0.45, 0.52, 0.25, 0.2);
  for (auto _ : state) benchmark::DoNotOptimize(giou_loss(a, b));
}
BENCHMARK(BM_GiouLoss);

void BM_MatchingCost(benchmark::State& state) {
  ModelConfig cfg;
  const Model model(cfg, 1);
  const GeneratedClip clip = gen_clip(5, SpriteConfig{}, 5);
  const PredictionSet pred = model.predict(clip.pixels).to_prediction_set();
  for (auto _ : state) {
    benchmark::DoNotOptimize(matching_cost(pred, clip.record.annotations, LossWeights{}));
  }
}
BENCHMARK(BM_MatchingCost)->Unit(benchmark::kMicrosecond);

void BM_Predict(benchmark::State& state) {
  ModelConfig cfg;
  cfg.strategy = static_cast<Strategy>(state.range(0));
  const Model model(cfg, 1);
  const GeneratedClip clip = gen_clip(5, SpriteConfig{}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(clip.pixels));
  state.SetLabel(std::string(strategy_name(cfg.strategy)));
}
BENCHMARK(BM_Predict)
    ->Arg(static_cast<int>(Strategy::CT))
    ->Arg(static_cast<int>(Strategy::TwoCT))
    ->Arg(static_cast<int>(Strategy::Tubelets))
    ->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  Model model(cfg, 1);
  std::vector<TrainSample> batch;
  for (std::uint64_t s = 0; s < static_cast<std::uint64_t>(state.range(0)); ++s) {
    GeneratedClip g = gen_clip(s, SpriteConfig{}, 100 + s);
    batch.push_back({std::move(g.pixels), std::move(g.record.annotations)});
  }
  OptimizerConfig opt;
  opt.total_steps = 1000000;
  TrainOptions opts;
  opts.threads = 1;
  Trainer trainer(model, opt, opts);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(batch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
