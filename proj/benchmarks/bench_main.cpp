#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "mdsm/diffusion_refiner.hpp"
#include "mdsm/metrics.hpp"
#include "mdsm/multimodal_encoder.hpp"
#include "mdsm/pipeline.hpp"
#include "mdsm/synth_dataset.hpp"
#include "mdsm/text_encoder.hpp"

namespace {

using namespace mdsm;

void BM_RenderSample(benchmark::State& state) {
  GenerationConfig config;
  std::uint64_t index = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate_sample(17, index++, config));
}
BENCHMARK(BM_RenderSample);

void BM_PwamForward(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  const auto side = state.range(0);
  Pwam pwam(32, 64);
  auto v = torch::randn({1, 32, side, side});
  LanguageFeatures lang{torch::randn({1, 64, 20}), valid_mask(torch::tensor({12}, torch::kInt64), 20)};
  for (auto _ : state) benchmark::DoNotOptimize(pwam->forward(v, lang));
}
BENCHMARK(BM_PwamForward)->Arg(8)->Arg(16)->Unit(benchmark::kMicrosecond);

void BM_Stage1Forward(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  const auto batch = state.range(0);
  IntermediateModel model(ModelConfig{}, 40);
  model->eval();
  auto images = torch::rand({batch, 3, 64, 64});
  auto tokens = torch::randint(4, 40, {batch, 20}, torch::kInt64);
  auto lengths = torch::full({batch}, 9, torch::kInt64);
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(images, tokens, lengths).probability.values);
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_Stage1Forward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_DenoiserForward(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  Denoiser denoiser(DenoiserOptions{});
  denoiser->eval();
  auto x = torch::randn({8, 3, 64, 64});
  auto t = torch::full({8}, 50, torch::kInt64);
  for (auto _ : state) benchmark::DoNotOptimize(denoiser->forward(x, t).noise);
}
BENCHMARK(BM_DenoiserForward)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  const auto n = state.range(0);
  auto preds = (torch::rand({n, 64, 64}) < 0.3).to(torch::kUInt8);
  auto gts = (torch::rand({n, 64, 64}) < 0.3).to(torch::kUInt8);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(preds, gts));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Evaluate)->Arg(100)->Arg(1000)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
