#include <benchmark/benchmark.h>

#include "metadcseg/noisegen.hpp"
#include "metadcseg/segnet.hpp"
#include "metadcseg/trainer.hpp"

namespace {

using namespace metadcseg;

ImagePlane noise_image(int side) {
  Rng r(1);
  ImagePlane x(side, side);
  for (double& v : x.values) v = r.uniform();
  return x;
}

void BM_ForwardValue(benchmark::State& state) {
  const NetConfig cfg;
  const auto theta = init_params(cfg, 0);
  const auto x = noise_image(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(forward(cfg, theta, x).probs.data());
}
BENCHMARK(BM_ForwardValue)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

template <typename Real>
void BM_ForwardBackward(benchmark::State& state) {
  const NetConfig cfg;
  const auto theta = init_params(cfg, 0);
  const auto x = noise_image(static_cast<int>(state.range(0)));
  diff::ScalarFn<Real> f = [&](diff::Tape<Real>& t, diff::Var th) {
    return diff::sum(t, forward<Real>(t, th, theta, cfg, x).logits);
  };
  for (auto _ : state) benchmark::DoNotOptimize(diff::value_and_grad<Real>(f, theta).grad.data());
}
BENCHMARK(BM_ForwardBackward<double>)->Arg(32)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ForwardBackward<float>)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_Morph(benchmark::State& state) {
  LabelMask m(64, 64);
  for (int y = 16; y < 48; ++y) {
    for (int x = 10; x < 50; ++x) m.at(y, x) = 1;
  }
  const int k = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(morph(m, MorphOp::kErode, k).labels.data());
    benchmark::DoNotOptimize(morph(m, MorphOp::kDilate, k).labels.data());
  }
}
BENCHMARK(BM_Morph)->Arg(3)->Arg(11)->Arg(21)->Unit(benchmark::kMicrosecond);

// One epoch on a 20-item corpus; arg 1 enables meta, DCD and Dice.
void BM_TrainEpoch(benchmark::State& state) {
  TrainConfig cfg;
  cfg.n = 20;
  cfg.metaval_frac = 0.1;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  cfg.meta = cfg.dcd = cfg.dice = state.range(0) != 0;
  const Dataset ds = prepare_dataset(cfg);
  TrainHooks hooks;
  hooks.keep_log = false;
  for (auto _ : state) benchmark::DoNotOptimize(train(cfg, ds, hooks).steps);
}
BENCHMARK(BM_TrainEpoch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
