#include <benchmark/benchmark.h>

#include "dslstm/dsp.hpp"
#include "dslstm/layers.hpp"
#include "dslstm/model.hpp"
#include "dslstm/rng.hpp"

namespace {

using namespace dslstm;
using ad::Graph;
using ad::Tensor;

Tensor<float> random_tensor(ad::Shape shape, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random_tensor({32, n}, rng), b = random_tensor({n, 4 * n}, rng);
  for (auto _ : state) {
    Graph<float> g;
    benchmark::DoNotOptimize(ad::matmul(g.constant(a), g.constant(b)).value().data());
  }
  state.SetItemsProcessed(state.iterations() * 32 * n * 4 * n);
}
BENCHMARK(BM_Matmul)->Arg(200)->Arg(400);

// Second CNN stage of the 512-point stream: [B x 64 x 62 x 58] -> 16 channels.
void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1)), o = static_cast<std::size_t>(state.range(2));
  const auto h = static_cast<std::size_t>(state.range(3)), w = static_cast<std::size_t>(state.range(4));
  Rng rng(2);
  ad::Parameter<float> k("k", random_tensor({o, c, 4, 4}, rng)), bias("b", Tensor<float>({o}));
  const auto x = random_tensor({batch, c, h, w}, rng);
  for (auto _ : state) {
    Graph<float> g;
    const auto y = ad::conv2d(g.input(x), g.param(k), std::optional(g.param(bias)));
    g.backward(ad::sum(y));
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_Conv2dForwardBackward)
    ->Args({8, 1, 128, 119, 64})
    ->Args({8, 64, 62, 58, 16})
    ->Args({8, 1, 64, 239, 64})
    ->Args({8, 64, 30, 118, 16})
    ->Unit(benchmark::kMillisecond);

void BM_DsLstmStep(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  model::DsLstmLayer<float> layer("ds.l0", 208, 464, 200, 0.1f, rng);
  const auto x = random_tensor({batch, 208}, rng), y = random_tensor({batch, 464}, rng);
  for (auto _ : state) {
    Graph<float> g;
    const auto w = layer.bind(g);
    model::StepNorms<float> norms;
    for (std::size_t k = 0; k < 4; ++k) {
      norms[k] = {g.param(layer.rbn[k].gamma), g.param(layer.rbn[k].beta),
                  &layer.rbn[k].slot(0, ad::Mode::kTrain, model::RbnExtrapolation::kError)};
    }
    const model::CellState<float> s{g.constant(Tensor<float>({batch, 200})), g.constant(Tensor<float>({batch, 200}))};
    const auto next = model::ds_lstm_cell<float>(g.constant(x), g.constant(y), s, w, &norms, {});
    g.backward(ad::sum(next.h));
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_DsLstmStep)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_ModelTrainStep(benchmark::State& state) {
  const std::size_t batch = 32;
  Rng rng(4);
  model::ModelConfig cfg;
  cfg.variant = model::kAllVariants[static_cast<std::size_t>(state.range(0))];
  state.SetLabel(std::string(model::to_string(cfg.variant)));
  model::Model<float> m(cfg);
  model::Batch<float> b;
  for (std::size_t i = 0; i < batch; ++i) {
    b.mfcc.push_back(random_tensor({200, 39}, rng));
    b.labels.push_back(static_cast<int>(i % 4));
  }
  b.s1 = random_tensor({batch, 1, 64, 239}, rng);
  b.s2 = random_tensor({batch, 1, 128, 119}, rng);
  for (auto _ : state) {
    m.zero_grad();
    Graph<float> g;
    const auto f = m.forward(g, b, ad::Mode::kTrain);
    g.backward(*f.loss);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_ModelTrainStep)->DenseRange(0, 7)->Unit(benchmark::kMillisecond);

void BM_Stft(benchmark::State& state) {
  const auto n_fft = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  dsp::AudioClip clip;
  clip.samples.resize(32000);
  for (auto& s : clip.samples) s = static_cast<float>(0.1 * rng.normal());
  for (auto _ : state) benchmark::DoNotOptimize(dsp::stft_magnitude(clip, n_fft, n_fft / 2).data());
}
BENCHMARK(BM_Stft)->Arg(256)->Arg(512)->Unit(benchmark::kMicrosecond);

void BM_Mfcc(benchmark::State& state) {
  Rng rng(6);
  dsp::AudioClip clip;
  clip.samples.resize(32000);
  for (auto& s : clip.samples) s = static_cast<float>(0.1 * rng.normal());
  for (auto _ : state) benchmark::DoNotOptimize(dsp::mfcc_features(clip).values.data());
}
BENCHMARK(BM_Mfcc)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
