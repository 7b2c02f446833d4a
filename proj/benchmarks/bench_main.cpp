#include <benchmark/benchmark.h>

#include "tokenunlearn/attribution.hpp"
#include "tokenunlearn/datagen.hpp"
#include "tokenunlearn/model.hpp"
#include "tokenunlearn/objectives.hpp"
#include "tokenunlearn/snr.hpp"

namespace tu = tokenunlearn;

namespace {

struct Fixture {
  tu::GeneratedData data = tu::generate({});
  tu::ModelState model;

  explicit Fixture(int d_model)
      : model(tu::ModelState::initialized(config(d_model, data.vocab.size()), 1)) {
    model.freeze_reference();
  }

  static tu::ModelConfig config(int d, int vocab) {
    tu::ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = d;
    c.d_hidden = 2 * d;
    return c;
  }

  const tu::TokenSequence& sample() const { return data.dataset.samples.front().seq; }
};

void BM_Forward(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(tu::forward(f.model, f.sample()));
  state.counters["params"] = static_cast<double>(f.model.num_params());
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(32)->Arg(64);

void BM_ForwardBackward(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)));
  const auto& seq = f.sample();
  std::vector<tu::TokenUpstream> upstream;
  for (int p = seq.answer_start; p <= seq.length(); ++p) upstream.push_back({p, 1.0});
  for (auto _ : state) {
    auto trace = tu::forward(f.model, seq);
    benchmark::DoNotOptimize(tu::backward_weighted(f.model, trace, upstream));
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(32)->Arg(64);

void BM_ImportanceProfile(benchmark::State& state) {
  Fixture f(32);
  for (auto _ : state)
    benchmark::DoNotOptimize(tu::importance_profile(f.model, f.sample(), f.data.vocab, {}));
}
BENCHMARK(BM_ImportanceProfile);

void BM_UnifiedLossBatch(benchmark::State& state) {
  Fixture f(32);
  tu::ObjectiveConfig objective;
  objective.method = static_cast<tu::Method>(state.range(0));
  if (objective.method == tu::Method::RMU) objective.rmu_target = tu::random_unit_vector(32, 3);
  std::vector<tu::TokenWeights> weights;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& seq = f.data.dataset.samples[i].seq;
    weights.push_back(tu::token_weights(std::vector<double>(seq.length() - 1, 0.0), tu::WeightingMode::Uniform, 1.0, 1.0));
  }
  std::vector<tu::WeightedSample> batch;
  for (std::size_t i = 0; i < 4; ++i) batch.push_back({&f.data.dataset.samples[i].seq, &weights[i]});
  for (auto _ : state) benchmark::DoNotOptimize(tu::unified_unlearn_loss(f.model, batch, objective));
  state.SetLabel(std::string(tu::to_string(objective.method)));
}
BENCHMARK(BM_UnifiedLossBatch)->DenseRange(0, 3);

void BM_SampleGradients(benchmark::State& state) {
  tu::snr::TokenModelParams params;
  params.seq_length = static_cast<int>(state.range(0));
  params.num_critical = std::max(1, params.seq_length / 20);
  auto model = tu::snr::make_token_gradient_model(params);
  std::mt19937_64 rng(1);
  for (auto _ : state) benchmark::DoNotOptimize(tu::snr::sample_gradients(model, rng));
  state.SetItemsProcessed(state.iterations() * (params.seq_length - 1));
}
BENCHMARK(BM_SampleGradients)->Arg(10)->Arg(100)->Arg(500);

void BM_NoiseBound(benchmark::State& state) {
  tu::snr::TokenModelParams params;
  params.seq_length = 100;
  params.rho = 0.05;
  auto model = tu::snr::make_token_gradient_model(params);
  auto weights = tu::snr::selection_weights(model, model.critical);
  for (auto _ : state) benchmark::DoNotOptimize(tu::snr::check_noise_bound(model, weights, 1000, 1));
}
BENCHMARK(BM_NoiseBound)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
