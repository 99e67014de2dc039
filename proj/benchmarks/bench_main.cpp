#include <benchmark/benchmark.h>

#include "rdetect/detector.hpp"
#include "rdetect/distance.hpp"
#include "rdetect/encoder.hpp"
#include "rdetect/error.hpp"
#include "rdetect/rng.hpp"

using namespace rdetect;

namespace {

HiddenSequence random_sequence(std::uint64_t seed, int dim, int length) {
  auto rng = keyed_rng({seed});
  HiddenSequence h{Eigen::MatrixXd(dim, length)};
  for (Eigen::Index i = 0; i < h.states.size(); ++i) h.states.data()[i] = uniform(rng, -1.0, 1.0);
  return h;
}

trace::RawTrace default_trace(std::uint64_t seed) {
  trace::GeneratorConfig g;
  g.benign_count = 1;
  g.ransomware_count = 1;
  for (auto& t : trace::build_dataset(g, seed).traces)
    if (t.label == ProgramClass::Ransomware) return t;
  throw InvalidArgument("generator returned no ransomware trace");
}

void BM_Dtw(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  const auto a = random_sequence(1, 64, T), b = random_sequence(2, 64, T);
  for (auto _ : state) benchmark::DoNotOptimize(distance::dtw(a, b).final_cost);
  state.SetComplexityN(T);
}
BENCHMARK(BM_Dtw)->RangeMultiplier(2)->Range(8, 64)->Complexity(benchmark::oNSquared);

void BM_SoftDtw(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  const auto a = random_sequence(3, 64, T), b = random_sequence(4, 64, T);
  for (auto _ : state) benchmark::DoNotOptimize(distance::soft_dtw(a, b, 0.1).soft_cost);
  state.SetComplexityN(T);
}
BENCHMARK(BM_SoftDtw)->RangeMultiplier(2)->Range(8, 64)->Complexity(benchmark::oNSquared);

void BM_OnlineDtwAppend(benchmark::State& state) {
  const auto ref = random_sequence(5, 64, 24);
  const auto stream = random_sequence(6, 64, 24);
  for (auto _ : state) {
    distance::OnlineDtw online(ref);
    for (int t = 0; t < stream.length(); ++t) online.append(stream.step(t));
    benchmark::DoNotOptimize(online.last_row().data());
  }
}
BENCHMARK(BM_OnlineDtwAppend);

void BM_GruForward(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  const auto params = encoder::EncoderParams::random(160, 64, 1);
  const auto x = random_sequence(7, 160, T).states;
  for (auto _ : state) benchmark::DoNotOptimize(encoder::gru_forward(params, x).hidden.states.data());
  state.SetItemsProcessed(state.iterations() * T);
}
BENCHMARK(BM_GruForward)->Arg(1)->Arg(24);

void BM_DetectStep(benchmark::State& state) {
  detector::Model model;
  model.encoder = encoder::EncoderParams::random(160, 64, 1);
  auto net = nas::make_supernet(64, nas::SupernetConfig{}, 1);
  const auto calib = random_sequence(8, 64, 32).states;
  std::vector<int> labels(32);
  for (int j = 0; j < 32; ++j) labels[j] = j % 2;
  model.classifier = nas::prune(net, calib, labels);
  detector::DetectorConfig cfg;
  cfg.threshold = 0.999999;  // keep the session from latching
  const auto seq = trace::segment_windows(default_trace(1), cfg.window_width, cfg.stride);
  detector::Session session(model, cfg);
  session.init();
  std::size_t w = 0;
  for (auto _ : state) {
    if (w == seq.windows.size()) {
      state.PauseTiming();
      session.init();
      w = 0;
      state.ResumeTiming();
    }
    benchmark::DoNotOptimize(session.step(seq.windows[w++]).score);
  }
}
BENCHMARK(BM_DetectStep);

}  // namespace

BENCHMARK_MAIN();
