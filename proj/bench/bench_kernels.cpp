// Serial reference against the OpenMP path for each parallel kernel.

#include <benchmark/benchmark.h>

#include "partforge/augment.hpp"
#include "partforge/matching.hpp"
#include "partforge/objective.hpp"

using namespace partforge;

namespace {

Exec exec_of(const benchmark::State& state) { return state.range(0) == 0 ? Exec::serial : Exec::parallel; }

void label(benchmark::State& state) { state.SetLabel(state.range(0) == 0 ? "serial" : "parallel"); }

const SyntheticCorpus& corpus() {
  static const SyntheticCorpus c = [] {
    SyntheticLibraryOptions o;
    o.points_per_part = 384;
    return build_synthetic_library(o);
  }();
  return c;
}

std::vector<TrainingItem> batch(std::size_t b, int feat, ModelParams& params) {
  AugmentOptions ao;
  ao.n_points = 256;
  const auto pairs = generate_stream(corpus().library, corpus().schemas, ao, b, 3);
  std::vector<std::string> captions;
  for (const auto& p : pairs) captions.push_back(p.caption);
  const auto vocab = Vocab::build(captions);
  ModelDims d;
  d.feat = feat;
  d.point_feat = feat;
  d.classes = 5;
  d.vocab = vocab.size();
  params = ModelParams::init(d, 1);
  std::vector<TrainingItem> items;
  for (const auto& p : pairs) items.push_back({p.shape, tokenize(p.caption, vocab)});
  return items;
}

void BM_ScoreMatrix(benchmark::State& state) {
  Rng rng = make_rng(1);
  std::normal_distribution<double> n;
  std::vector<Mat> shapes, texts;
  for (int k = 0; k < 32; ++k) {
    Mat s(4, 64), w(12, 64);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
    shapes.push_back(s);
    texts.push_back(w);
  }
  const SinkhornOptions opts;
  for (auto _ : state) benchmark::DoNotOptimize(score_matrix(shapes, texts, opts, exec_of(state)));
  label(state);
}
BENCHMARK(BM_ScoreMatrix)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_BatchLoss(benchmark::State& state) {
  ModelParams params;
  const auto items = batch(16, 32, params);
  const LossConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(batch_loss(params, items, cfg, true, exec_of(state)).total);
  label(state);
}
BENCHMARK(BM_BatchLoss)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_GenerateStream(benchmark::State& state) {
  AugmentOptions ao;
  ao.n_points = 2500;
  for (auto _ : state) {
    benchmark::DoNotOptimize(generate_stream(corpus().library, corpus().schemas, ao, 64, 5, exec_of(state)));
  }
  label(state);
}
BENCHMARK(BM_GenerateStream)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
