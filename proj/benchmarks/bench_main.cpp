#include <random>
#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "gazeprior/corpus.hpp"
#include "gazeprior/experiment.hpp"
#include "gazeprior/metrics.hpp"
#include "gazeprior/numerics/ops.hpp"

namespace {

using namespace gazeprior;
using num::Tensor;

Tensor random_tensor(const num::Shape& shape, std::mt19937_64& rng, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(num::numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(shape, std::move(v), requires_grad);
}

const tok::Vocab& bench_vocab() {
  static const tok::Vocab vocab = [] {
    std::mt19937_64 rng(1);
    std::vector<std::string> corpus;
    for (const auto& p : data::synthetic_pairs(200, rng)) {
      corpus.push_back(p.code);
      corpus.push_back(p.summary);
    }
    return tok::train_bpe(corpus, 512);
  }();
  return vocab;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(0);
  auto a = random_tensor({n, n}, rng);
  auto b = random_tensor({n, n}, rng);
  num::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(num::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_AttentionForwardBackward(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(0);
  auto q = random_tensor({8, len, 64}, rng, true);
  auto k = random_tensor({8, len, 64}, rng, true);
  auto v = random_tensor({8, len, 64}, rng, true);
  for (auto _ : state) {
    auto out = num::sum(num::attention(q, k, v, 4, {}, true));
    num::backward(out);
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(32)->Arg(128);

void BM_EyeLayerForward(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  eye::EyeLayerConfig c;
  c.width = 64;
  c.rank = 8;
  std::mt19937_64 rng(0);
  auto p = eye::init_eyelayer(c, rng);
  auto h = random_tensor({8, len, 64}, rng);
  std::vector<double> attn(8 * len, 1.0), special(8 * len, 0.0), valid(8 * len, 1.0);
  for (std::size_t b = 0; b < 8; ++b) special[b * len] = special[b * len + len - 1] = 1.0;
  for (std::size_t b = 0; b < 8; ++b) valid[b * len] = valid[b * len + len - 1] = 0.0;
  num::NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(eye::eyelayer_forward({h, attn, special, valid}, c, p, false, rng));
}
BENCHMARK(BM_EyeLayerForward)->Arg(64)->Arg(128);

void BM_TrainStep(benchmark::State& state) {
  const bool joint = state.range(0) != 0;
  auto cfg = run::smoke_config();
  cfg.model.vocab_size = bench_vocab().size();
  std::mt19937_64 rng(2);
  std::vector<model::Example> examples;
  auto gaze = data::synthetic_gaze(8, rng);
  run::preprocess_gaze(gaze, bench_vocab(), run::code_budget(cfg.model, bench_vocab(), 24), 24, 1.0, &examples);
  examples.resize(std::min<std::size_t>(examples.size(), 8));
  auto batch = model::make_batch(examples, cfg.model, bench_vocab());
  auto ts = train::make_state(model::init_model(cfg.model, cfg.eyelayer, 3), cfg.train, cfg.align_loss);
  for (auto _ : state) {
    benchmark::DoNotOptimize(joint ? train::train_step_joint(ts, batch, 0.1) : train::train_step_gen(ts, batch));
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Generate(benchmark::State& state) {
  auto cfg = run::smoke_config();
  cfg.model.vocab_size = bench_vocab().size();
  auto m = model::init_model(cfg.model, cfg.eyelayer, 3);
  auto ids = tok::encode("public int size() { return count; }", bench_vocab());
  const bool cache = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(model::generate(m, bench_vocab(), ids, {24, cache}));
}
BENCHMARK(BM_Generate)->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond);

void BM_Tokenize(benchmark::State& state) {
  std::mt19937_64 rng(4);
  const auto pairs = data::synthetic_pairs(64, rng);
  std::size_t bytes = 0;
  for (auto _ : state) {
    for (const auto& p : pairs) {
      benchmark::DoNotOptimize(tok::encode(p.code, bench_vocab()));
      bytes += p.code.size();
    }
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(BM_Tokenize);

void BM_CorpusMetrics(benchmark::State& state) {
  std::mt19937_64 rng(5);
  const auto a = data::synthetic_pairs(500, rng);
  const auto b = data::synthetic_pairs(500, rng);
  std::vector<metrics::Tokens> cands, refs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cands.push_back(metrics::metric_tokens(a[i].summary));
    refs.push_back(metrics::metric_tokens(b[i].summary));
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::score_corpus(cands, refs));
}
BENCHMARK(BM_CorpusMetrics)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
