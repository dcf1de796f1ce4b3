#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <spdlog/sinks/ringbuffer_sink.h>
#include <spdlog/spdlog.h>

#include "gazeprior/error.hpp"
#include "gazeprior/trainer.hpp"
#include "support.hpp"

namespace gazeprior {
namespace {

using testing::tiny_config;
using testing::tiny_eye;
using testing::tiny_vocab;
using testing::values_of;

using Grad = std::vector<double>;

double dot(const Grad& a, const Grad& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

TEST(PCGrad, OrthogonalPassThrough) {
  std::mt19937_64 rng(0);
  auto out = train::pcgrad_projected({{1, 0}, {0, 1}}, rng);
  EXPECT_EQ(out[0], (Grad{1, 0}));
  EXPECT_EQ(out[1], (Grad{0, 1}));
  EXPECT_EQ(train::pcgrad_project({{1, 0}, {0, 1}}, rng), (Grad{0.5, 0.5}));
}

TEST(PCGrad, ConflictingPairIsProjected) {
  std::mt19937_64 rng(0);
  auto out = train::pcgrad_projected({{1, 0}, {-1, 1}}, rng);
  EXPECT_EQ(out[1], (Grad{0, 1}));
  EXPECT_EQ(out[0], (Grad{0.5, 0.5}));
  EXPECT_EQ(train::pcgrad_project({{1, 0}, {-1, 1}}, rng), (Grad{0.25, 0.75}));
}

TEST(PCGrad, AntiparallelCollapses) {
  std::mt19937_64 rng(0);
  auto out = train::pcgrad_projected({{1, 0}, {-1, 0}}, rng);
  EXPECT_EQ(out[1], (Grad{0, 0}));
  EXPECT_EQ(out[0], (Grad{0, 0}));
}

TEST(PCGrad, ZeroPartnerIsSkipped) {
  std::mt19937_64 rng(0);
  auto out = train::pcgrad_projected({{1, 2}, {0, 0}}, rng);
  EXPECT_EQ(out[0], (Grad{1, 2}));
}

TEST(PCGrad, TwoTaskDotProductsAreNonNegative) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t dim = 2 + trial % 9;
    Grad a(dim), b(dim);
    for (auto& x : a) x = n(rng);
    for (auto& x : b) x = n(rng);
    auto out = train::pcgrad_projected({a, b}, rng);
    EXPECT_GE(dot(out[0], b), -1e-8);
    EXPECT_GE(dot(out[1], a), -1e-8);
    EXPECT_GE(dot(out[0], out[1]), -1e-8);
  }
}

TEST(PCGrad, LengthMismatchIsDimensionError) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(train::pcgrad_projected({{1, 0}, {1}}, rng), Error);
}

model::Example example(std::string_view code, std::string_view summary, bool with_target) {
  model::Example e;
  e.code_ids = tok::encode(code, tiny_vocab());
  e.summary_ids = tok::encode(summary, tiny_vocab());
  if (with_target) {
    std::vector<double> f(e.code_ids.size(), 0.0);
    f[f.size() / 3] = 3.0;
    f[f.size() / 3 + 1] = 1.0;
    e.target = align::compute_targets(f);
  }
  return e;
}

struct Corpus {
  std::vector<model::Batch> gen;
  std::vector<model::Batch> gaze;
};

Corpus corpus(std::size_t n_gen, std::size_t n_gaze) {
  std::mt19937_64 rng(31);
  auto pairs = data::synthetic_pairs(n_gen + n_gaze, rng);
  const auto cfg = tiny_config();
  Corpus c;
  for (std::size_t i = 0; i < n_gen + n_gaze; ++i) {
    std::vector<model::Example> ex{example(pairs[i].code, pairs[i].summary, i >= n_gen)};
    (i < n_gen ? c.gen : c.gaze).push_back(model::make_batch(ex, cfg, tiny_vocab()));
  }
  return c;
}

train::TrainState state(bool eyelayer, const std::function<void(train::TrainConfig&)>& edit = {}) {
  train::TrainConfig tc;
  tc.lr = 1e-3;
  tc.seed = 4;
  if (edit) edit(tc);
  std::optional<eye::EyeLayerConfig> ec;
  if (eyelayer) ec = tiny_eye(tiny_config().d);
  return train::make_state(model::init_model(tiny_config(), ec, 4), tc, {});
}

std::vector<std::vector<double>> snapshot(const std::vector<std::pair<std::string, num::Tensor>>& named) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : named) out.push_back(values_of(t));
  return out;
}

TEST(GenStep, ZeroLearningRateLeavesParameters) {
  auto s = state(true, [](auto& c) { c.lr = 0.0; });
  auto c = corpus(1, 0);
  const auto before = snapshot(s.model.params.named());
  auto r = train::train_step_gen(s, c.gen[0]);
  EXPECT_TRUE(std::isfinite(r.loss_gen));
  EXPECT_EQ(snapshot(s.model.params.named()), before);
  EXPECT_EQ(s.step, 1u);
}

TEST(GenStep, LossNonIncreasingOnFixedBatch) {
  auto s = state(false, [](auto& c) { c.lr = 3e-4; });
  auto c = corpus(1, 0);
  double prev = train::train_step_gen(s, c.gen[0]).loss_gen;
  const double first = prev;
  for (int i = 1; i < 50; ++i) {
    const double now = train::train_step_gen(s, c.gen[0]).loss_gen;
    ASSERT_TRUE(std::isfinite(now));
    EXPECT_LE(now, prev) << "step " << i;
    prev = now;
  }
  // Kept up, the same small step rate overfits the batch.
  for (int i = 50; i < 400; ++i) prev = train::train_step_gen(s, c.gen[0]).loss_gen;
  EXPECT_LT(prev, 0.5 * first) << "first " << first;
}

TEST(JointStep, ZeroLambdaIsExactlyAGenStep) {
  auto a = state(true);
  auto b = state(true);
  auto c = corpus(0, 1);
  auto ra = train::train_step_joint(a, c.gaze[0], 0.0);
  auto rb = train::train_step_gen(b, c.gaze[0]);
  EXPECT_EQ(ra.loss_gen, rb.loss_gen);
  EXPECT_EQ(snapshot(a.model.params.named()), snapshot(b.model.params.named()));
  EXPECT_EQ(a.optimizer.m, b.optimizer.m);
}

TEST(JointStep, BothLossesFiniteAndEyeLayerMoves) {
  auto s = state(true);
  auto c = corpus(0, 1);
  const auto eye_before = snapshot(s.model.params.named_eye());
  auto r = train::train_step_joint(s, c.gaze[0], 0.5);
  ASSERT_TRUE(r.loss_align.has_value());
  EXPECT_TRUE(std::isfinite(*r.loss_align));
  EXPECT_TRUE(std::isfinite(r.loss_gen));
  EXPECT_GT(r.loss_gen, 0.0);
  EXPECT_NE(snapshot(s.model.params.named_eye()), eye_before);
  EXPECT_EQ(r.kind, "gaze");
}

TEST(Schedule, InterleavesEveryKGenerationSteps) {
  auto s = state(true, [](auto& c) { c.interleave_k = 2; });
  auto c = corpus(6, 3);
  auto records = train::interleaved_epoch(s, c.gen, c.gaze);
  std::vector<std::string> kinds;
  for (const auto& r : records) kinds.push_back(r.kind);
  EXPECT_EQ(kinds, (std::vector<std::string>{"gen", "gen", "gaze", "gen", "gen", "gaze", "gen", "gen", "gaze"}));
  EXPECT_EQ(s.epoch, 1u);
}

TEST(Schedule, EmptyGazeLoaderWarnsAndRunsPureGeneration) {
  auto sink = std::make_shared<spdlog::sinks::ringbuffer_sink_mt>(16);
  auto previous = spdlog::default_logger();
  spdlog::set_default_logger(std::make_shared<spdlog::logger>("capture", sink));
  auto s = state(true, [](auto& c) { c.interleave_k = 2; });
  auto c = corpus(4, 0);
  auto records = train::interleaved_epoch(s, c.gen, {});
  spdlog::set_default_logger(previous);
  ASSERT_EQ(records.size(), 4u);
  for (const auto& r : records) EXPECT_EQ(r.kind, "gen");
  auto lines = sink->last_formatted();
  ASSERT_FALSE(lines.empty());
  EXPECT_NE(lines.back().find("gaze"), std::string::npos);
}

TEST(Schedule, SameSeedSameTrajectory) {
  auto c = corpus(4, 2);
  auto run = [&] {
    auto s = state(true, [](auto& cfg) { cfg.interleave_k = 2; });
    std::vector<double> losses;
    for (const auto& r : train::interleaved_epoch(s, c.gen, c.gaze)) losses.push_back(r.loss_gen);
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(Sweep, OnlyEyeLayerParametersMove) {
  auto s = state(true);
  auto c = corpus(0, 3);
  const auto base_before = snapshot(s.model.params.named_base());
  const auto eye_before = snapshot(s.model.params.named_eye());
  const auto moments_before = s.optimizer.m;
  const double initial = train::evaluate_align_loss(s, c.gaze);
  for (int i = 0; i < 10; ++i) train::alignment_sweep(s, c.gaze);
  EXPECT_EQ(snapshot(s.model.params.named_base()), base_before);
  EXPECT_NE(snapshot(s.model.params.named_eye()), eye_before);
  EXPECT_EQ(s.optimizer.m, moments_before);
  EXPECT_LT(train::evaluate_align_loss(s, c.gaze), initial);
}

TEST(Sweep, NeedsAnEyeLayer) {
  auto s = state(false);
  auto c = corpus(0, 1);
  EXPECT_THROW(train::alignment_sweep(s, c.gaze), Error);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto s = state(true, [](auto& c) { c.interleave_k = 2; });
  s.vocab = tiny_vocab();
  auto c = corpus(2, 1);
  train::interleaved_epoch(s, c.gen, c.gaze);
  train::alignment_sweep(s, c.gaze);
  auto path = testing::fresh_dir("ckpt") / "model.ckpt";
  train::save_checkpoint(s, path);
  auto back = train::load_checkpoint(path);
  EXPECT_EQ(snapshot(back.model.params.named()), snapshot(s.model.params.named()));
  EXPECT_EQ(back.optimizer.m, s.optimizer.m);
  EXPECT_EQ(back.optimizer.v, s.optimizer.v);
  EXPECT_EQ(back.sweep_optimizer.m, s.sweep_optimizer.m);
  EXPECT_EQ(back.sweep_optimizer.v, s.sweep_optimizer.v);
  EXPECT_EQ(back.optimizer.step, s.optimizer.step);
  EXPECT_EQ(back.step, s.step);
  EXPECT_EQ(back.rng, s.rng);
  ASSERT_TRUE(back.vocab.has_value());
  EXPECT_EQ(*back.vocab, tiny_vocab());

  // Training continues identically from the restored state.
  auto r1 = train::train_step_gen(s, c.gen[0]);
  auto r2 = train::train_step_gen(back, c.gen[0]);
  EXPECT_EQ(r1.loss_gen, r2.loss_gen);
}

void patch(const std::filesystem::path& path, std::size_t offset, const std::string& bytes) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(offset));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ErrorKind load_error(const std::filesystem::path& path, std::string* message = nullptr) {
  try {
    train::load_checkpoint(path);
  } catch (const Error& e) {
    if (message) *message = e.message();
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint loaded";
  return ErrorKind::kIo;
}

TEST(Checkpoint, CorruptMagicIsFormatError) {
  auto s = state(false);
  auto path = testing::fresh_dir("ckpt_magic") / "model.ckpt";
  train::save_checkpoint(s, path);
  patch(path, 0, "XX");
  EXPECT_EQ(load_error(path), ErrorKind::kFormat);
}

TEST(Checkpoint, VersionMismatchAsksForMigration) {
  auto s = state(false);
  auto path = testing::fresh_dir("ckpt_version") / "model.ckpt";
  train::save_checkpoint(s, path);
  const std::uint32_t future = train::kCheckpointVersion + 1;
  patch(path, 8, std::string(reinterpret_cast<const char*>(&future), sizeof(future)));
  std::string msg;
  EXPECT_EQ(load_error(path, &msg), ErrorKind::kVersion);
  EXPECT_NE(msg.find("migration"), std::string::npos);
}

TEST(Checkpoint, TruncatedBodyIsFormatError) {
  auto s = state(false);
  auto path = testing::fresh_dir("ckpt_trunc") / "model.ckpt";
  train::save_checkpoint(s, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 16);
  EXPECT_EQ(load_error(path), ErrorKind::kFormat);
}

TEST(Generate, OverfitModelReproducesItsSummary) {
  auto s = state(true, [](auto& c) { c.lr = 3e-3; });
  std::vector<model::Example> ex{example("int area(int w, int h) { return w * h; }", "computes the area", false)};
  auto batch = model::make_batch(ex, s.model.config, tiny_vocab());
  for (int i = 0; i < 150; ++i) train::train_step_gen(s, batch);
  auto out = model::generate(s.model, tiny_vocab(), ex[0].code_ids, {16, true});
  EXPECT_EQ(tok::decode(out, tiny_vocab()), "computes the area");
}

TEST(Config, ValidationAndJson) {
  train::TrainConfig c;
  nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<train::TrainConfig>()), j);
  c.interleave_k = 0;
  EXPECT_THROW(c.validate(), Error);
}

}  // namespace
}  // namespace gazeprior
