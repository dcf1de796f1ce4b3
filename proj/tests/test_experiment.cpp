#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "gazeprior/error.hpp"
#include "gazeprior/experiment.hpp"
#include "support.hpp"

namespace gazeprior {
namespace {

namespace fs = std::filesystem;
using testing::fresh_dir;
using testing::tiny_config;
using testing::tiny_eye;
using testing::tiny_vocab;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

template <typename F>
Error caught(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "no error raised";
  return Error(ErrorKind::kIo, "none");
}

TEST(Pairs, RoundTrip) {
  auto dir = fresh_dir("pairs");
  std::vector<data::CodePair> pairs{{"int f() { return 1; }", "returns one"}, {"a\n\"b\"", "quoted \t text"}};
  data::save_pairs(dir / "p.jsonl", pairs);
  auto back = data::load_pairs(dir / "p.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].code, pairs[1].code);
  EXPECT_EQ(back[1].summary, pairs[1].summary);
}

TEST(Pairs, MalformedLineNamesTheLine) {
  auto dir = fresh_dir("pairs_bad");
  write_text(dir / "p.jsonl", "{\"code\": \"x\", \"summary\": \"y\"}\n{not json\n");
  auto e = caught([&] { data::load_pairs(dir / "p.jsonl"); });
  EXPECT_EQ(e.kind(), ErrorKind::kData);
  EXPECT_NE(e.message().find(":2"), std::string::npos) << e.message();
}

TEST(Pairs, MissingFieldIsSchemaError) {
  auto dir = fresh_dir("pairs_field");
  write_text(dir / "p.jsonl", "{\"code\": \"x\"}\n");
  EXPECT_EQ(caught([&] { data::load_pairs(dir / "p.jsonl"); }).kind(), ErrorKind::kSchema);
}

nlohmann::json minimal_config() {
  return {{"experiment", "train"},
          {"seed", 9},
          {"paths",
           {{"gen_corpus", "train.jsonl"},
            {"gaze_corpus", "gaze.json"},
            {"vocab", "vocab.json"},
            {"test_corpus", ""},
            {"output_dir", "out"}}},
          {"model", {{"d", 32}, {"n_layers", 2}, {"n_heads", 2}, {"eyelayer_layer", 1}}}};
}

TEST(RunConfig, MissingSectionsAreSchemaErrors) {
  for (const char* key : {"experiment", "paths"}) {
    auto j = minimal_config();
    j.erase(key);
    EXPECT_EQ(caught([&] { run::run_config_from_json(j, "/base"); }).kind(), ErrorKind::kSchema) << key;
  }
}

TEST(RunConfig, RelativePathsResolveAgainstTheConfigDirectory) {
  auto c = run::run_config_from_json(minimal_config(), "/base/dir");
  EXPECT_EQ(c.paths.gen_corpus, fs::path("/base/dir/train.jsonl"));
  EXPECT_EQ(c.paths.output_dir, fs::path("/base/dir/out"));
  EXPECT_TRUE(c.paths.test_corpus.empty());
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.train.seed, 9u);
}

TEST(RunConfig, EyeWidthDefaultsToModelWidth) {
  auto c = run::run_config_from_json(minimal_config(), "/base");
  EXPECT_EQ(c.eyelayer.width, 32u);
}

TEST(RunConfig, JsonRoundTrip) {
  auto c = run::smoke_config();
  c.paths = {"/a/train.jsonl", "/a/gaze.json", "/a/vocab.json", "", "/a/out"};
  auto j = run::run_config_to_json(c);
  EXPECT_EQ(run::run_config_to_json(run::run_config_from_json(j, "/elsewhere")), j);
}

TEST(RunConfig, ValidateRequiresInputs) {
  auto dir = fresh_dir("config_paths");
  auto c = run::run_config_from_json(minimal_config(), dir);
  EXPECT_EQ(caught([&] { c.validate(); }).kind(), ErrorKind::kIo);
  write_text(dir / "train.jsonl", "");
  tiny_vocab().save(dir / "vocab.json");
  // sft_baseline needs no gaze corpus.
  c.experiment = run::Experiment::kSftBaseline;
  EXPECT_NO_THROW(c.validate());
  c.experiment = run::Experiment::kTrain;
  EXPECT_THROW(c.validate(), Error);
}

TEST(RunConfig, UnknownExperimentIsConfigError) {
  EXPECT_EQ(caught([] { run::experiment_from_string("finetune"); }).kind(), ErrorKind::kConfig);
  for (auto e : {run::Experiment::kTrain, run::Experiment::kSftBaseline, run::Experiment::kLayerSweep,
                 run::Experiment::kModeAblation}) {
    EXPECT_EQ(run::experiment_from_string(run::to_string(e)), e);
  }
}

TEST(CodeBudget, DecoderOnlyLeavesRoomForPromptAndSummary) {
  auto mc = tiny_config();
  const std::size_t budget = run::code_budget(mc, tiny_vocab(), 24);
  EXPECT_EQ(budget + model::prompt_overhead(tiny_vocab()) + 24 + 1, mc.max_len);
  mc.max_len = 20;
  EXPECT_EQ(caught([&] { run::code_budget(mc, tiny_vocab(), 24); }).kind(), ErrorKind::kConfig);
}

TEST(CodeBudget, EncoderDecoderKeepsTheEncoderWindow) {
  auto mc = tiny_config(model::Arch::kEncoderDecoder);
  EXPECT_EQ(run::code_budget(mc, tiny_vocab(), 24), mc.max_len - 2);
}

TEST(MakeExample, Truncates) {
  data::CodePair p{"int f(int a, int b) { return a + b; }", "adds two numbers together"};
  auto e = run::make_example(p, tiny_vocab(), 5, 3);
  EXPECT_EQ(e.code_ids.size(), 5u);
  EXPECT_EQ(e.summary_ids.size(), 3u);
}

TEST(PreprocessGaze, SyntheticCorpusMapsAndConservesMass) {
  std::mt19937_64 rng(12);
  auto samples = data::synthetic_gaze(40, rng);
  data::attach_gold(samples, tiny_vocab());
  std::vector<model::Example> examples;
  auto report = run::preprocess_gaze(samples, tiny_vocab(), 1u << 20, 24, 1.0, &examples);
  EXPECT_EQ(report.n_samples, 40u);
  ASSERT_TRUE(report.accuracy().has_value());
  EXPECT_GE(*report.accuracy(), 0.98);
  EXPECT_LT(report.max_mass_error, 1e-9);
  EXPECT_EQ(examples.size(), report.n_samples - report.n_rejected);
  for (const auto& e : examples) {
    ASSERT_TRUE(e.target.has_value());
    EXPECT_EQ(e.target->fixation.size(), e.code_ids.size());
  }
  auto j = report.to_json();
  EXPECT_EQ(j.at("samples").size(), 40u);
  EXPECT_TRUE(j.contains("mapping_accuracy"));
}

TEST(PreprocessGaze, NoGoldMeansNoAccuracy) {
  std::mt19937_64 rng(13);
  auto samples = data::synthetic_gaze(3, rng);
  auto report = run::preprocess_gaze(samples, tiny_vocab(), 1u << 20, 24, 1.0, nullptr);
  EXPECT_FALSE(report.accuracy().has_value());
  EXPECT_TRUE(report.to_json().at("mapping_accuracy").is_null());
}

TEST(Batches, SplitsWithRemainder) {
  std::mt19937_64 rng(14);
  std::vector<model::Example> ex;
  for (const auto& p : data::synthetic_pairs(5, rng)) ex.push_back(run::make_example(p, tiny_vocab(), 60, 20));
  auto batches = run::make_batches(ex, 2, tiny_config(), tiny_vocab());
  ASSERT_EQ(batches.size(), 3u);
}

TEST(InspectAttention, ReportsANormalizedPrior) {
  auto m = model::init_model(tiny_config(), tiny_eye(16), 3);
  auto j = run::inspect_attention(m, tiny_vocab(), "int add(int a, int b) { return a + b; }", 64);
  for (const char* key : {"tokens", "positions", "P", "w", "mu", "sigma", "g", "mode_probs"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  const auto p = j.at("P").get<std::vector<double>>();
  EXPECT_EQ(p.size(), j.at("tokens").size());
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
  const double g = j.at("g").get<double>();
  EXPECT_GE(g, 0.0);
  EXPECT_LE(g, tiny_eye(16).g_max);
}

TEST(InspectAttention, NeedsAnEyeLayer) {
  auto m = model::init_model(tiny_config(), std::nullopt, 3);
  EXPECT_EQ(caught([&] { run::inspect_attention(m, tiny_vocab(), "int x;", 64); }).kind(), ErrorKind::kConfig);
}

TEST(Evaluate, WritesReportAndPairs) {
  auto dir = fresh_dir("evaluate");
  auto m = model::init_model(tiny_config(), std::nullopt, 3);
  std::vector<data::CodePair> test{{"int f() { return 0; }", "returns zero"}, {"void g() {}", "does nothing"}};
  auto score = run::evaluate(m, tiny_vocab(), test, 6, 2, dir);
  EXPECT_EQ(score.n_pairs, 2u);
  EXPECT_TRUE(fs::exists(dir / "eval.json"));
  std::ifstream csv(dir / "eval_pairs.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 3u);
  // Thread count does not change the result.
  auto single = run::evaluate(m, tiny_vocab(), test, 6, 1, {});
  EXPECT_EQ(single.bleu4, score.bleu4);
  EXPECT_EQ(single.meteor_lite, score.meteor_lite);
}

}  // namespace
}  // namespace gazeprior
