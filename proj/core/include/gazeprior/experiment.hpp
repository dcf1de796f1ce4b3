#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gazeprior/alignloss.hpp"
#include "gazeprior/corpus.hpp"
#include "gazeprior/eyelayer.hpp"
#include "gazeprior/metrics.hpp"
#include "gazeprior/model.hpp"
#include "gazeprior/tokenizer.hpp"
#include "gazeprior/trainer.hpp"

namespace gazeprior::run {

enum class Experiment { kTrain, kSftBaseline, kLayerSweep, kModeAblation };
std::string_view to_string(Experiment e);
Experiment experiment_from_string(std::string_view name);

struct RunPaths {
  std::filesystem::path gen_corpus;
  std::filesystem::path gaze_corpus;  // optional for sft_baseline
  std::filesystem::path vocab;
  std::filesystem::path test_corpus;  // optional; evaluation is skipped without it
  std::filesystem::path output_dir;
};

struct RunConfig {
  Experiment experiment = Experiment::kTrain;
  std::uint64_t seed = 0;
  RunPaths paths;
  model::ModelConfig model;
  eye::EyeLayerConfig eyelayer;
  train::TrainConfig train;
  loss::AlignLossConfig align_loss;
  std::size_t max_summary_tokens = 24;
  std::size_t max_new_tokens = 25;
  std::size_t eval_threads = 1;

  // Checks the nested configs and that every referenced input exists.
  void validate() const;
};

// Relative paths resolve against `base_dir`. The EyeLayer width defaults to
// the model width; train.seed always equals the run seed.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

// Desk-scale defaults used by the synthetic quick-start.
RunConfig smoke_config();

// Code tokens that fit next to the prompt template and a full summary.
std::size_t code_budget(const model::ModelConfig& config, const tok::Vocab& vocab, std::size_t max_summary_tokens);

model::Example make_example(const data::CodePair& pair, const tok::Vocab& vocab, std::size_t max_code_tokens,
                            std::size_t max_summary_tokens);

struct GazeReport {
  std::size_t n_samples = 0;
  std::size_t n_rejected = 0;
  std::size_t n_nodes = 0;
  std::size_t n_unmapped = 0;
  std::size_t n_gold_nodes = 0;
  std::size_t n_gold_correct = 0;
  // Largest |input mass on mapped nodes - projected mass| over samples.
  double max_mass_error = 0.0;
  nlohmann::json samples = nlohmann::json::array();

  std::optional<double> accuracy() const;
  nlohmann::json to_json() const;
};

// Runs the alignment pipeline; accepted samples are appended to `examples`
// when it is non-null.
GazeReport preprocess_gaze(std::span<const align::GazeSample> samples, const tok::Vocab& vocab,
                           std::size_t max_code_tokens, std::size_t max_summary_tokens, double sigma_min,
                           std::vector<model::Example>* examples);

struct Dataset {
  tok::Vocab vocab;
  std::size_t max_code_tokens = 0;
  std::vector<model::Example> train;
  std::vector<model::Example> gaze;
  std::vector<data::CodePair> test;
};

Dataset load_dataset(const RunConfig& config);

std::vector<model::Batch> make_batches(std::span<const model::Example> examples, std::size_t batch_size,
                                       const model::ModelConfig& config, const tok::Vocab& vocab);

// Greedy decoding over the test pairs; writes eval.json and eval_pairs.csv
// into out_dir when it is non-empty.
metrics::CorpusScore evaluate(const model::Model& model, const tok::Vocab& vocab, std::span<const data::CodePair> test,
                              std::size_t max_new_tokens, std::size_t threads, const std::filesystem::path& out_dir);

struct Variant {
  std::string label;
  bool eyelayer = true;
  bool multimodal = true;
  std::optional<std::size_t> layer;  // defaults to the configured layer
};

struct RunSummary {
  std::string label;
  double initial_loss_gen = 0.0;
  double final_loss_gen = 0.0;  // mean over the last generation steps
  std::size_t steps = 0;
  std::optional<metrics::CorpusScore> score;

  nlohmann::json to_json() const;
};

// Trains one variant, writing train_log.jsonl, model.ckpt, eval files and
// summary.json under out_dir.
RunSummary train_and_evaluate(const RunConfig& config, const Dataset& data, const Variant& variant,
                              const std::filesystem::path& out_dir);

// Dispatches on config.experiment. Sweeps write results.csv and results.json.
std::vector<RunSummary> run_experiment(const RunConfig& config);

// P, w, mu, sigma and g for one code snippet.
nlohmann::json inspect_attention(const model::Model& model, const tok::Vocab& vocab, const std::string& code,
                                 std::size_t max_code_tokens);

}  // namespace gazeprior::run
