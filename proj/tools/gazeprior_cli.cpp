#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "gazeprior/astalign.hpp"
#include "gazeprior/corpus.hpp"
#include "gazeprior/error.hpp"
#include "gazeprior/experiment.hpp"
#include "gazeprior/tokenizer.hpp"
#include "gazeprior/trainer.hpp"

namespace fs = std::filesystem;
using namespace gazeprior;

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("gazeprior");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("GAZEPRIOR_LOG")) spdlog::set_level(spdlog::level::from_str(level));
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

run::RunConfig config_with_overrides(const std::string& path, const std::optional<std::uint64_t>& seed,
                                     const std::string& out, std::size_t threads) {
  run::RunConfig c = run::load_run_config(path);
  if (seed) {
    c.seed = *seed;
    c.train.seed = *seed;
  }
  if (!out.empty()) c.paths.output_dir = out;
  if (threads > 0) c.eval_threads = threads;
  return c;
}

void print_table(const std::vector<run::RunSummary>& rows) {
  std::printf("%-20s %8s %8s %8s %10s %10s\n", "run", "BLEU-4", "ROUGE-L", "METEOR", "loss_0", "loss_end");
  for (const auto& r : rows) {
    const metrics::CorpusScore s = r.score.value_or(metrics::CorpusScore{});
    std::printf("%-20s %8.2f %8.2f %8.2f %10.4f %10.4f\n", r.label.c_str(), s.bleu4 * 100.0, s.rouge_l * 100.0,
                s.meteor_lite * 100.0, r.initial_loss_gen, r.final_loss_gen);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"gazeprior: Gaussian-mixture attention priors for code summarization"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
  auto add_common = [&](CLI::App* cmd, bool with_config) {
    if (with_config) cmd->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "Override the run seed");
    cmd->add_option("--device-threads", threads, "Worker threads for evaluation");
  };

  // tokenizer-train
  std::string corpus;
  std::size_t vocab_size = 4096;
  auto* tok_cmd = app.add_subcommand("tokenizer-train", "Train a byte-level BPE vocabulary on a JSONL corpus");
  tok_cmd->add_option("--corpus", corpus, "JSONL of {code, summary}")->required()->check(CLI::ExistingFile);
  tok_cmd->add_option("--vocab-size", vocab_size, "Target vocabulary size (>= 260)");
  tok_cmd->add_option("--out", out, "Output vocab JSON")->required();

  // preprocess-gaze
  std::string gaze_path;
  std::string vocab_path;
  std::size_t max_code_tokens = 1u << 20;
  double sigma_min = align::kDefaultSigmaMin;
  auto* gaze_cmd = app.add_subcommand("preprocess-gaze", "Map fixations onto subtokens and report accuracy");
  gaze_cmd->add_option("--gaze", gaze_path, "Gaze corpus (JSON array or JSONL)")->required()->check(CLI::ExistingFile);
  gaze_cmd->add_option("--vocab", vocab_path, "Vocab JSON")->required()->check(CLI::ExistingFile);
  gaze_cmd->add_option("--max-code-tokens", max_code_tokens, "Code region truncation");
  gaze_cmd->add_option("--sigma-min", sigma_min, "Floor of the target spread");
  gaze_cmd->add_option("--out", out, "Output directory")->required();

  // train / sweep
  auto* train_cmd = app.add_subcommand("train", "Train an SFT baseline or EyeLayer model per the run config");
  add_common(train_cmd, true);
  train_cmd->add_option("--out", out, "Override paths.output_dir");
  std::string sweep_kind;
  auto* sweep_cmd = app.add_subcommand("sweep", "Layer sweep or mode ablation");
  add_common(sweep_cmd, true);
  sweep_cmd->add_option("--out", out, "Override paths.output_dir");
  sweep_cmd->add_option("--kind", sweep_kind, "layer_sweep or mode_ablation (default: config experiment)")
      ->check(CLI::IsMember({"layer_sweep", "mode_ablation"}));

  // eval
  std::string checkpoint;
  std::string test_path;
  std::size_t max_new = 25;
  auto* eval_cmd = app.add_subcommand("eval", "Greedy generation and BLEU-4 / ROUGE-L / METEOR-lite");
  add_common(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--test", test_path, "JSONL of {code, summary}")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--max-new", max_new, "Maximum generated tokens");
  eval_cmd->add_option("--out", out, "Output directory")->required();

  // inspect-attention
  std::string sample_path;
  auto* inspect_cmd = app.add_subcommand("inspect-attention", "Dump P, w, mu, sigma and g for one snippet");
  inspect_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--sample", sample_path, "Code file, or JSON object with a 'code' field")
      ->required()
      ->check(CLI::ExistingFile);
  inspect_cmd->add_option("--out", out, "Output JSON file")->required();

  // gen-synthetic
  std::size_t n_train = 500;
  std::size_t n_test = 50;
  std::size_t n_gaze = 40;
  std::size_t synth_vocab = 512;
  auto* synth_cmd = app.add_subcommand("gen-synthetic", "Write a template corpus, gaze set, vocab and run config");
  synth_cmd->add_option("--out", out, "Output directory")->required();
  synth_cmd->add_option("--seed", seed, "Generator seed");
  synth_cmd->add_option("--n-train", n_train, "Training pairs");
  synth_cmd->add_option("--n-test", n_test, "Test pairs");
  synth_cmd->add_option("--n-gaze", n_gaze, "Gaze samples");
  synth_cmd->add_option("--vocab-size", synth_vocab, "BPE vocabulary size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    // One line, like every other failure.
    std::string msg = e.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::fprintf(stderr, "usage: %s\n", msg.c_str());
    return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
  }

  try {
    if (*tok_cmd) {
      std::vector<std::string> texts;
      for (const auto& p : data::load_pairs(corpus)) {
        texts.push_back(p.code);
        texts.push_back(p.summary);
      }
      const tok::Vocab vocab = tok::train_bpe(texts, vocab_size);
      vocab.save(out);
      std::cout << nlohmann::json{{"vocab", out}, {"size", vocab.size()}}.dump() << '\n';
    } else if (*gaze_cmd) {
      make_dir(out);
      const tok::Vocab vocab = tok::Vocab::load(vocab_path);
      const auto samples = align::load_gaze_corpus(gaze_path);
      const run::GazeReport report = run::preprocess_gaze(samples, vocab, max_code_tokens, 1u << 20, sigma_min, nullptr);
      nlohmann::json j = report.to_json();
      write_json(fs::path(out) / "gaze_processed.json", j);
      j.erase("samples");
      std::cout << j.dump() << '\n';
    } else if (*train_cmd) {
      run::RunConfig c = config_with_overrides(config_path, seed, out, threads);
      if (c.experiment != run::Experiment::kTrain && c.experiment != run::Experiment::kSftBaseline) {
        fail(ErrorKind::kConfig, "train expects experiment train or sft_baseline; use sweep for " +
                                     std::string(run::to_string(c.experiment)));
      }
      const auto results = run::run_experiment(c);
      std::cout << results.front().to_json().dump() << '\n';
    } else if (*sweep_cmd) {
      run::RunConfig c = config_with_overrides(config_path, seed, out, threads);
      if (!sweep_kind.empty()) c.experiment = run::experiment_from_string(sweep_kind);
      if (c.experiment != run::Experiment::kLayerSweep && c.experiment != run::Experiment::kModeAblation) {
        fail(ErrorKind::kConfig, "sweep expects experiment layer_sweep or mode_ablation");
      }
      print_table(run::run_experiment(c));
    } else if (*eval_cmd) {
      make_dir(out);
      const train::TrainState state = train::load_checkpoint(checkpoint);
      if (!state.vocab) fail(ErrorKind::kFormat, "checkpoint carries no vocabulary");
      const auto test = data::load_pairs(test_path);
      const auto score = run::evaluate(state.model, *state.vocab, test, max_new, threads == 0 ? 1 : threads, out);
      std::cout << metrics::report_json(score).dump() << '\n';
    } else if (*inspect_cmd) {
      const train::TrainState state = train::load_checkpoint(checkpoint);
      if (!state.vocab) fail(ErrorKind::kFormat, "checkpoint carries no vocabulary");
      std::string code = read_text(sample_path);
      const auto parsed = nlohmann::json::parse(code, nullptr, false);
      if (parsed.is_object() && parsed.contains("code") && parsed["code"].is_string()) code = parsed["code"];
      const std::size_t budget = state.model.config.max_len - 2 - model::prompt_overhead(*state.vocab);
      const fs::path out_path(out);
      if (out_path.has_parent_path()) make_dir(out_path.parent_path());
      write_json(out_path, run::inspect_attention(state.model, *state.vocab, code, budget));
    } else if (*synth_cmd) {
      make_dir(out);
      const fs::path dir(out);
      std::mt19937_64 rng(seed.value_or(0));
      const auto train_pairs = data::synthetic_pairs(n_train, rng);
      const auto test_pairs = data::synthetic_pairs(n_test, rng);
      auto gaze = data::synthetic_gaze(n_gaze, rng);
      std::vector<std::string> texts;
      for (const auto& p : train_pairs) {
        texts.push_back(p.code);
        texts.push_back(p.summary);
      }
      const tok::Vocab vocab = tok::train_bpe(texts, synth_vocab);
      data::attach_gold(gaze, vocab);
      data::save_pairs(dir / "train.jsonl", train_pairs);
      data::save_pairs(dir / "test.jsonl", test_pairs);
      align::save_gaze_corpus((dir / "gaze.json").string(), gaze);
      vocab.save(dir / "vocab.json");
      run::RunConfig c = run::smoke_config();
      c.seed = seed.value_or(0);
      c.train.seed = c.seed;
      c.model.vocab_size = std::max(c.model.vocab_size, vocab.size());
      c.paths = {"train.jsonl", "gaze.json", "vocab.json", "test.jsonl", "runs"};
      write_json(dir / "run_config.json", run::run_config_to_json(c));
      std::cout << nlohmann::json{{"out", out}, {"train", n_train}, {"test", n_test}, {"gaze", n_gaze},
                                  {"vocab_size", vocab.size()}}
                       .dump()
                << '\n';
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::fprintf(stderr, "internal_error: %s\n", msg.c_str());
    return 2;
  }
  return 0;
}
