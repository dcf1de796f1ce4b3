#include "gazeprior/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "gazeprior/error.hpp"
#include "gazeprior/numerics/tensor.hpp"

namespace gazeprior::run {

namespace fs = std::filesystem;

namespace {

void require_file(const fs::path& p, std::string_view what) {
  if (p.empty()) fail(ErrorKind::kConfig, "run config: paths." + std::string(what) + " is required");
  if (!fs::exists(p)) fail(ErrorKind::kIo, std::string(what) + " not found: " + p.string());
}

void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) fail(ErrorKind::kIo, "output dir not writable: " + dir.string());
  }
  fs::remove(probe, ec);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

fs::path resolve(const nlohmann::json& paths, const char* key, const fs::path& base) {
  if (!paths.contains(key) || paths[key].is_null()) return {};
  if (!paths[key].is_string()) fail(ErrorKind::kSchema, std::string("paths.") + key + " must be a string");
  const fs::path p = paths[key].get<std::string>();
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

std::vector<int> truncated(std::vector<int> ids, std::size_t limit) {
  if (ids.size() > limit) ids.resize(limit);
  return ids;
}

std::vector<model::Batch> batches_for(const RunConfig& config, const Dataset& data, const model::ModelConfig& mc,
                                      bool with_gaze, std::vector<model::Batch>& gaze_out) {
  if (with_gaze) gaze_out = make_batches(data.gaze, config.train.batch_gaze, mc, data.vocab);
  return make_batches(data.train, config.train.batch_gen, mc, data.vocab);
}

}  // namespace

std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::kTrain:
      return "train";
    case Experiment::kSftBaseline:
      return "sft_baseline";
    case Experiment::kLayerSweep:
      return "layer_sweep";
    case Experiment::kModeAblation:
      return "mode_ablation";
  }
  return "train";
}

Experiment experiment_from_string(std::string_view name) {
  for (Experiment e : {Experiment::kTrain, Experiment::kSftBaseline, Experiment::kLayerSweep,
                       Experiment::kModeAblation}) {
    if (to_string(e) == name) return e;
  }
  fail(ErrorKind::kConfig, "unknown experiment '" + std::string(name) + "'");
}

void RunConfig::validate() const {
  model.validate();
  eyelayer.validate();
  train.validate();
  align_loss.validate();
  if (eyelayer.width != model.d) fail(ErrorKind::kConfig, "eyelayer.width must equal model.d");
  if (experiment != Experiment::kSftBaseline && !model.eyelayer_layer && model.arch == model::Arch::kDecoderOnly) {
    fail(ErrorKind::kConfig, "model.eyelayer_layer is required for EyeLayer experiments");
  }
  if (max_summary_tokens == 0 || max_new_tokens == 0) fail(ErrorKind::kConfig, "token limits must be positive");
  require_file(paths.gen_corpus, "gen_corpus");
  require_file(paths.vocab, "vocab");
  if (experiment != Experiment::kSftBaseline) require_file(paths.gaze_corpus, "gaze_corpus");
  if (!paths.test_corpus.empty()) require_file(paths.test_corpus, "test_corpus");
  if (paths.output_dir.empty()) fail(ErrorKind::kConfig, "run config: paths.output_dir is required");
  ensure_writable_dir(paths.output_dir);
}

RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) fail(ErrorKind::kSchema, "run config must be a JSON object");
  for (const char* key : {"experiment", "paths"}) {
    if (!j.contains(key)) fail(ErrorKind::kSchema, std::string("run config missing field '") + key + "'");
  }
  RunConfig c;
  try {
    c.experiment = experiment_from_string(j.at("experiment").get<std::string>());
    c.seed = j.value("seed", c.seed);
    const auto& p = j.at("paths");
    if (!p.is_object()) fail(ErrorKind::kSchema, "paths must be an object");
    c.paths.gen_corpus = resolve(p, "gen_corpus", base_dir);
    c.paths.gaze_corpus = resolve(p, "gaze_corpus", base_dir);
    c.paths.vocab = resolve(p, "vocab", base_dir);
    c.paths.test_corpus = resolve(p, "test_corpus", base_dir);
    c.paths.output_dir = resolve(p, "output_dir", base_dir);
    if (j.contains("model")) c.model = j.at("model").get<model::ModelConfig>();
    nlohmann::json eye_json = j.value("eyelayer", nlohmann::json::object());
    if (!eye_json.contains("width")) eye_json["width"] = c.model.d;
    c.eyelayer = eye_json.get<eye::EyeLayerConfig>();
    if (j.contains("train")) c.train = j.at("train").get<train::TrainConfig>();
    if (j.contains("align_loss")) c.align_loss = j.at("align_loss").get<loss::AlignLossConfig>();
    c.max_summary_tokens = j.value("max_summary_tokens", c.max_summary_tokens);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.eval_threads = j.value("eval_threads", c.eval_threads);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kSchema, std::string("run config: ") + e.what());
  }
  c.train.seed = c.seed;
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"experiment", to_string(c.experiment)},
          {"seed", c.seed},
          {"paths",
           {{"gen_corpus", c.paths.gen_corpus.string()},
            {"gaze_corpus", c.paths.gaze_corpus.string()},
            {"vocab", c.paths.vocab.string()},
            {"test_corpus", c.paths.test_corpus.string()},
            {"output_dir", c.paths.output_dir.string()}}},
          {"model", c.model},
          {"eyelayer", c.eyelayer},
          {"train", c.train},
          {"align_loss", c.align_loss},
          {"max_summary_tokens", c.max_summary_tokens},
          {"max_new_tokens", c.max_new_tokens},
          {"eval_threads", c.eval_threads}};
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

RunConfig smoke_config() {
  RunConfig c;
  c.model.n_layers = 4;
  c.model.d = 64;
  c.model.n_heads = 4;
  c.model.ffn_mult = 4;
  c.model.vocab_size = 512;
  c.model.max_len = 128;
  c.model.eyelayer_layer = 2;
  c.eyelayer.width = 64;
  c.eyelayer.rank = 8;
  c.train.lr = 1e-3;
  c.train.batch_gen = 8;
  c.train.batch_gaze = 4;
  c.train.interleave_k = 10;
  c.train.epochs = 1;
  return c;
}

std::size_t code_budget(const model::ModelConfig& config, const tok::Vocab& vocab, std::size_t max_summary_tokens) {
  std::size_t used = 2;
  if (config.arch == model::Arch::kDecoderOnly) {
    used = model::prompt_overhead(vocab) + max_summary_tokens + 1;
  } else if (max_summary_tokens + 2 > config.max_len) {
    fail(ErrorKind::kConfig, "max_summary_tokens does not fit the decoder max_len");
  }
  if (used >= config.max_len) fail(ErrorKind::kConfig, "max_len leaves no room for code tokens");
  return config.max_len - used;
}

model::Example make_example(const data::CodePair& pair, const tok::Vocab& vocab, std::size_t max_code_tokens,
                            std::size_t max_summary_tokens) {
  model::Example e;
  e.code_ids = truncated(tok::encode(pair.code, vocab), max_code_tokens);
  e.summary_ids = truncated(tok::encode(pair.summary, vocab), max_summary_tokens);
  return e;
}

std::optional<double> GazeReport::accuracy() const {
  if (n_gold_nodes == 0) return std::nullopt;
  return static_cast<double>(n_gold_correct) / static_cast<double>(n_gold_nodes);
}

nlohmann::json GazeReport::to_json() const {
  nlohmann::json j = {{"n_samples", n_samples},       {"n_rejected", n_rejected},
                      {"n_nodes", n_nodes},           {"n_unmapped", n_unmapped},
                      {"n_gold_nodes", n_gold_nodes}, {"n_gold_correct", n_gold_correct},
                      {"max_mass_error", max_mass_error}, {"samples", samples}};
  const auto acc = accuracy();
  j["mapping_accuracy"] = acc ? nlohmann::json(*acc) : nlohmann::json(nullptr);
  return j;
}

GazeReport preprocess_gaze(std::span<const align::GazeSample> samples, const tok::Vocab& vocab,
                           std::size_t max_code_tokens, std::size_t max_summary_tokens, double sigma_min,
                           std::vector<model::Example>* examples) {
  GazeReport report;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const align::GazeSample& s = samples[i];
    const align::ProcessedGaze p = align::process_gaze_sample(s, vocab, sigma_min, max_code_tokens);
    ++report.n_samples;
    report.n_nodes += p.alignment.alignments.size() + p.alignment.unmapped_node_ids.size();
    report.n_unmapped += p.alignment.unmapped_node_ids.size();
    report.n_gold_nodes += p.n_gold_nodes;
    report.n_gold_correct += p.n_gold_correct;

    std::unordered_map<int, bool> mapped;
    for (const auto& a : p.alignment.alignments) mapped[a.node_id] = true;
    double input_mass = 0.0;
    for (const auto& r : s.fixations) {
      if (mapped.contains(r.node_id)) input_mass += r.count;
    }
    nlohmann::json entry = align::processed_to_json(p);
    entry["index"] = i;
    if (p.target) {
      report.max_mass_error = std::max(report.max_mass_error, std::abs(input_mass - p.target->total_mass));
      if (examples) {
        model::Example e;
        e.code_ids = p.code_ids;
        e.has_summary = s.summary.has_value();
        if (s.summary) e.summary_ids = truncated(tok::encode(*s.summary, vocab), max_summary_tokens);
        e.target = p.target;
        examples->push_back(std::move(e));
      }
    } else {
      ++report.n_rejected;
      spdlog::warn("gaze sample {} {}", i, p.rejection);
    }
    report.samples.push_back(std::move(entry));
  }
  return report;
}

Dataset load_dataset(const RunConfig& config) {
  Dataset d;
  d.vocab = tok::Vocab::load(config.paths.vocab);
  if (d.vocab.size() > config.model.vocab_size) {
    fail(ErrorKind::kConfig, "vocab has " + std::to_string(d.vocab.size()) + " tokens but model.vocab_size is " +
                                 std::to_string(config.model.vocab_size));
  }
  d.max_code_tokens = code_budget(config.model, d.vocab, config.max_summary_tokens);
  for (const data::CodePair& p : data::load_pairs(config.paths.gen_corpus)) {
    d.train.push_back(make_example(p, d.vocab, d.max_code_tokens, config.max_summary_tokens));
  }
  if (!config.paths.gaze_corpus.empty() && fs::exists(config.paths.gaze_corpus)) {
    const auto samples = align::load_gaze_corpus(config.paths.gaze_corpus.string());
    preprocess_gaze(samples, d.vocab, d.max_code_tokens, config.max_summary_tokens, config.eyelayer.sigma_min,
                    &d.gaze);
  }
  if (!config.paths.test_corpus.empty()) d.test = data::load_pairs(config.paths.test_corpus);
  spdlog::info("dataset: {} train, {} gaze, {} test, code budget {} tokens", d.train.size(), d.gaze.size(),
               d.test.size(), d.max_code_tokens);
  return d;
}

std::vector<model::Batch> make_batches(std::span<const model::Example> examples, std::size_t batch_size,
                                       const model::ModelConfig& config, const tok::Vocab& vocab) {
  std::vector<model::Batch> out;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - i);
    out.push_back(model::make_batch(examples.subspan(i, n), config, vocab));
  }
  return out;
}

metrics::CorpusScore evaluate(const model::Model& model, const tok::Vocab& vocab, std::span<const data::CodePair> test,
                              std::size_t max_new_tokens, std::size_t threads, const fs::path& out_dir) {
  std::size_t max_code = model.config.max_len - 2;
  if (model.config.arch == model::Arch::kDecoderOnly) {
    const std::size_t used = model::prompt_overhead(vocab) + max_new_tokens;
    if (used >= model.config.max_len) fail(ErrorKind::kConfig, "max_new_tokens leaves no room for code");
    max_code = model.config.max_len - used;
  }
  std::vector<std::string> candidates(test.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < test.size(); i += stride) {
      const std::vector<int> code = truncated(tok::encode(test[i].code, vocab), max_code);
      const std::vector<int> out = model::generate(model, vocab, code, {max_new_tokens, true});
      candidates[i] = tok::decode(out, vocab);
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, test.size()));
  if (n_threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work, t, n_threads);
    for (auto& th : pool) th.join();
  }
  std::vector<metrics::Tokens> cand_tokens;
  std::vector<metrics::Tokens> ref_tokens;
  for (std::size_t i = 0; i < test.size(); ++i) {
    cand_tokens.push_back(metrics::metric_tokens(candidates[i]));
    ref_tokens.push_back(metrics::metric_tokens(test[i].summary));
  }
  const metrics::CorpusScore score = metrics::score_corpus(cand_tokens, ref_tokens);
  if (!out_dir.empty()) {
    write_json(out_dir / "eval.json", metrics::report_json(score));
    std::ofstream csv(out_dir / "eval_pairs.csv");
    if (!csv) fail(ErrorKind::kIo, "cannot write " + (out_dir / "eval_pairs.csv").string());
    csv << "index,reference,candidate,bleu4,rouge_l,meteor_lite\n";
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& p = score.pairs[i];
      csv << i << ',' << csv_field(test[i].summary) << ',' << csv_field(candidates[i]) << ',' << p.bleu4 << ','
          << p.rouge_l << ',' << p.meteor_lite << '\n';
    }
  }
  return score;
}

nlohmann::json RunSummary::to_json() const {
  nlohmann::json j = {{"label", label},
                      {"initial_loss_gen", initial_loss_gen},
                      {"final_loss_gen", final_loss_gen},
                      {"steps", steps}};
  j["eval"] = score ? metrics::report_json(*score) : nlohmann::json(nullptr);
  return j;
}

RunSummary train_and_evaluate(const RunConfig& config, const Dataset& data, const Variant& variant,
                              const fs::path& out_dir) {
  ensure_writable_dir(out_dir);
  model::ModelConfig mc = config.model;
  if (variant.layer) mc.eyelayer_layer = variant.layer;
  std::optional<eye::EyeLayerConfig> ec;
  if (variant.eyelayer) {
    ec = config.eyelayer;
    ec->multimodal = variant.multimodal;
  }
  train::TrainState state =
      train::make_state(model::init_model(mc, ec, config.seed), config.train, config.align_loss);
  state.vocab = data.vocab;
  std::vector<model::Batch> gaze_batches;
  const std::vector<model::Batch> gen_batches = batches_for(config, data, mc, variant.eyelayer, gaze_batches);

  std::ofstream log(out_dir / "train_log.jsonl");
  if (!log) fail(ErrorKind::kIo, "cannot write " + (out_dir / "train_log.jsonl").string());
  std::vector<double> gen_losses;
  train::train(state, gen_batches, gaze_batches, [&](const train::StepRecord& r) {
    log << train::to_json(r).dump() << '\n';
    if (r.kind == "gen") gen_losses.push_back(r.loss_gen);
  });
  log.flush();

  RunSummary summary;
  summary.label = variant.label;
  summary.steps = state.step;
  if (!gen_losses.empty()) {
    summary.initial_loss_gen = gen_losses.front();
    const std::size_t tail = std::min<std::size_t>(5, gen_losses.size());
    summary.final_loss_gen =
        std::accumulate(gen_losses.end() - static_cast<std::ptrdiff_t>(tail), gen_losses.end(), 0.0) /
        static_cast<double>(tail);
  }
  train::save_checkpoint(state, out_dir / "model.ckpt");
  if (!data.test.empty()) {
    summary.score = evaluate(state.model, data.vocab, data.test, config.max_new_tokens, config.eval_threads, out_dir);
  }
  write_json(out_dir / "summary.json", summary.to_json());
  spdlog::info("{}: loss_gen {:.4f} -> {:.4f}, BLEU-4 {:.2f}", summary.label, summary.initial_loss_gen,
               summary.final_loss_gen, summary.score ? summary.score->bleu4 * 100.0 : 0.0);
  return summary;
}

std::vector<RunSummary> run_experiment(const RunConfig& config) {
  config.validate();
  const Dataset data = load_dataset(config);
  const fs::path& out = config.paths.output_dir;
  write_json(out / "run_config.json", run_config_to_json(config));
  std::vector<Variant> variants;
  std::vector<std::optional<std::size_t>> layers;
  switch (config.experiment) {
    case Experiment::kTrain:
      variants.push_back({"eyelayer", true, config.eyelayer.multimodal, std::nullopt});
      break;
    case Experiment::kSftBaseline:
      variants.push_back({"sft", false, true, std::nullopt});
      break;
    case Experiment::kLayerSweep:
      variants.push_back({"sft", false, true, std::nullopt});
      for (std::size_t l = 0; l < config.model.n_layers; ++l) {
        variants.push_back({"layer_" + std::to_string(l), true, config.eyelayer.multimodal, l});
      }
      break;
    case Experiment::kModeAblation:
      variants.push_back({"sft", false, true, std::nullopt});
      variants.push_back({"single_mode_early", true, false, std::size_t{0}});
      variants.push_back({"single_mode_late", true, false, config.model.hook_layer()});
      variants.push_back({"multimodal_late", true, true, config.model.hook_layer()});
      break;
  }
  const bool single = variants.size() == 1;
  std::vector<RunSummary> results;
  for (const Variant& v : variants) {
    results.push_back(train_and_evaluate(config, data, v, single ? out : out / v.label));
  }
  if (!single) {
    nlohmann::json rows = nlohmann::json::array();
    std::ofstream csv(out / "results.csv");
    if (!csv) fail(ErrorKind::kIo, "cannot write " + (out / "results.csv").string());
    csv << "label,eyelayer,multimodal,layer,bleu4,rouge_l,meteor_lite,initial_loss_gen,final_loss_gen\n";
    for (std::size_t i = 0; i < variants.size(); ++i) {
      const Variant& v = variants[i];
      const RunSummary& r = results[i];
      const std::string layer = v.eyelayer ? std::to_string(v.layer.value_or(config.model.hook_layer())) : "";
      const metrics::CorpusScore s = r.score.value_or(metrics::CorpusScore{});
      csv << v.label << ',' << (v.eyelayer ? 1 : 0) << ',' << (v.multimodal ? 1 : 0) << ',' << layer << ','
          << s.bleu4 << ',' << s.rouge_l << ',' << s.meteor_lite << ',' << r.initial_loss_gen << ','
          << r.final_loss_gen << '\n';
      nlohmann::json row = r.to_json();
      row["eyelayer"] = v.eyelayer;
      row["multimodal"] = v.multimodal;
      row["layer"] = v.eyelayer ? nlohmann::json(v.layer.value_or(config.model.hook_layer())) : nlohmann::json(nullptr);
      rows.push_back(std::move(row));
    }
    write_json(out / "results.json", {{"experiment", to_string(config.experiment)}, {"rows", rows}});
  }
  return results;
}

nlohmann::json inspect_attention(const model::Model& model, const tok::Vocab& vocab, const std::string& code,
                                 std::size_t max_code_tokens) {
  if (!model.has_eyelayer()) fail(ErrorKind::kConfig, "checkpoint has no EyeLayer to inspect");
  num::NoGradGuard no_grad;
  model::Example e;
  e.code_ids = truncated(tok::encode(code, vocab), max_code_tokens);
  e.has_summary = false;
  const model::Batch batch = model::make_batch(std::span<const model::Example>(&e, 1), model.config, vocab);
  std::mt19937_64 rng(0);
  const model::ForwardResult fwd = model::forward(model, batch, false, rng);
  const eye::SampleMixture& m = fwd.eye->mixtures.front();
  auto values = [](const num::Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  std::vector<std::string> tokens;
  for (int id : e.code_ids) tokens.push_back(vocab.token_bytes(id));
  const std::size_t k = m.weights.numel();
  const std::size_t len = m.prior.numel();
  std::vector<std::vector<double>> modes(k);
  for (std::size_t i = 0; i < k; ++i) {
    modes[i].assign(m.mode_probs.data().begin() + static_cast<std::ptrdiff_t>(i * len),
                    m.mode_probs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
  }
  return {{"tokens", tokens},          {"positions", m.positions}, {"P", values(m.prior)},
          {"w", values(m.weights)},    {"mu", values(m.mu)},       {"sigma", values(m.sigma)},
          {"g", fwd.eye->gate.item()}, {"mode_probs", modes}};
}

}  // namespace gazeprior::run
