#include "gazeprior/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "gazeprior/error.hpp"
#include "gazeprior/numerics/ops.hpp"

namespace gazeprior::train {

namespace {

using model::Batch;
using num::Tensor;

constexpr char kMagic[8] = {'G', 'Z', 'P', 'R', 'C', 'K', 'P', 'T'};

double to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<Tensor> tensors_of(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

void zero_grads(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) p.node()->grad.clear();
}

using GradSet = std::vector<std::vector<double>>;

GradSet take_grads(const std::vector<Tensor>& params) {
  GradSet out;
  out.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      out.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      out.emplace_back(p.numel(), 0.0);
    }
  }
  return out;
}

void clip_global(GradSet& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double factor = max_norm / norm;
  for (auto& g : grads) {
    for (double& x : g) x *= factor;
  }
}

AdamState fresh_adam(const std::vector<Tensor>& params) {
  AdamState s;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

// Parameters and moments are kept 32-bit representable so checkpoints
// round-trip exactly.
void adam_update(AdamState& st, const std::vector<Tensor>& params, const GradSet& grads, double lr,
                 const TrainConfig& c) {
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor param = params[i];
    auto value = param.mutable_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = to_float(c.beta1 * m[j] + (1.0 - c.beta1) * g[j]);
      v[j] = to_float(c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j]);
      value[j] = to_float(value[j] - lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.adam_eps));
    }
  }
}

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) fail(ErrorKind::kNonFinite, what + " is not finite");
}

void fill_eye_stats(StepRecord& r, const std::optional<eye::EyeOutput>& out) {
  if (!out) return;
  const auto g = out->gate.data();
  r.mean_g = g.empty() ? 0.0 : std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
  if (out->mixtures.empty()) return;
  r.mode_weights.assign(out->mixtures.front().weights.numel(), 0.0);
  for (const auto& m : out->mixtures) {
    for (std::size_t k = 0; k < r.mode_weights.size(); ++k) r.mode_weights[k] += m.weights[k];
  }
  for (double& w : r.mode_weights) w /= static_cast<double>(out->mixtures.size());
}

struct AlignBatch {
  std::vector<loss::MixtureView> views;
  std::vector<const align::FixationTarget*> targets;
};

AlignBatch collect_targets(const eye::EyeOutput& out, const Batch& batch) {
  AlignBatch ab;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (!batch.targets[b]) continue;
    const eye::SampleMixture& m = out.mixtures[b];
    if (batch.targets[b]->fixation.size() != m.prior.numel()) {
      fail(ErrorKind::kDimension, "fixation target covers " + std::to_string(batch.targets[b]->fixation.size()) +
                                      " tokens but the code region has " + std::to_string(m.prior.numel()));
    }
    ab.views.push_back({m.weights, m.mu, m.sigma, m.mode_probs});
    ab.targets.push_back(&*batch.targets[b]);
  }
  return ab;
}

eye::EyeOutput eye_on_frozen_base(const TrainState& state, const Batch& batch, bool training,
                                  std::mt19937_64& rng) {
  Tensor hidden;
  {
    num::NoGradGuard no_grad;
    hidden = model::hook_hidden(state.model, batch);
  }
  return eye::eyelayer_forward(model::eye_inputs(batch, hidden), *state.model.eye_config, *state.model.params.eye,
                               training, rng);
}

// Binary helpers for the checkpoint body.
template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::kFormat, "checkpoint truncated while reading " + what);
  return v;
}

void write_floats(std::ostream& out, std::span<const double> values) {
  std::vector<float> buf(values.begin(), values.end());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

std::vector<double> read_floats(std::istream& in, std::size_t count, const std::string& what) {
  std::vector<float> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) fail(ErrorKind::kFormat, "checkpoint truncated in " + what);
  return {buf.begin(), buf.end()};
}

}  // namespace

void TrainConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "train: " + what);
  };
  check(lr >= 0.0 && align_lr >= 0.0, "learning rates must be non-negative");
  check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0,1)");
  check(adam_eps > 0.0, "adam_eps must be positive");
  check(batch_gen >= 1 && batch_gaze >= 1, "batch sizes must be >= 1");
  check(interleave_k >= 1, "interleave_k must be >= 1");
  check(lambda_align >= 0.0, "lambda_align must be non-negative");
  check(grad_clip >= 0.0, "grad_clip must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"batch_gen", c.batch_gen},
       {"batch_gaze", c.batch_gaze},
       {"interleave_k", c.interleave_k},
       {"lambda_align", c.lambda_align},
       {"epochs", c.epochs},
       {"grad_clip", c.grad_clip},
       {"seed", c.seed},
       {"align_lr", c.align_lr},
       {"align_sweeps", c.align_sweeps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.batch_gen = j.value("batch_gen", d.batch_gen);
  c.batch_gaze = j.value("batch_gaze", d.batch_gaze);
  c.interleave_k = j.value("interleave_k", d.interleave_k);
  c.lambda_align = j.value("lambda_align", d.lambda_align);
  c.epochs = j.value("epochs", d.epochs);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.seed = j.value("seed", d.seed);
  c.align_lr = j.value("align_lr", d.align_lr);
  c.align_sweeps = j.value("align_sweeps", d.align_sweeps);
}

TrainState make_state(model::Model model, const TrainConfig& config, const loss::AlignLossConfig& align) {
  config.validate();
  align.validate();
  TrainState s;
  s.model = std::move(model);
  s.config = config;
  s.align = align;
  s.optimizer = fresh_adam(tensors_of(s.model.params.named()));
  s.sweep_optimizer = fresh_adam(tensors_of(s.model.params.named_eye()));
  s.rng.seed(config.seed);
  return s;
}

std::vector<std::vector<double>> pcgrad_projected(const std::vector<std::vector<double>>& grads,
                                                  std::mt19937_64& rng) {
  const std::size_t n = grads.size();
  for (const auto& g : grads) {
    if (g.size() != grads.front().size()) fail(ErrorKind::kDimension, "pcgrad: gradient lengths differ");
  }
  std::vector<std::vector<double>> out = grads;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t j : order) {
      const auto& gj = grads[j];
      const double norm_sq = std::inner_product(gj.begin(), gj.end(), gj.begin(), 0.0);
      if (norm_sq == 0.0) continue;
      const double dot = std::inner_product(out[i].begin(), out[i].end(), gj.begin(), 0.0);
      if (dot >= 0.0) continue;
      const double coef = dot / norm_sq;
      for (std::size_t t = 0; t < gj.size(); ++t) out[i][t] -= coef * gj[t];
    }
  }
  return out;
}

std::vector<double> pcgrad_project(const std::vector<std::vector<double>>& grads, std::mt19937_64& rng) {
  if (grads.empty()) fail(ErrorKind::kDimension, "pcgrad: no task gradients");
  const auto projected = pcgrad_projected(grads, rng);
  std::vector<double> mean(grads.front().size(), 0.0);
  for (const auto& g : projected) {
    for (std::size_t t = 0; t < g.size(); ++t) mean[t] += g[t];
  }
  for (double& x : mean) x /= static_cast<double>(grads.size());
  return mean;
}

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j = {{"step", r.step},
                      {"kind", r.kind},
                      {"loss_gen", r.loss_gen},
                      {"mean_g", r.mean_g},
                      {"mode_weights", r.mode_weights}};
  j["loss_align"] = r.loss_align ? nlohmann::json(*r.loss_align) : nlohmann::json(nullptr);
  return j;
}

StepRecord train_step_gen(TrainState& state, const Batch& batch) {
  const std::vector<Tensor> params = tensors_of(state.model.params.named());
  zero_grads(params);
  const model::ForwardResult fwd = model::forward(state.model, batch, true, state.rng);
  const Tensor loss = model::generation_loss(fwd.logits, batch.target_labels(state.model.config.arch));
  require_finite(loss.item(), "generation loss");
  num::backward(loss);
  GradSet grads = take_grads(params);
  clip_global(grads, state.config.grad_clip);
  adam_update(state.optimizer, params, grads, state.config.lr, state.config);
  zero_grads(params);
  StepRecord r;
  r.step = ++state.step;
  r.kind = "gen";
  r.loss_gen = loss.item();
  fill_eye_stats(r, fwd.eye);
  return r;
}

StepRecord train_step_joint(TrainState& state, const Batch& gaze_batch, double lambda_align) {
  const bool has_target = std::any_of(gaze_batch.targets.begin(), gaze_batch.targets.end(),
                                      [](const auto& t) { return t.has_value(); });
  if (lambda_align == 0.0 || !state.model.has_eyelayer() || !has_target) {
    if (!gaze_batch.has_labels) fail(ErrorKind::kData, "joint step: batch has neither summaries nor alignment loss");
    StepRecord r = train_step_gen(state, gaze_batch);
    r.kind = "gaze";
    return r;
  }
  const auto named = state.model.params.named();
  const std::vector<Tensor> params = tensors_of(named);
  const std::size_t n_base = state.model.params.named_base().size();
  zero_grads(params);
  const model::ForwardResult fwd = model::forward(state.model, gaze_batch, true, state.rng);
  const AlignBatch ab = collect_targets(*fwd.eye, gaze_batch);
  const Tensor align_loss = loss::batch_align_loss(ab.views, ab.targets, state.align);
  require_finite(align_loss.item(), "alignment loss");

  StepRecord r;
  r.kind = "gaze";
  r.loss_align = align_loss.item();
  std::optional<GradSet> gen_grads;
  if (gaze_batch.has_labels) {
    const Tensor gen_loss = model::generation_loss(fwd.logits, gaze_batch.target_labels(state.model.config.arch));
    require_finite(gen_loss.item(), "generation loss");
    r.loss_gen = gen_loss.item();
    num::backward(gen_loss);
    gen_grads = take_grads(params);
    zero_grads(params);
  }
  num::backward(align_loss);
  const GradSet align_grads = take_grads(params);
  zero_grads(params);

  GradSet combined(params.size());
  for (std::size_t i = 0; i < n_base; ++i) {
    combined[i] = gen_grads ? (*gen_grads)[i] : std::vector<double>(params[i].numel(), 0.0);
    for (std::size_t t = 0; t < combined[i].size(); ++t) combined[i][t] += lambda_align * align_grads[i][t];
  }
  // EyeLayer tasks are flattened and combined with PCGrad.
  std::vector<std::vector<double>> tasks;
  if (gen_grads) {
    std::vector<double> flat;
    for (std::size_t i = n_base; i < params.size(); ++i) flat.insert(flat.end(), (*gen_grads)[i].begin(), (*gen_grads)[i].end());
    tasks.push_back(std::move(flat));
  }
  std::vector<double> flat_align;
  for (std::size_t i = n_base; i < params.size(); ++i) {
    for (double g : align_grads[i]) flat_align.push_back(lambda_align * g);
  }
  tasks.push_back(std::move(flat_align));
  const std::vector<double> eye_update = pcgrad_project(tasks, state.rng);
  std::size_t offset = 0;
  for (std::size_t i = n_base; i < params.size(); ++i) {
    combined[i].assign(eye_update.begin() + static_cast<std::ptrdiff_t>(offset),
                       eye_update.begin() + static_cast<std::ptrdiff_t>(offset + params[i].numel()));
    offset += params[i].numel();
  }
  clip_global(combined, state.config.grad_clip);
  adam_update(state.optimizer, params, combined, state.config.lr, state.config);
  r.step = ++state.step;
  fill_eye_stats(r, fwd.eye);
  return r;
}

std::vector<StepRecord> interleaved_epoch(TrainState& state, std::span<const Batch> gen_batches,
                                          std::span<const Batch> gaze_batches, const StepLogger& log) {
  std::vector<StepRecord> records;
  std::vector<std::size_t> gen_order(gen_batches.size());
  std::iota(gen_order.begin(), gen_order.end(), 0);
  std::shuffle(gen_order.begin(), gen_order.end(), state.rng);
  std::vector<std::size_t> gaze_order(gaze_batches.size());
  std::iota(gaze_order.begin(), gaze_order.end(), 0);
  std::shuffle(gaze_order.begin(), gaze_order.end(), state.rng);
  if (gaze_batches.empty()) spdlog::warn("gaze loader is empty; running a pure generation epoch");
  const std::size_t k = state.config.interleave_k;
  std::size_t next_gaze = 0;
  auto emit = [&](StepRecord r) {
    if (log) log(r);
    records.push_back(std::move(r));
  };
  for (std::size_t i = 0; i < gen_order.size(); ++i) {
    emit(train_step_gen(state, gen_batches[gen_order[i]]));
    if (!gaze_batches.empty() && (i + 1) % k == 0) {
      const Batch& gaze = gaze_batches[gaze_order[next_gaze % gaze_order.size()]];
      ++next_gaze;
      emit(train_step_joint(state, gaze, state.config.lambda_align));
    }
  }
  ++state.epoch;
  return records;
}

double alignment_sweep(TrainState& state, std::span<const Batch> gaze_batches, const StepLogger& log) {
  if (!state.model.has_eyelayer()) fail(ErrorKind::kConfig, "alignment sweep needs an EyeLayer");
  const std::vector<Tensor> params = tensors_of(state.model.params.named_eye());
  double total = 0.0;
  std::size_t counted = 0;
  for (const Batch& batch : gaze_batches) {
    zero_grads(params);
    const eye::EyeOutput out = eye_on_frozen_base(state, batch, true, state.rng);
    const AlignBatch ab = collect_targets(out, batch);
    if (ab.views.empty()) continue;
    const Tensor loss = loss::batch_align_loss(ab.views, ab.targets, state.align);
    require_finite(loss.item(), "alignment loss");
    num::backward(loss);
    GradSet grads = take_grads(params);
    zero_grads(params);
    clip_global(grads, state.config.grad_clip);
    adam_update(state.sweep_optimizer, params, grads, state.config.align_lr, state.config);
    total += loss.item();
    ++counted;
    if (log) {
      StepRecord r;
      r.step = state.step;
      r.kind = "sweep";
      r.loss_align = loss.item();
      std::optional<eye::EyeOutput> opt(out);
      fill_eye_stats(r, opt);
      log(r);
    }
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

double evaluate_align_loss(const TrainState& state, std::span<const Batch> gaze_batches) {
  if (!state.model.has_eyelayer()) fail(ErrorKind::kConfig, "alignment loss needs an EyeLayer");
  num::NoGradGuard no_grad;
  std::mt19937_64 rng(0);
  double total = 0.0;
  std::size_t samples = 0;
  for (const Batch& batch : gaze_batches) {
    const eye::EyeOutput out = eye_on_frozen_base(state, batch, false, rng);
    const AlignBatch ab = collect_targets(out, batch);
    for (std::size_t i = 0; i < ab.views.size(); ++i) {
      total += loss::loss_align(ab.views[i], *ab.targets[i], state.align).item();
      ++samples;
    }
  }
  if (samples == 0) fail(ErrorKind::kData, "no samples with fixation targets");
  return total / static_cast<double>(samples);
}

std::vector<std::pair<double, double>> mixture_centers(const TrainState& state, std::span<const Batch> gaze_batches) {
  num::NoGradGuard no_grad;
  std::mt19937_64 rng(0);
  std::vector<std::pair<double, double>> out;
  for (const Batch& batch : gaze_batches) {
    const eye::EyeOutput eo = eye_on_frozen_base(state, batch, false, rng);
    for (std::size_t b = 0; b < batch.batch; ++b) {
      if (!batch.targets[b]) continue;
      const auto& m = eo.mixtures[b];
      double center = 0.0;
      for (std::size_t k = 0; k < m.weights.numel(); ++k) center += m.weights[k] * m.mu[k];
      out.emplace_back(center, batch.targets[b]->mu_human);
    }
  }
  return out;
}

void train(TrainState& state, std::span<const Batch> gen_batches, std::span<const Batch> gaze_batches,
           const StepLogger& log) {
  for (std::size_t e = 0; e < state.config.epochs; ++e) {
    interleaved_epoch(state, gen_batches, gaze_batches, log);
    if (state.model.has_eyelayer() && !gaze_batches.empty()) {
      for (std::size_t s = 0; s < state.config.align_sweeps; ++s) alignment_sweep(state, gaze_batches, log);
    }
  }
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto named = state.model.params.named();
  const auto named_eye = state.model.params.named_eye();
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  auto add_section = [&](const std::string& section, const std::string& name, const num::Shape& shape) {
    const std::size_t count = num::numel(shape);
    tensors.push_back({{"section", section}, {"name", name}, {"shape", shape}, {"offset", offset}, {"count", count}});
    offset += count;
  };
  for (const auto& [name, t] : named) add_section("param", name, t.shape());
  for (const auto& [name, t] : named) add_section("adam.m", name, t.shape());
  for (const auto& [name, t] : named) add_section("adam.v", name, t.shape());
  for (const auto& [name, t] : named_eye) add_section("sweep.m", name, t.shape());
  for (const auto& [name, t] : named_eye) add_section("sweep.v", name, t.shape());

  std::ostringstream rng_state;
  rng_state << state.rng;
  nlohmann::json header = {
      {"model", state.model.config},
      {"train", state.config},
      {"align_loss", state.align},
      {"step", state.step},
      {"epoch", state.epoch},
      {"optimizer_step", state.optimizer.step},
      {"sweep_optimizer_step", state.sweep_optimizer.step},
      {"rng", rng_state.str()},
      {"tensors", std::move(tensors)},
  };
  header["eyelayer"] = state.model.eye_config ? nlohmann::json(*state.model.eye_config) : nlohmann::json(nullptr);
  header["best_validation"] = state.best_validation ? nlohmann::json(*state.best_validation) : nlohmann::json(nullptr);
  header["vocab"] = state.vocab ? state.vocab->to_json() : nlohmann::json(nullptr);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : named) write_floats(out, t.data());
  for (const auto& m : state.optimizer.m) write_floats(out, m);
  for (const auto& v : state.optimizer.v) write_floats(out, v);
  for (const auto& m : state.sweep_optimizer.m) write_floats(out, m);
  for (const auto& v : state.sweep_optimizer.v) write_floats(out, v);
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  char magic[sizeof(kMagic)] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::kFormat, path.string() + " is not a gazeprior checkpoint (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kVersion, "checkpoint format v" + std::to_string(version) + " needs migration to v" +
                                  std::to_string(kCheckpointVersion) + " before it can be loaded");
  }
  const auto header_len = read_pod<std::uint64_t>(in, "header length");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) fail(ErrorKind::kFormat, "checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("checkpoint header: ") + e.what());
  }

  try {
    const auto mc = header.at("model").get<model::ModelConfig>();
    std::optional<eye::EyeLayerConfig> ec;
    if (!header.at("eyelayer").is_null()) ec = header.at("eyelayer").get<eye::EyeLayerConfig>();
    TrainState s = make_state(model::init_model(mc, ec, 0), header.at("train").get<TrainConfig>(),
                              header.at("align_loss").get<loss::AlignLossConfig>());
    s.step = header.at("step").get<std::uint64_t>();
    s.epoch = header.at("epoch").get<std::uint64_t>();
    s.optimizer.step = header.at("optimizer_step").get<std::uint64_t>();
    s.sweep_optimizer.step = header.at("sweep_optimizer_step").get<std::uint64_t>();
    std::istringstream rng_state(header.at("rng").get<std::string>());
    rng_state >> s.rng;
    if (!header.at("best_validation").is_null()) s.best_validation = header.at("best_validation").get<double>();
    if (!header.at("vocab").is_null()) s.vocab = tok::Vocab::from_json(header.at("vocab"));

    const auto named = s.model.params.named();
    const auto named_eye = s.model.params.named_eye();
    std::size_t param_i = 0, m_i = 0, v_i = 0, sm_i = 0, sv_i = 0;
    for (const auto& entry : header.at("tensors")) {
      const std::string section = entry.at("section");
      const std::string name = entry.at("name");
      const auto shape = entry.at("shape").get<num::Shape>();
      const std::size_t count = entry.at("count");
      std::vector<double> values = read_floats(in, count, name);
      auto expect = [&](const std::vector<std::pair<std::string, Tensor>>& list, std::size_t idx) -> const Tensor& {
        if (idx >= list.size() || list[idx].first != name || list[idx].second.shape() != shape) {
          fail(ErrorKind::kFormat, "checkpoint tensor " + section + "/" + name + " does not match the model layout");
        }
        return list[idx].second;
      };
      if (section == "param") {
        Tensor t = expect(named, param_i++);
        std::copy(values.begin(), values.end(), t.mutable_data().begin());
      } else if (section == "adam.m") {
        expect(named, m_i);
        s.optimizer.m[m_i++] = std::move(values);
      } else if (section == "adam.v") {
        expect(named, v_i);
        s.optimizer.v[v_i++] = std::move(values);
      } else if (section == "sweep.m") {
        expect(named_eye, sm_i);
        s.sweep_optimizer.m[sm_i++] = std::move(values);
      } else if (section == "sweep.v") {
        expect(named_eye, sv_i);
        s.sweep_optimizer.v[sv_i++] = std::move(values);
      } else {
        fail(ErrorKind::kFormat, "unknown checkpoint section '" + section + "'");
      }
    }
    if (param_i != named.size()) fail(ErrorKind::kFormat, "checkpoint is missing parameters");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kSchema, std::string("checkpoint header: ") + e.what());
  }
}

}  // namespace gazeprior::train
