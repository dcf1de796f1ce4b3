#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gazeprior/alignloss.hpp"
#include "gazeprior/model.hpp"
#include "gazeprior/tokenizer.hpp"

namespace gazeprior::train {

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_gen = 8;
  std::size_t batch_gaze = 4;
  std::size_t interleave_k = 200;
  double lambda_align = 0.1;
  std::size_t epochs = 1;
  double grad_clip = 1.0;  // global L2 cap; 0 disables
  std::uint64_t seed = 0;
  // Optimizer settings of the EyeLayer-only alignment sweep.
  double align_lr = 1e-2;
  std::size_t align_sweeps = 1;  // sweeps after each epoch

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

struct TrainState {
  model::Model model;
  TrainConfig config;
  loss::AlignLossConfig align;
  AdamState optimizer;        // all parameters, in model.params.named() order
  AdamState sweep_optimizer;  // EyeLayer parameters only
  std::mt19937_64 rng;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::optional<double> best_validation;
  std::optional<tok::Vocab> vocab;
};

TrainState make_state(model::Model model, const TrainConfig& config, const loss::AlignLossConfig& align);

// Each task gradient is projected against every other task's original
// gradient, in an order drawn from `rng`, whenever their dot product is
// negative. Zero-norm partners are skipped. Returns the projected gradients.
std::vector<std::vector<double>> pcgrad_projected(const std::vector<std::vector<double>>& grads,
                                                  std::mt19937_64& rng);
// Mean of the projected gradients.
std::vector<double> pcgrad_project(const std::vector<std::vector<double>>& grads, std::mt19937_64& rng);

struct StepRecord {
  std::uint64_t step = 0;
  std::string kind;  // "gen", "gaze" or "sweep"
  double loss_gen = 0.0;
  std::optional<double> loss_align;
  double mean_g = 0.0;
  std::vector<double> mode_weights;
};

nlohmann::json to_json(const StepRecord& r);

using StepLogger = std::function<void(const StepRecord&)>;

// One optimizer step on the generation loss over every parameter.
StepRecord train_step_gen(TrainState& state, const model::Batch& batch);

// Generation loss (when the batch carries summaries) plus the alignment loss
// on the gaze batch. EyeLayer gradients of the two tasks are combined with
// PCGrad; base parameters get g_gen + lambda * g_align. With lambda = 0 the
// step is exactly train_step_gen.
StepRecord train_step_joint(TrainState& state, const model::Batch& gaze_batch, double lambda_align);

// K generation steps, then one joint step on the next gaze batch, repeated.
// The gaze batches cycle; batch order is shuffled from the state rng.
std::vector<StepRecord> interleaved_epoch(TrainState& state, std::span<const model::Batch> gen_batches,
                                          std::span<const model::Batch> gaze_batches, const StepLogger& log = {});

// One pass over the gaze batches updating only EyeLayer parameters on the
// alignment loss; base activations are computed without gradients. Returns
// the mean pre-update loss.
double alignment_sweep(TrainState& state, std::span<const model::Batch> gaze_batches, const StepLogger& log = {});

// Mean alignment loss over the gaze batches in evaluation mode.
double evaluate_align_loss(const TrainState& state, std::span<const model::Batch> gaze_batches);

// Weight-averaged center per sample with a fixation target, paired with the
// target centroid.
std::vector<std::pair<double, double>> mixture_centers(const TrainState& state,
                                                       std::span<const model::Batch> gaze_batches);

// Epoch loop: interleaved epoch, then the configured alignment sweeps when
// the model carries an EyeLayer and gaze data is present.
void train(TrainState& state, std::span<const model::Batch> gen_batches, std::span<const model::Batch> gaze_batches,
           const StepLogger& log = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace gazeprior::train
