#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "gazeprior/astalign.hpp"
#include "gazeprior/numerics/tensor.hpp"

namespace gazeprior::loss {

using num::Tensor;

struct AlignLossConfig {
  double w_centroid = 1.0;
  double w_spread = 0.5;
  double w_concentration = 0.5;
  double w_anti_uniform = 0.1;
  double w_separation = 0.1;
  double margin = 0.05;
  // Minimum mode distance as a fraction of the region length, unless
  // min_separation pins an absolute value.
  double min_separation_fraction = 0.1;
  std::optional<double> min_separation;
  double tau = 0.1;
  double eps = 1e-8;

  double separation_for(std::size_t length) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const AlignLossConfig& c);
void from_json(const nlohmann::json& j, AlignLossConfig& c);

// Half-open index range [begin, end) inside the code region.
struct Window {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// {i : |i - round(mu_human)| <= ceil(sigma_target)} clipped to [0, length).
Window fixation_window(double mu_human, double sigma_target, std::size_t length);

// Per-mode terms. Inputs of shape [K] (or [K, L] for distributions) give [K].
Tensor loss_centroid(const Tensor& mu, double mu_human, double eps);
Tensor loss_spread(const Tensor& sigma, double sigma_target, double eps);
Tensor loss_concentration(const Tensor& mode_probs, Window window);
Tensor loss_anti_uniform(const Tensor& mode_probs, double margin, double eps);
// Scalar hinge over pairs of modes whose weights both exceed tau.
Tensor loss_separation(const Tensor& weights, const Tensor& mu, double min_distance, double tau);

struct MixtureView {
  Tensor weights;     // [K], on the simplex
  Tensor mu;          // [K]
  Tensor sigma;       // [K]
  Tensor mode_probs;  // [K, L]
};

struct AlignTerms {
  Tensor total;
  Tensor match;
  Tensor separation;
};

AlignTerms align_terms(const MixtureView& mix, const align::FixationTarget& target, const AlignLossConfig& config);
Tensor loss_align(const MixtureView& mix, const align::FixationTarget& target, const AlignLossConfig& config);

// Mean of loss_align over samples; data error when `mixtures` is empty.
Tensor batch_align_loss(const std::vector<MixtureView>& mixtures,
                        const std::vector<const align::FixationTarget*>& targets, const AlignLossConfig& config);

}  // namespace gazeprior::loss
