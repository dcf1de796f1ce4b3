#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gazeprior/numerics/tensor.hpp"

namespace gazeprior::eye {

using num::Tensor;

struct EyeLayerConfig {
  std::size_t modes = 3;
  std::size_t width = 128;  // hidden width d
  std::size_t rank = 16;
  double gamma = 0.95;
  double sigma_min = 1.0;
  double g_max = 0.5;
  double alpha = 1.0;
  double lambda_init = 1.0;
  double tau = 0.1;
  double gate_bias_init = -3.0;
  double dropout_p = 0.1;
  // Per-position L2 cap on the weighted perturbation; 0 disables it.
  double clip_norm = 1.0;
  bool multimodal = true;
  bool use_positions = true;
  // Forces every g_b to this value (ablations, identity checks).
  std::optional<double> gate_override;

  std::size_t active_modes() const noexcept { return multimodal ? modes : 1; }
  std::size_t gating_hidden() const noexcept { return std::max<std::size_t>(1, width / 2); }
  std::size_t shared_width() const noexcept { return std::max<std::size_t>(1, width / 2); }
  std::size_t gate_hidden() const noexcept { return std::max<std::size_t>(1, width / 4); }

  void validate() const;
};

void to_json(nlohmann::json& j, const EyeLayerConfig& c);
void from_json(const nlohmann::json& j, EyeLayerConfig& c);

inline constexpr std::size_t kGateFeatureCount = 4;

struct EyeLayerParams {
  // Sparse gating network.
  Tensor gating_w1, gating_b1, gating_w2, gating_b2;
  // Shared head and per-mode heads (one column per mode).
  Tensor head_w, head_b, head_ln_gamma, head_ln_beta;
  Tensor mu_w, mu_b, sigma_w, sigma_b;
  // Low-rank bottleneck.
  Tensor w_down, w_up;
  Tensor lambda;
  // Highway gate MLP.
  Tensor gate_w1, gate_b1, gate_w2, gate_b2;

  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> all() const;
};

EyeLayerParams init_eyelayer(const EyeLayerConfig& config, std::mt19937_64& rng);

// Projection parameter count of the low-rank pair: 2 d r.
std::size_t lowrank_parameter_count(std::size_t width, std::size_t rank);

// ---- individual stages -------------------------------------------------

struct PoolResult {
  Tensor embedding;             // [B, d]
  std::vector<bool> empty_row;  // mask summed to zero for that sample
};

// e_b = sum_i M_i D_i H_bi / (sum_i M_i + eps), M = attn * (1 - special),
// D_i = gamma^{p_i} when positions are given (else 1).
PoolResult pool_code_embedding(const Tensor& hidden, std::span<const double> attn_mask,
                               std::span<const double> special_mask, std::span<const double> positions, double gamma,
                               double eps = 1e-8);

// softmax(W2 gelu(W1 e + b1) + b2): [B, d] -> [B, K].
Tensor gate_modes(const Tensor& embedding, const EyeLayerParams& params);

struct ModeParams {
  Tensor mu;     // [B, K]
  Tensor sigma;  // [B, K]
};

// lengths[b] is the code-region length of sample b.
ModeParams predict_mode_params(const Tensor& embedding, std::span<const std::size_t> lengths,
                               const EyeLayerParams& params, const EyeLayerConfig& config, bool training,
                               std::mt19937_64& rng);

struct Mixture {
  Tensor prior;       // [L]
  Tensor mode_probs;  // [K, L], each row a normalized Gaussian
};

// weights/mu/sigma: [K].
Mixture build_mixture(const Tensor& weights, const Tensor& mu, const Tensor& sigma, std::size_t length);

// ReLU(H W_down) W_up.
Tensor lowrank_perturbation(const Tensor& hidden, const EyeLayerParams& params);

// lambda * P_b(i) * dH_bi * A_i, then row-norm clipping when clip_norm > 0.
// prior: [B, L] (zero outside the code region), valid: B*L.
Tensor weight_perturbation(const Tensor& delta_base, const Tensor& prior, const Tensor& lambda,
                           std::span<const double> valid, double clip_norm);

// Per-sample features: entropy(P), max(P), active-mode count, entropy(w).
Tensor gate_features(const std::vector<Tensor>& priors, const Tensor& weights, double tau);

// g_b = g_max * sigmoid(MLP([LN(mean_A H_b); f_b])): -> [B].
Tensor adaptive_gate(const Tensor& hidden, const std::vector<Tensor>& priors, const Tensor& weights,
                     std::span<const double> valid, const EyeLayerParams& params, const EyeLayerConfig& config);

// H + alpha * g_b * dH.
Tensor integrate(const Tensor& hidden, const Tensor& delta, const Tensor& gate, double alpha);

// ---- composed forward --------------------------------------------------

struct EyeInputs {
  Tensor hidden;                      // [B, L, d]
  std::span<const double> attn_mask;  // B*L, pooling mask before special removal
  std::span<const double> special_mask;
  std::span<const double> valid_mask;  // A: positions eligible for perturbation
};

struct SampleMixture {
  Tensor weights;     // [K]
  Tensor mu;          // [K]
  Tensor sigma;       // [K]
  Tensor prior;       // [L_b]
  Tensor mode_probs;  // [K, L_b]
  std::vector<std::size_t> positions;  // sequence positions of the region
};

struct EyeOutput {
  Tensor hidden;  // H'
  std::vector<SampleMixture> mixtures;
  Tensor gate;  // [B]
  std::vector<bool> empty_pool_row;
};

EyeOutput eyelayer_forward(const EyeInputs& inputs, const EyeLayerConfig& config, const EyeLayerParams& params,
                           bool training, std::mt19937_64& rng);

}  // namespace gazeprior::eye
