#include "gazeprior/eyelayer.hpp"

#include <algorithm>
#include <cmath>

#include "gazeprior/error.hpp"
#include "gazeprior/numerics/ops.hpp"

namespace gazeprior::eye {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLogEps = 1e-12;

Tensor normal_param(num::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(num::numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor const_param(num::Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

void EyeLayerConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "eyelayer: " + what);
  };
  check(modes >= 1, "modes must be >= 1");
  check(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0,1]");
  check(rank > 0 && rank < width, "rank must satisfy 0 < r < d");
  check(g_max > 0.0, "g_max must be positive");
  check(tau > 0.0 && tau < 1.0, "tau must lie in (0,1)");
  check(sigma_min > 0.0, "sigma_min must be positive");
  check(dropout_p >= 0.0 && dropout_p < 1.0, "dropout_p must lie in [0,1)");
  check(alpha >= 0.0, "alpha must be non-negative");
  check(clip_norm >= 0.0, "clip_norm must be non-negative");
  check(!gate_override || (*gate_override >= 0.0 && *gate_override <= g_max), "gate_override must lie in [0,g_max]");
}

void to_json(nlohmann::json& j, const EyeLayerConfig& c) {
  j = {{"modes", c.modes},         {"width", c.width},
       {"rank", c.rank},           {"gamma", c.gamma},
       {"sigma_min", c.sigma_min}, {"g_max", c.g_max},
       {"alpha", c.alpha},         {"lambda_init", c.lambda_init},
       {"tau", c.tau},             {"gate_bias_init", c.gate_bias_init},
       {"dropout_p", c.dropout_p}, {"clip_norm", c.clip_norm},
       {"multimodal", c.multimodal}, {"use_positions", c.use_positions}};
  j["gate_override"] = c.gate_override ? nlohmann::json(*c.gate_override) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, EyeLayerConfig& c) {
  EyeLayerConfig d;
  c.modes = j.value("modes", d.modes);
  c.width = j.value("width", d.width);
  c.rank = j.value("rank", d.rank);
  c.gamma = j.value("gamma", d.gamma);
  c.sigma_min = j.value("sigma_min", d.sigma_min);
  c.g_max = j.value("g_max", d.g_max);
  c.alpha = j.value("alpha", d.alpha);
  c.lambda_init = j.value("lambda_init", d.lambda_init);
  c.tau = j.value("tau", d.tau);
  c.gate_bias_init = j.value("gate_bias_init", d.gate_bias_init);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.multimodal = j.value("multimodal", d.multimodal);
  c.use_positions = j.value("use_positions", d.use_positions);
  if (j.contains("gate_override") && !j["gate_override"].is_null()) {
    c.gate_override = j["gate_override"].get<double>();
  } else {
    c.gate_override.reset();
  }
}

std::vector<std::pair<std::string, Tensor>> EyeLayerParams::named() const {
  return {{"eyelayer.gating.w1", gating_w1},   {"eyelayer.gating.b1", gating_b1},
          {"eyelayer.gating.w2", gating_w2},   {"eyelayer.gating.b2", gating_b2},
          {"eyelayer.head.w", head_w},         {"eyelayer.head.b", head_b},
          {"eyelayer.head.ln_gamma", head_ln_gamma}, {"eyelayer.head.ln_beta", head_ln_beta},
          {"eyelayer.mu.w", mu_w},             {"eyelayer.mu.b", mu_b},
          {"eyelayer.sigma.w", sigma_w},       {"eyelayer.sigma.b", sigma_b},
          {"eyelayer.w_down", w_down},         {"eyelayer.w_up", w_up},
          {"eyelayer.lambda", lambda},         {"eyelayer.gate.w1", gate_w1},
          {"eyelayer.gate.b1", gate_b1},       {"eyelayer.gate.w2", gate_w2},
          {"eyelayer.gate.b2", gate_b2}};
}

std::vector<Tensor> EyeLayerParams::all() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

EyeLayerParams init_eyelayer(const EyeLayerConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t d = config.width;
  const std::size_t k = config.active_modes();
  const std::size_t hg = config.gating_hidden();
  const std::size_t hs = config.shared_width();
  const std::size_t hh = config.gate_hidden();
  EyeLayerParams p;
  p.gating_w1 = normal_param({d, hg}, kInitStd, rng);
  p.gating_b1 = const_param({hg}, 0.0);
  p.gating_w2 = normal_param({hg, k}, kInitStd, rng);
  p.gating_b2 = const_param({k}, 0.0);
  p.head_w = normal_param({d, hs}, kInitStd, rng);
  p.head_b = const_param({hs}, 0.0);
  p.head_ln_gamma = const_param({hs}, 1.0);
  p.head_ln_beta = const_param({hs}, 0.0);
  p.mu_w = normal_param({hs, k}, kInitStd, rng);
  p.mu_b = const_param({k}, 0.0);
  p.sigma_w = normal_param({hs, k}, kInitStd, rng);
  p.sigma_b = const_param({k}, -1.0);
  // Centers start spread over early, middle and late parts of the region.
  if (k > 1) {
    auto mu_b = p.mu_b.mutable_data();
    for (std::size_t m = 0; m < k; ++m) {
      mu_b[m] = logit(0.2 + 0.6 * static_cast<double>(m) / static_cast<double>(k - 1));
    }
  }
  p.w_down = normal_param({d, config.rank}, kInitStd, rng);
  p.w_up = normal_param({config.rank, d}, kInitStd, rng);
  p.lambda = const_param({1}, config.lambda_init);
  p.gate_w1 = normal_param({d + kGateFeatureCount, hh}, kInitStd, rng);
  p.gate_b1 = const_param({hh}, 0.0);
  p.gate_w2 = normal_param({hh, 1}, kInitStd, rng);
  p.gate_b2 = const_param({1}, config.gate_bias_init);
  return p;
}

std::size_t lowrank_parameter_count(std::size_t width, std::size_t rank) { return 2 * width * rank; }

PoolResult pool_code_embedding(const Tensor& hidden, std::span<const double> attn_mask,
                               std::span<const double> special_mask, std::span<const double> positions, double gamma,
                               double eps) {
  if (hidden.rank() != 3) fail(ErrorKind::kDimension, "pool: hidden must be [B,L,d]");
  const std::size_t batch = hidden.dim(0);
  const std::size_t len = hidden.dim(1);
  if (attn_mask.size() != batch * len || special_mask.size() != batch * len ||
      (!positions.empty() && positions.size() != batch * len)) {
    fail(ErrorKind::kDimension, "pool: mask sizes must equal B*L");
  }
  PoolResult result;
  result.empty_row.assign(batch, false);
  std::vector<double> weights(batch * len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double denom = 0.0;
    for (std::size_t i = 0; i < len; ++i) denom += attn_mask[b * len + i] * (1.0 - special_mask[b * len + i]);
    result.empty_row[b] = denom == 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double m = attn_mask[b * len + i] * (1.0 - special_mask[b * len + i]);
      const double decay = positions.empty() ? 1.0 : std::pow(gamma, positions[b * len + i]);
      weights[b * len + i] = m * decay / (denom + eps);
    }
  }
  result.embedding = num::weighted_row_sum(hidden, weights);
  return result;
}

Tensor gate_modes(const Tensor& embedding, const EyeLayerParams& params) {
  using namespace num;
  const Tensor hidden = gelu(add(matmul(embedding, params.gating_w1), params.gating_b1));
  return softmax(add(matmul(hidden, params.gating_w2), params.gating_b2));
}

ModeParams predict_mode_params(const Tensor& embedding, std::span<const std::size_t> lengths,
                               const EyeLayerParams& params, const EyeLayerConfig& config, bool training,
                               std::mt19937_64& rng) {
  using namespace num;
  const std::size_t batch = embedding.dim(0);
  const std::size_t k = params.mu_b.numel();
  if (lengths.size() != batch) fail(ErrorKind::kDimension, "predict_mode_params: one length per sample required");
  std::vector<double> mu_scale(batch * k);
  std::vector<double> sigma_scale(batch * k);
  for (std::size_t b = 0; b < batch; ++b) {
    if (lengths[b] == 0) fail(ErrorKind::kDimension, "predict_mode_params: code region of length 0");
    const double len = static_cast<double>(lengths[b]);
    for (std::size_t m = 0; m < k; ++m) {
      mu_scale[b * k + m] = len - 1.0;
      sigma_scale[b * k + m] = std::max(0.0, len / 2.0 - config.sigma_min);
    }
  }
  Tensor shared = gelu(add(matmul(embedding, params.head_w), params.head_b));
  shared = layernorm(shared, params.head_ln_gamma, params.head_ln_beta);
  shared = dropout(shared, config.dropout_p, training, rng);
  const Tensor mu_raw = add(matmul(shared, params.mu_w), params.mu_b);
  const Tensor sigma_raw = add(matmul(shared, params.sigma_w), params.sigma_b);
  ModeParams out;
  out.mu = mul(sigmoid(mu_raw), Tensor::from({batch, k}, std::move(mu_scale)));
  out.sigma = add_scalar(mul(sigmoid(sigma_raw), Tensor::from({batch, k}, std::move(sigma_scale))), config.sigma_min);
  return out;
}

Mixture build_mixture(const Tensor& weights, const Tensor& mu, const Tensor& sigma, std::size_t length) {
  using namespace num;
  if (length == 0) fail(ErrorKind::kDimension, "build_mixture: length 0");
  const std::size_t k = mu.numel();
  if (weights.numel() != k || sigma.numel() != k) fail(ErrorKind::kDimension, "build_mixture: K mismatch");
  Mixture mix;
  mix.mode_probs = softmax(gaussian_logits(reshape(mu, {k}), reshape(sigma, {k}), length));
  mix.prior = reshape(matmul(reshape(weights, {1, k}), mix.mode_probs), {length});
  return mix;
}

Tensor lowrank_perturbation(const Tensor& hidden, const EyeLayerParams& params) {
  using namespace num;
  return matmul(relu(matmul(hidden, params.w_down)), params.w_up);
}

Tensor weight_perturbation(const Tensor& delta_base, const Tensor& prior, const Tensor& lambda,
                           std::span<const double> valid, double clip_norm) {
  using namespace num;
  if (valid.size() != prior.numel()) fail(ErrorKind::kDimension, "weight_perturbation: mask size mismatch");
  const Tensor masked = mul(prior, Tensor::from(prior.shape(), std::vector<double>(valid.begin(), valid.end())));
  Tensor out = mul_prefix(delta_base, mul(masked, lambda));
  if (clip_norm > 0.0) out = clip_row_norm(out, clip_norm);
  return out;
}

Tensor gate_features(const std::vector<Tensor>& priors, const Tensor& weights, double tau) {
  using namespace num;
  std::vector<Tensor> rows;
  for (std::size_t b = 0; b < priors.size(); ++b) {
    const Tensor& p = priors[b];
    const Tensor w = select(weights, b);
    double active = 0.0;
    for (double v : w.data()) active += v > tau ? 1.0 : 0.0;
    const Tensor entropy = neg(sum(mul(p, log(add_scalar(p, kLogEps)))));
    const Tensor peak = max_all(p);
    const Tensor w_entropy = neg(sum(mul(w, log(add_scalar(w, kLogEps)))));
    rows.push_back(stack({entropy, peak, Tensor::scalar(active), w_entropy}));
  }
  return stack(rows);
}

Tensor adaptive_gate(const Tensor& hidden, const std::vector<Tensor>& priors, const Tensor& weights,
                     std::span<const double> valid, const EyeLayerParams& params, const EyeLayerConfig& config) {
  using namespace num;
  const std::size_t batch = hidden.dim(0);
  const std::size_t len = hidden.dim(1);
  if (config.gate_override) return Tensor::full({batch}, *config.gate_override);
  std::vector<double> mean_w(batch * len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double count = 0.0;
    for (std::size_t i = 0; i < len; ++i) count += valid[b * len + i];
    if (count == 0.0) continue;
    for (std::size_t i = 0; i < len; ++i) mean_w[b * len + i] = valid[b * len + i] / count;
  }
  const Tensor pooled = layernorm(weighted_row_sum(hidden, mean_w), Tensor(), Tensor());
  const Tensor input = concat_last(pooled, gate_features(priors, weights, config.tau));
  const Tensor h = gelu(add(matmul(input, params.gate_w1), params.gate_b1));
  const Tensor logits = reshape(add(matmul(h, params.gate_w2), params.gate_b2), {batch});
  return scale(sigmoid(logits), config.g_max);
}

Tensor integrate(const Tensor& hidden, const Tensor& delta, const Tensor& gate, double alpha) {
  using namespace num;
  if (alpha == 0.0) return hidden;
  // A constant zero gate keeps H bit-for-bit, signed zeros included.
  if (!gate.requires_grad() && std::all_of(gate.data().begin(), gate.data().end(), [](double g) { return g == 0.0; })) {
    return hidden;
  }
  return add(hidden, mul_prefix(scale(delta, alpha), gate));
}

EyeOutput eyelayer_forward(const EyeInputs& in, const EyeLayerConfig& config, const EyeLayerParams& params,
                           bool training, std::mt19937_64& rng) {
  using namespace num;
  const Tensor& h = in.hidden;
  if (h.rank() != 3 || h.dim(2) != config.width) {
    fail(ErrorKind::kDimension, "eyelayer: hidden must be [B,L," + std::to_string(config.width) + "]");
  }
  const std::size_t batch = h.dim(0);
  const std::size_t len = h.dim(1);
  if (in.valid_mask.size() != batch * len) fail(ErrorKind::kDimension, "eyelayer: valid mask size");

  std::vector<std::vector<std::size_t>> region(batch);
  std::vector<double> positions(batch * len, 0.0);
  std::vector<std::size_t> lengths(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      if (in.valid_mask[b * len + i] != 0.0) {
        positions[b * len + i] = static_cast<double>(region[b].size());
        region[b].push_back(i);
      }
    }
    lengths[b] = region[b].size();
  }

  const PoolResult pooled = pool_code_embedding(h, in.attn_mask, in.special_mask,
                                                config.use_positions ? std::span<const double>(positions)
                                                                     : std::span<const double>(),
                                                config.gamma);
  const std::size_t k = config.active_modes();
  const Tensor weights = config.multimodal ? gate_modes(pooled.embedding, params) : Tensor::full({batch, 1}, 1.0);
  const ModeParams modes = predict_mode_params(pooled.embedding, lengths, params, config, training, rng);

  EyeOutput out;
  out.empty_pool_row = pooled.empty_row;
  std::vector<Tensor> priors;
  std::vector<Tensor> scattered;
  for (std::size_t b = 0; b < batch; ++b) {
    SampleMixture s;
    s.weights = reshape(select(weights, b), {k});
    s.mu = select(modes.mu, b);
    s.sigma = select(modes.sigma, b);
    Mixture mix = build_mixture(s.weights, s.mu, s.sigma, lengths[b]);
    s.prior = mix.prior;
    s.mode_probs = mix.mode_probs;
    s.positions = region[b];
    priors.push_back(s.prior);
    scattered.push_back(scatter(s.prior, region[b], len));
    out.mixtures.push_back(std::move(s));
  }
  const Tensor prior_full = stack(scattered);
  const Tensor delta = weight_perturbation(lowrank_perturbation(h, params), prior_full, params.lambda,
                                           in.valid_mask, config.clip_norm);
  out.gate = adaptive_gate(h, priors, weights, in.valid_mask, params, config);
  out.hidden = integrate(h, delta, out.gate, config.alpha);
  return out;
}

}  // namespace gazeprior::eye
