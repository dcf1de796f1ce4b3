#include "gazeprior/alignloss.hpp"

#include <algorithm>
#include <cmath>

#include "gazeprior/error.hpp"
#include "gazeprior/numerics/ops.hpp"

namespace gazeprior::loss {

double AlignLossConfig::separation_for(std::size_t length) const {
  return min_separation ? *min_separation : min_separation_fraction * static_cast<double>(length);
}

void AlignLossConfig::validate() const {
  for (double w : {w_centroid, w_spread, w_concentration, w_anti_uniform, w_separation}) {
    if (!(w >= 0.0)) fail(ErrorKind::kConfig, "align loss: weights must be non-negative");
  }
  if (!(margin > 0.0)) fail(ErrorKind::kConfig, "align loss: margin must be positive");
  if (min_separation ? !(*min_separation > 0.0) : !(min_separation_fraction > 0.0)) {
    fail(ErrorKind::kConfig, "align loss: minimum separation must be positive");
  }
  if (!(eps > 0.0)) fail(ErrorKind::kConfig, "align loss: eps must be positive");
}

void to_json(nlohmann::json& j, const AlignLossConfig& c) {
  j = {{"w_centroid", c.w_centroid},
       {"w_spread", c.w_spread},
       {"w_concentration", c.w_concentration},
       {"w_anti_uniform", c.w_anti_uniform},
       {"w_separation", c.w_separation},
       {"margin", c.margin},
       {"min_separation_fraction", c.min_separation_fraction},
       {"tau", c.tau},
       {"eps", c.eps}};
  j["min_separation"] = c.min_separation ? nlohmann::json(*c.min_separation) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, AlignLossConfig& c) {
  AlignLossConfig d;
  c.w_centroid = j.value("w_centroid", d.w_centroid);
  c.w_spread = j.value("w_spread", d.w_spread);
  c.w_concentration = j.value("w_concentration", d.w_concentration);
  c.w_anti_uniform = j.value("w_anti_uniform", d.w_anti_uniform);
  c.w_separation = j.value("w_separation", d.w_separation);
  c.margin = j.value("margin", d.margin);
  c.min_separation_fraction = j.value("min_separation_fraction", d.min_separation_fraction);
  c.tau = j.value("tau", d.tau);
  c.eps = j.value("eps", d.eps);
  if (j.contains("min_separation") && !j["min_separation"].is_null()) {
    c.min_separation = j["min_separation"].get<double>();
  } else {
    c.min_separation.reset();
  }
}

Window fixation_window(double mu_human, double sigma_target, std::size_t length) {
  const double center = std::round(mu_human);
  const double half = std::ceil(sigma_target);
  const double lo = std::max(0.0, center - half);
  const double hi = std::min(static_cast<double>(length), center + half + 1.0);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

Tensor loss_centroid(const Tensor& mu, double mu_human, double eps) {
  using namespace num;
  return sqrt(add_scalar(square(add_scalar(mu, -mu_human)), eps));
}

Tensor loss_spread(const Tensor& sigma, double sigma_target, double eps) {
  using namespace num;
  return sqrt(add_scalar(square(add_scalar(sigma, -sigma_target)), eps));
}

Tensor loss_concentration(const Tensor& mode_probs, Window window) {
  using namespace num;
  if (mode_probs.rank() != 2) fail(ErrorKind::kDimension, "concentration: mode_probs must be [K,L]");
  const std::size_t len = mode_probs.dim(1);
  std::vector<double> indicator(len, 0.0);
  for (std::size_t i = window.begin; i < std::min(window.end, len); ++i) indicator[i] = 1.0;
  const Tensor inside = reshape(matmul(mode_probs, Tensor::from({len, 1}, std::move(indicator))), {mode_probs.dim(0)});
  return neg(add_scalar(square(inside), -1.0));
}

Tensor loss_anti_uniform(const Tensor& mode_probs, double margin, double eps) {
  using namespace num;
  if (mode_probs.rank() != 2) fail(ErrorKind::kDimension, "anti_uniform: mode_probs must be [K,L]");
  const std::size_t len = mode_probs.dim(1);
  const double n = static_cast<double>(len);
  const Tensor mean_log =
      reshape(matmul(log(add_scalar(mode_probs, eps)), Tensor::full({len, 1}, 1.0 / n)), {mode_probs.dim(0)});
  // KL(U || P) = -ln L - mean_i ln P(i).
  return relu(add_scalar(mean_log, margin + std::log(n)));
}

Tensor loss_separation(const Tensor& weights, const Tensor& mu, double min_distance, double tau) {
  using namespace num;
  const std::size_t k = mu.numel();
  std::vector<Tensor> hinges;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      if (!(weights[a] > tau && weights[b] > tau)) continue;
      const Tensor gap = abs(sub(select(mu, a), select(mu, b)));
      hinges.push_back(relu(add_scalar(neg(gap), min_distance)));
    }
  }
  if (hinges.empty()) return Tensor::scalar(0.0);
  return sum(stack(hinges));
}

AlignTerms align_terms(const MixtureView& mix, const align::FixationTarget& target, const AlignLossConfig& config) {
  using namespace num;
  const std::size_t len = mix.mode_probs.dim(1);
  const Window window = fixation_window(target.mu_human, target.sigma_target, len);
  Tensor per_mode = scale(loss_centroid(mix.mu, target.mu_human, config.eps), config.w_centroid);
  per_mode = add(per_mode, scale(loss_spread(mix.sigma, target.sigma_target, config.eps), config.w_spread));
  per_mode = add(per_mode, scale(loss_concentration(mix.mode_probs, window), config.w_concentration));
  per_mode =
      add(per_mode, scale(loss_anti_uniform(mix.mode_probs, config.margin, config.eps), config.w_anti_uniform));
  AlignTerms terms;
  terms.match = sum(mul(mix.weights, per_mode));
  terms.separation = loss_separation(mix.weights, mix.mu, config.separation_for(len), config.tau);
  terms.total = add(terms.match, scale(terms.separation, config.w_separation));
  return terms;
}

Tensor loss_align(const MixtureView& mix, const align::FixationTarget& target, const AlignLossConfig& config) {
  return align_terms(mix, target, config).total;
}

Tensor batch_align_loss(const std::vector<MixtureView>& mixtures,
                        const std::vector<const align::FixationTarget*>& targets, const AlignLossConfig& config) {
  using namespace num;
  if (mixtures.empty()) fail(ErrorKind::kData, "align loss: no samples with fixation targets");
  if (mixtures.size() != targets.size()) fail(ErrorKind::kDimension, "align loss: one target per mixture required");
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < mixtures.size(); ++i) losses.push_back(loss_align(mixtures[i], *targets[i], config));
  return mean(stack(losses));
}

}  // namespace gazeprior::loss
