#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "gazeprior/error.hpp"
#include "gazeprior/eyelayer.hpp"
#include "gazeprior/numerics/grad_check.hpp"
#include "gazeprior/numerics/ops.hpp"
#include "support.hpp"

namespace gazeprior {
namespace {

using num::Tensor;
using testing::random_tensor;
using testing::values_of;

void fill(Tensor& t, double value) {
  for (double& v : t.mutable_data()) v = value;
}

eye::EyeLayerConfig small_config(std::size_t width = 8) {
  eye::EyeLayerConfig c;
  c.width = width;
  c.rank = 3;
  c.dropout_p = 0.0;
  c.clip_norm = 0.0;
  return c;
}

// Gaussian mixture density evaluated directly from its definition.
std::vector<double> mixture_oracle(const std::vector<double>& w, const std::vector<double>& mu,
                                   const std::vector<double>& sigma, std::size_t length) {
  std::vector<double> p(length, 0.0);
  for (std::size_t k = 0; k < w.size(); ++k) {
    double z = 0.0;
    std::vector<double> g(length);
    for (std::size_t i = 0; i < length; ++i) {
      const double d = static_cast<double>(i) - mu[k];
      g[i] = std::exp(-d * d / (2 * sigma[k] * sigma[k]));
      z += g[i];
    }
    for (std::size_t i = 0; i < length; ++i) p[i] += w[k] * g[i] / z;
  }
  return p;
}

TEST(Pool, EqualRowsWithoutDecayReturnTheRow) {
  auto h = Tensor::from({1, 3, 2}, {4, -1, 4, -1, 4, -1});
  std::vector<double> attn{1, 1, 1}, special{0, 0, 0};
  auto r = eye::pool_code_embedding(h, attn, special, {}, 0.95);
  EXPECT_NEAR(r.embedding[0], 4.0, 1e-7);
  EXPECT_NEAR(r.embedding[1], -1.0, 1e-7);
}

TEST(Pool, MaskedRowIsIgnored) {
  auto h = Tensor::from({1, 2, 2}, {2, 2, 9, 9});
  std::vector<double> attn{1, 0}, special{0, 0};
  auto r = eye::pool_code_embedding(h, attn, special, {}, 0.95);
  EXPECT_NEAR(r.embedding[0], 2.0, 1e-7);
  EXPECT_NEAR(r.embedding[1], 2.0, 1e-7);
}

TEST(Pool, DecayNumeratorOverPlainMaskCount) {
  auto h = Tensor::from({1, 2, 2}, {1, 1, 1, 1});
  std::vector<double> attn{1, 1}, special{0, 0}, pos{0, 1};
  auto r = eye::pool_code_embedding(h, attn, special, pos, 0.95);
  EXPECT_NEAR(r.embedding[0], (1.0 + 0.95) / 2.0, 1e-8);
  EXPECT_NEAR(r.embedding[1], 0.975, 1e-8);
}

TEST(Pool, EmptyRowIsZeroAndFlagged) {
  auto h = Tensor::from({2, 2, 1}, {3, 3, 5, 5});
  std::vector<double> attn{1, 1, 1, 1}, special{0, 0, 1, 1};
  auto r = eye::pool_code_embedding(h, attn, special, {}, 0.95);
  EXPECT_FALSE(r.empty_row[0]);
  EXPECT_TRUE(r.empty_row[1]);
  EXPECT_EQ(r.embedding[1], 0.0);
}

TEST(GateModes, ZeroParametersGiveUniformWeights) {
  std::mt19937_64 rng(1);
  auto p = eye::init_eyelayer(small_config(), rng);
  for (Tensor* t : {&p.gating_w1, &p.gating_b1, &p.gating_w2, &p.gating_b2}) fill(*t, 0.0);
  auto w = eye::gate_modes(random_tensor({2, 8}, rng), p);
  for (double v : w.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(GateModes, HandLogits) {
  std::mt19937_64 rng(1);
  auto p = eye::init_eyelayer(small_config(), rng);
  fill(p.gating_w2, 0.0);
  auto b2 = p.gating_b2.mutable_data();
  b2[0] = std::log(2.0);
  b2[1] = 0.0;
  b2[2] = 0.0;
  auto w = eye::gate_modes(random_tensor({1, 8}, rng), p);
  EXPECT_NEAR(w[0], 0.5, 1e-15);
  EXPECT_NEAR(w[1], 0.25, 1e-15);
  EXPECT_NEAR(w[2], 0.25, 1e-15);
}

TEST(GateModes, SingleModeIsOne) {
  auto c = small_config();
  c.modes = 1;
  std::mt19937_64 rng(1);
  auto p = eye::init_eyelayer(c, rng);
  auto w = eye::gate_modes(random_tensor({3, 8}, rng), p);
  for (double v : w.data()) EXPECT_EQ(v, 1.0);
}

TEST(ModeParams, ZeroPreActivationCentersTheMode) {
  auto c = small_config();
  std::mt19937_64 rng(2);
  auto p = eye::init_eyelayer(c, rng);
  fill(p.mu_w, 0.0);
  fill(p.mu_b, 0.0);
  std::vector<std::size_t> lengths{9, 4};
  auto m = eye::predict_mode_params(random_tensor({2, 8}, rng), lengths, p, c, false, rng);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(m.mu[k], 4.0);
    EXPECT_DOUBLE_EQ(m.mu[3 + k], 1.5);
  }
}

TEST(ModeParams, VeryNegativeSpreadHitsTheFloor) {
  auto c = small_config();
  std::mt19937_64 rng(2);
  auto p = eye::init_eyelayer(c, rng);
  fill(p.sigma_w, 0.0);
  fill(p.sigma_b, -800.0);
  std::vector<std::size_t> lengths{20};
  auto m = eye::predict_mode_params(random_tensor({1, 8}, rng), lengths, p, c, false, rng);
  for (double s : m.sigma.data()) EXPECT_EQ(s, c.sigma_min);
}

TEST(ModeParams, ZeroLengthIsDimensionError) {
  auto c = small_config();
  std::mt19937_64 rng(2);
  auto p = eye::init_eyelayer(c, rng);
  std::vector<std::size_t> lengths{0};
  try {
    eye::predict_mode_params(random_tensor({1, 8}, rng), lengths, p, c, false, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
  }
}

TEST(Mixture, LengthOneIsDegenerate) {
  auto mix = eye::build_mixture(Tensor::from({2}, {0.3, 0.7}), Tensor::from({2}, {0, 0}),
                                Tensor::from({2}, {1, 3}), 1);
  EXPECT_DOUBLE_EQ(mix.prior[0], 1.0);
}

TEST(Mixture, CenteredModeIsSymmetric) {
  const std::size_t len = 11;
  auto mix = eye::build_mixture(Tensor::from({1}, {1}), Tensor::from({1}, {5}), Tensor::from({1}, {2.3}), len);
  for (std::size_t i = 0; i < len; ++i) EXPECT_NEAR(mix.prior[i], mix.prior[len - 1 - i], 1e-15);
}

TEST(Mixture, HandEvaluation) {
  auto mix = eye::build_mixture(Tensor::from({1}, {1}), Tensor::from({1}, {1}), Tensor::from({1}, {1}), 3);
  const double edge = std::exp(-0.5) / (1.0 + 2.0 * std::exp(-0.5));
  EXPECT_NEAR(mix.prior[0], edge, 1e-12);
  EXPECT_NEAR(mix.prior[1], 1.0 - 2.0 * edge, 1e-12);
  EXPECT_NEAR(mix.prior[0], 0.2741, 5e-5);
  EXPECT_NEAR(mix.prior[1], 0.4519, 5e-5);
}

TEST(Mixture, MatchesDirectDensityOnRandomDraws) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t len = 1 + rng() % 64;
    std::vector<double> w{0.2, 0.5, 0.3};
    std::vector<double> mu(3), sigma(3);
    for (auto& m : mu) m = std::uniform_real_distribution<double>(0, static_cast<double>(len - 1))(rng);
    for (auto& s : sigma) s = std::uniform_real_distribution<double>(1, 1 + len / 2.0)(rng);
    auto mix = eye::build_mixture(Tensor::from({3}, w), Tensor::from({3}, mu), Tensor::from({3}, sigma), len);
    auto want = mixture_oracle(w, mu, sigma, len);
    for (std::size_t i = 0; i < len; ++i) EXPECT_NEAR(mix.prior[i], want[i], 1e-12);
  }
}

TEST(LowRank, ZeroHiddenGivesZero) {
  std::mt19937_64 rng(4);
  auto p = eye::init_eyelayer(small_config(), rng);
  auto d = eye::lowrank_perturbation(Tensor::zeros({1, 3, 8}), p);
  for (double v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(LowRank, ReluDeadZoneGivesZero) {
  std::mt19937_64 rng(4);
  auto p = eye::init_eyelayer(small_config(), rng);
  fill(p.w_down, 1.0);
  auto d = eye::lowrank_perturbation(Tensor::full({1, 2, 8}, -0.5), p);
  for (double v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(LowRank, ParameterBudget) {
  EXPECT_EQ(eye::lowrank_parameter_count(2048, 16), 65536u);
  EXPECT_EQ(eye::lowrank_parameter_count(2048, 16) * 64, 2048u * 2048u);
  std::mt19937_64 rng(4);
  auto c = small_config(16);
  c.rank = 5;
  auto p = eye::init_eyelayer(c, rng);
  EXPECT_EQ(p.w_down.numel() + p.w_up.numel(), eye::lowrank_parameter_count(16, 5));
}

TEST(WeightPerturbation, ZeroValidMaskGivesZero) {
  std::mt19937_64 rng(5);
  auto delta = random_tensor({1, 2, 3}, rng);
  std::vector<double> valid{0, 0};
  auto out = eye::weight_perturbation(delta, Tensor::from({1, 2}, {0.5, 0.5}), Tensor::from({1}, {1}), valid, 0.0);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(WeightPerturbation, ZeroScaleGivesZero) {
  std::mt19937_64 rng(5);
  auto delta = random_tensor({1, 2, 3}, rng);
  std::vector<double> valid{1, 1};
  auto out = eye::weight_perturbation(delta, Tensor::from({1, 2}, {0.5, 0.5}), Tensor::from({1}, {0}), valid, 0.0);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(WeightPerturbation, HandEvaluation) {
  std::vector<double> valid{1};
  auto out = eye::weight_perturbation(Tensor::from({1, 1, 1}, {4}), Tensor::from({1, 1}, {0.25}),
                                      Tensor::from({1}, {2}), valid, 0.0);
  EXPECT_DOUBLE_EQ(out[0], 2.0);
}

TEST(WeightPerturbation, ClippingCapsRowNorm) {
  std::vector<double> valid{1};
  auto out = eye::weight_perturbation(Tensor::from({1, 1, 2}, {30, 40}), Tensor::from({1, 1}, {1}),
                                      Tensor::from({1}, {1}), valid, 1.0);
  EXPECT_NEAR(std::hypot(out[0], out[1]), 1.0, 1e-12);
}

struct GateFixture {
  eye::EyeLayerConfig config = small_config();
  std::mt19937_64 rng{6};
  eye::EyeLayerParams params = eye::init_eyelayer(config, rng);
  Tensor hidden = random_tensor({2, 5, 8}, rng);
  std::vector<Tensor> priors{Tensor::full({5}, 0.2), Tensor::from({3}, {0.2, 0.5, 0.3})};
  Tensor weights = Tensor::from({2, 3}, {0.2, 0.3, 0.5, 1, 0, 0});
  std::vector<double> valid{1, 1, 1, 1, 1, 0, 1, 1, 1, 0};

  Tensor gate() { return eye::adaptive_gate(hidden, priors, weights, valid, params, config); }
};

TEST(Gate, VeryNegativeBiasClosesTheGate) {
  GateFixture f;
  fill(f.params.gate_b2, -1e4);
  for (double g : values_of(f.gate())) EXPECT_EQ(g, 0.0);
}

TEST(Gate, ZeroLogitIsHalfOpen) {
  GateFixture f;
  fill(f.params.gate_w2, 0.0);
  fill(f.params.gate_b2, 0.0);
  for (double g : values_of(f.gate())) EXPECT_DOUBLE_EQ(g, 0.5 * f.config.g_max);
}

TEST(Gate, NearlyClosedAtInitialization) {
  GateFixture f;
  auto g = f.gate();
  EXPECT_LT((g[0] + g[1]) / 2.0, 0.05 * f.config.g_max);
}

TEST(Gate, OverrideIsConstant) {
  GateFixture f;
  f.config.gate_override = 0.2;
  for (double g : values_of(f.gate())) EXPECT_EQ(g, 0.2);
}

TEST(Integrate, ZeroGateIsExactIdentity) {
  std::mt19937_64 rng(7);
  auto h = random_tensor({2, 3, 4}, rng);
  auto d = random_tensor({2, 3, 4}, rng);
  auto out = eye::integrate(h, d, Tensor::zeros({2}), 1.0);
  EXPECT_EQ(values_of(out), values_of(h));
}

TEST(Integrate, ZeroAlphaIsExactIdentity) {
  std::mt19937_64 rng(7);
  auto h = random_tensor({2, 3, 4}, rng);
  auto out = eye::integrate(h, random_tensor({2, 3, 4}, rng), Tensor::full({2}, 0.4), 0.0);
  EXPECT_EQ(values_of(out), values_of(h));
}

TEST(Integrate, HandArithmetic) {
  auto out = eye::integrate(Tensor::from({1, 1, 1}, {1}), Tensor::from({1, 1, 1}, {0.2}), Tensor::from({1}, {0.5}), 1.0);
  EXPECT_DOUBLE_EQ(out[0], 1.1);
}

struct ForwardFixture {
  std::vector<double> attn{1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0};
  std::vector<double> special{1, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 1, 1};
  std::vector<double> valid{0, 1, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0};

  eye::EyeInputs inputs(const Tensor& h) const { return {h, attn, special, valid}; }
};

TEST(EyeForward, ForcedZeroGateKeepsHiddenAndReturnsPrior) {
  auto c = small_config();
  c.gate_override = 0.0;
  std::mt19937_64 rng(8);
  auto p = eye::init_eyelayer(c, rng);
  ForwardFixture f;
  auto h = random_tensor({2, 8, 8}, rng);
  auto out = eye::eyelayer_forward(f.inputs(h), c, p, false, rng);
  EXPECT_EQ(values_of(out.hidden), values_of(h));
  ASSERT_EQ(out.mixtures.size(), 2u);
  EXPECT_EQ(out.mixtures[0].prior.numel(), 6u);
  EXPECT_EQ(out.mixtures[1].prior.numel(), 3u);
  // Positions index the sample's own row.
  EXPECT_EQ(out.mixtures[1].positions, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(EyeForward, SingleModeAblationHasOneComponent) {
  auto c = small_config();
  c.multimodal = false;
  std::mt19937_64 rng(8);
  auto p = eye::init_eyelayer(c, rng);
  ForwardFixture f;
  auto out = eye::eyelayer_forward(f.inputs(random_tensor({2, 8, 8}, rng)), c, p, false, rng);
  for (const auto& m : out.mixtures) {
    EXPECT_EQ(m.weights.numel(), 1u);
    EXPECT_EQ(m.mode_probs.shape(), (num::Shape{1, m.prior.numel()}));
  }
}

TEST(EyeForward, PerturbationStaysInsideTheCodeRegion) {
  auto c = small_config();
  c.gate_bias_init = 2.0;
  std::mt19937_64 rng(9);
  auto p = eye::init_eyelayer(c, rng);
  ForwardFixture f;
  auto h = random_tensor({2, 8, 8}, rng);
  auto out = eye::eyelayer_forward(f.inputs(h), c, p, false, rng);
  bool changed = false;
  for (std::size_t pos = 0; pos < 16; ++pos) {
    for (std::size_t j = 0; j < 8; ++j) {
      const double a = h[pos * 8 + j], b = out.hidden[pos * 8 + j];
      if (f.valid[pos] == 0.0) {
        EXPECT_EQ(a, b) << "position " << pos;
      }
      changed = changed || a != b;
    }
  }
  EXPECT_TRUE(changed);
}

TEST(EyeForward, RandomInputsGiveNormalizedPriorAndFiniteOutput) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = small_config();
    c.clip_norm = 1.0;
    auto p = eye::init_eyelayer(c, rng);
    ForwardFixture f;
    auto out = eye::eyelayer_forward(f.inputs(random_tensor({2, 8, 8}, rng, -5, 5)), c, p, false, rng);
    for (const auto& m : out.mixtures) {
      EXPECT_NEAR(std::accumulate(m.prior.data().begin(), m.prior.data().end(), 0.0), 1.0, 1e-6);
    }
    for (double v : out.hidden.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(EyeForward, WrongWidthIsDimensionError) {
  auto c = small_config();
  std::mt19937_64 rng(8);
  auto p = eye::init_eyelayer(c, rng);
  ForwardFixture f;
  try {
    eye::eyelayer_forward(f.inputs(random_tensor({2, 8, 6}, rng)), c, p, false, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
  }
}

TEST(EyeForward, GradientsMatchFiniteDifferences) {
  for (int trial = 0; trial < 3; ++trial) {
    std::mt19937_64 rng(50 + trial);
    auto c = small_config(6);
    c.clip_norm = 0.0;
    c.g_max = 1.0;
    auto p = eye::init_eyelayer(c, rng);
    // Order-one weights and a strong prior: the small initialization leaves
    // gradients below the finite-difference noise floor.
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (auto& [name, t] : p.named()) {
      for (double& v : t.mutable_data()) v = unit(rng);
    }
    for (double& v : p.lambda.mutable_data()) v = 2.0 + std::abs(unit(rng));
    ForwardFixture f;
    auto h = random_tensor({2, 8, 6}, rng);
    auto probe = random_tensor({2, 8, 6}, rng, -1, 1, false);
    auto params = p.all();
    params.push_back(h);
    auto report = num::grad_check(
        [&] {
          std::mt19937_64 local(0);
          auto out = eye::eyelayer_forward(f.inputs(h), c, p, false, local);
          return num::sum(num::mul(out.hidden, probe));
        },
        params, 1e-6);
    EXPECT_LT(report.max_rel_error, 1e-4) << "trial " << trial << " param " << report.worst_param << " index "
                                          << report.worst_index << " analytic " << report.worst_analytic
                                          << " numeric " << report.worst_numeric;
  }
}

TEST(Config, JsonRoundTripAndValidation) {
  auto c = small_config();
  c.gate_override = 0.1;
  nlohmann::json j = c;
  auto back = j.get<eye::EyeLayerConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  c.g_max = -1.0;
  EXPECT_THROW(c.validate(), Error);
}

}  // namespace
}  // namespace gazeprior
