#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gazeprior/astalign.hpp"
#include "gazeprior/eyelayer.hpp"
#include "gazeprior/numerics/tensor.hpp"
#include "gazeprior/tokenizer.hpp"

namespace gazeprior::model {

using num::Tensor;

enum class Arch { kDecoderOnly, kEncoderDecoder };
std::string_view to_string(Arch arch);
Arch arch_from_string(std::string_view name);

struct ModelConfig {
  std::size_t n_layers = 4;  // decoder-only depth, or encoder depth
  std::size_t d = 128;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 4096;
  std::size_t max_len = 256;
  Arch arch = Arch::kDecoderOnly;
  // Block whose output feeds the EyeLayer. Encoder-decoder models default to
  // the last encoder block.
  std::optional<std::size_t> eyelayer_layer;
  std::size_t n_decoder_layers = 2;  // encoder-decoder only

  void validate() const;
  std::size_t hook_layer() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  AttentionParams self_attn;
  // Cross-attention; defined only in encoder-decoder decoder blocks.
  Tensor lnx_gamma, lnx_beta;
  AttentionParams cross_attn;
  Tensor ln2_gamma, ln2_beta;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct ModelParams {
  Tensor token_embedding;     // [V, d]
  Tensor position_embedding;  // [max_len, d]
  std::vector<BlockParams> blocks;
  Tensor final_ln_gamma, final_ln_beta;
  // Encoder-decoder only.
  Tensor dec_position_embedding;
  std::vector<BlockParams> decoder_blocks;
  Tensor dec_final_ln_gamma, dec_final_ln_beta;
  Tensor lm_head_w, lm_head_b;
  std::optional<eye::EyeLayerParams> eye;

  std::vector<std::pair<std::string, Tensor>> named_base() const;
  std::vector<std::pair<std::string, Tensor>> named_eye() const;
  // Base parameters first, then EyeLayer parameters.
  std::vector<std::pair<std::string, Tensor>> named() const;
};

struct Model {
  ModelConfig config;
  std::optional<eye::EyeLayerConfig> eye_config;
  ModelParams params;

  bool has_eyelayer() const noexcept { return eye_config.has_value(); }
};

// Base and EyeLayer weights come from independent streams of `seed`, so two
// models with the same seed share base weights whether or not they carry an
// EyeLayer. Every value is representable in 32-bit float.
Model init_model(const ModelConfig& config, const std::optional<eye::EyeLayerConfig>& eye_config, std::uint64_t seed);

std::size_t parameter_count(const Model& model);

struct Example {
  std::vector<int> code_ids;
  std::vector<int> summary_ids;
  bool has_summary = true;
  std::optional<align::FixationTarget> target;  // over code_ids positions
};

struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> token_ids;        // B*L, PAD-filled
  std::vector<double> attn_mask;     // real tokens
  std::vector<double> special_mask;  // BOS/EOS/SEP/PAD
  std::vector<double> code_mask;     // code region A
  std::vector<int> labels;           // decoder-only; -100 outside the summary
  // Encoder-decoder decoder side.
  std::size_t dec_length = 0;
  std::vector<int> dec_ids;
  std::vector<double> dec_mask;
  std::vector<int> dec_labels;
  std::vector<std::optional<align::FixationTarget>> targets;
  bool has_labels = false;

  const std::vector<int>& target_labels(Arch arch) const {
    return arch == Arch::kDecoderOnly ? labels : dec_labels;
  }
};

// Right-pads to the longest sample. Throws kLength past max_len.
Batch make_batch(std::span<const Example> examples, const ModelConfig& config, const tok::Vocab& vocab);

// Prompt tokens that wrap the code in a decoder-only sequence, excluding the
// summary and its EOS.
std::size_t prompt_overhead(const tok::Vocab& vocab);

struct ForwardResult {
  Tensor logits;  // [B, L, V] (decoder-only) or [B, L_dec, V]
  std::optional<eye::EyeOutput> eye;
};

ForwardResult forward(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng);

// Hidden states at the EyeLayer hook, before the EyeLayer runs.
Tensor hook_hidden(const Model& model, const Batch& batch);
eye::EyeInputs eye_inputs(const Batch& batch, const Tensor& hidden);

// Next-token cross-entropy: logits[t] predicts labels[t + 1].
Tensor generation_loss(const Tensor& logits, std::span<const int> labels);

struct GenerateOptions {
  std::size_t max_new = 32;
  bool use_cache = true;
};

// Greedy continuation of the prompt built from `code_ids`; stops at EOS
// (not included) or after max_new tokens.
std::vector<int> generate(const Model& model, const tok::Vocab& vocab, std::span<const int> code_ids,
                          const GenerateOptions& options);

}  // namespace gazeprior::model
