#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "gazeprior/corpus.hpp"
#include "gazeprior/eyelayer.hpp"
#include "gazeprior/model.hpp"
#include "gazeprior/numerics/tensor.hpp"
#include "gazeprior/tokenizer.hpp"

namespace gazeprior::testing {

inline num::Tensor random_tensor(const num::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                 bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(num::numel(shape));
  for (double& v : values) v = dist(rng);
  return num::Tensor::from(shape, std::move(values), requires_grad);
}

inline std::vector<double> values_of(const num::Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Small BPE vocab over the synthetic corpus; shared by model-level tests.
inline const tok::Vocab& tiny_vocab() {
  static const tok::Vocab vocab = [] {
    std::mt19937_64 rng(11);
    std::vector<std::string> corpus;
    for (const auto& p : data::synthetic_pairs(120, rng)) {
      corpus.push_back(p.code);
      corpus.push_back(p.summary);
    }
    return tok::train_bpe(corpus, 360);
  }();
  return vocab;
}

inline model::ModelConfig tiny_config(model::Arch arch = model::Arch::kDecoderOnly) {
  model::ModelConfig c;
  c.n_layers = 2;
  c.d = 16;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.vocab_size = tiny_vocab().size();
  c.max_len = 160;
  c.arch = arch;
  c.eyelayer_layer = arch == model::Arch::kDecoderOnly ? std::optional<std::size_t>(1) : std::nullopt;
  c.n_decoder_layers = 1;
  return c;
}

inline eye::EyeLayerConfig tiny_eye(std::size_t width) {
  eye::EyeLayerConfig c;
  c.width = width;
  c.rank = 4;
  c.dropout_p = 0.0;
  return c;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("gazeprior_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace gazeprior::testing
