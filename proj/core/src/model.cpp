#include "gazeprior/model.hpp"

#include <algorithm>
#include <cmath>

#include "gazeprior/error.hpp"
#include "gazeprior/numerics/ops.hpp"

namespace gazeprior::model {

namespace {

constexpr double kInitStd = 0.02;
constexpr std::uint64_t kEyeStreamSalt = 0x9e3779b97f4a7c15ULL;

Tensor normal_param(num::Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, kInitStd);
  std::vector<double> v(num::numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor const_param(num::Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

AttentionParams init_attention(std::size_t d, std::mt19937_64& rng) {
  AttentionParams p;
  p.wq = normal_param({d, d}, rng);
  p.bq = const_param({d}, 0.0);
  p.wk = normal_param({d, d}, rng);
  p.bk = const_param({d}, 0.0);
  p.wv = normal_param({d, d}, rng);
  p.bv = const_param({d}, 0.0);
  p.wo = normal_param({d, d}, rng);
  p.bo = const_param({d}, 0.0);
  return p;
}

BlockParams init_block(const ModelConfig& c, bool cross, std::mt19937_64& rng) {
  const std::size_t d = c.d;
  const std::size_t f = c.d * c.ffn_mult;
  BlockParams b;
  b.ln1_gamma = const_param({d}, 1.0);
  b.ln1_beta = const_param({d}, 0.0);
  b.self_attn = init_attention(d, rng);
  if (cross) {
    b.lnx_gamma = const_param({d}, 1.0);
    b.lnx_beta = const_param({d}, 0.0);
    b.cross_attn = init_attention(d, rng);
  }
  b.ln2_gamma = const_param({d}, 1.0);
  b.ln2_beta = const_param({d}, 0.0);
  b.ff_w1 = normal_param({d, f}, rng);
  b.ff_b1 = const_param({f}, 0.0);
  b.ff_w2 = normal_param({f, d}, rng);
  b.ff_b2 = const_param({d}, 0.0);
  return b;
}

void append_attention(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                      const AttentionParams& p) {
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".bq", p.bq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".bk", p.bk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".bv", p.bv);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".bo", p.bo);
}

void append_block(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const BlockParams& b) {
  out.emplace_back(prefix + ".ln1.gamma", b.ln1_gamma);
  out.emplace_back(prefix + ".ln1.beta", b.ln1_beta);
  append_attention(out, prefix + ".self", b.self_attn);
  if (b.lnx_gamma.defined()) {
    out.emplace_back(prefix + ".lnx.gamma", b.lnx_gamma);
    out.emplace_back(prefix + ".lnx.beta", b.lnx_beta);
    append_attention(out, prefix + ".cross", b.cross_attn);
  }
  out.emplace_back(prefix + ".ln2.gamma", b.ln2_gamma);
  out.emplace_back(prefix + ".ln2.beta", b.ln2_beta);
  out.emplace_back(prefix + ".ff.w1", b.ff_w1);
  out.emplace_back(prefix + ".ff.b1", b.ff_b1);
  out.emplace_back(prefix + ".ff.w2", b.ff_w2);
  out.emplace_back(prefix + ".ff.b2", b.ff_b2);
}

// Self- and cross-attention keys/values of one layer for a single sequence.
struct LayerCache {
  std::vector<double> k, v;
  std::size_t len = 0;
  std::vector<double> mem_k, mem_v;
  std::size_t mem_len = 0;
};

Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) { return num::add(num::matmul(x, w), b); }

Tensor attend(const AttentionParams& p, const Tensor& xq, const Tensor& xkv, std::size_t heads,
              std::span<const double> key_mask, bool causal, std::vector<double>* k_sink, std::vector<double>* v_sink) {
  const Tensor q = project(xq, p.wq, p.bq);
  const Tensor k = project(xkv, p.wk, p.bk);
  const Tensor v = project(xkv, p.wv, p.bv);
  if (k_sink) k_sink->assign(k.data().begin(), k.data().end());
  if (v_sink) v_sink->assign(v.data().begin(), v.data().end());
  return project(num::attention(q, k, v, heads, key_mask, causal), p.wo, p.bo);
}

Tensor feed_forward(const BlockParams& b, const Tensor& x) {
  return project(num::gelu(project(x, b.ff_w1, b.ff_b1)), b.ff_w2, b.ff_b2);
}

struct Memory {
  Tensor states;
  std::span<const double> mask;
};

Tensor block_forward(const BlockParams& b, const Tensor& x, std::size_t heads, std::span<const double> mask,
                     bool causal, const Memory* memory, LayerCache* cache) {
  using namespace num;
  const Tensor h = layernorm(x, b.ln1_gamma, b.ln1_beta);
  Tensor y = add(x, attend(b.self_attn, h, h, heads, mask, causal, cache ? &cache->k : nullptr,
                           cache ? &cache->v : nullptr));
  if (memory) {
    const Tensor hx = layernorm(y, b.lnx_gamma, b.lnx_beta);
    y = add(y, attend(b.cross_attn, hx, memory->states, heads, memory->mask, false,
                      cache ? &cache->mem_k : nullptr, cache ? &cache->mem_v : nullptr));
  }
  if (cache) {
    cache->len = x.dim(1);
    cache->mem_len = memory ? memory->states.dim(1) : 0;
  }
  return add(y, feed_forward(b, layernorm(y, b.ln2_gamma, b.ln2_beta)));
}

// One new position against cached keys/values. x: [1, 1, d].
Tensor block_step(const BlockParams& b, const Tensor& x, std::size_t heads, LayerCache& cache) {
  using namespace num;
  const std::size_t d = x.dim(2);
  const AttentionParams& p = b.self_attn;
  const Tensor h = layernorm(x, b.ln1_gamma, b.ln1_beta);
  const Tensor q = project(h, p.wq, p.bq);
  const Tensor k = project(h, p.wk, p.bk);
  const Tensor v = project(h, p.wv, p.bv);
  cache.k.insert(cache.k.end(), k.data().begin(), k.data().end());
  cache.v.insert(cache.v.end(), v.data().begin(), v.data().end());
  ++cache.len;
  const Tensor keys = Tensor::from({1, cache.len, d}, cache.k);
  const Tensor values = Tensor::from({1, cache.len, d}, cache.v);
  Tensor y = add(x, project(attention(q, keys, values, heads, {}, false), p.wo, p.bo));
  if (cache.mem_len > 0) {
    const AttentionParams& c = b.cross_attn;
    const Tensor qx = project(layernorm(y, b.lnx_gamma, b.lnx_beta), c.wq, c.bq);
    const Tensor mk = Tensor::from({1, cache.mem_len, d}, cache.mem_k);
    const Tensor mv = Tensor::from({1, cache.mem_len, d}, cache.mem_v);
    y = add(y, project(attention(qx, mk, mv, heads, {}, false), c.wo, c.bo));
  }
  return add(y, feed_forward(b, layernorm(y, b.ln2_gamma, b.ln2_beta)));
}

Tensor embed(const Tensor& table, const Tensor& pos_table, std::span<const int> ids, std::size_t batch,
             std::size_t length, std::size_t first_position = 0) {
  std::vector<int> positions(batch * length);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < length; ++t) positions[b * length + t] = static_cast<int>(first_position + t);
  }
  return num::add(num::embedding(table, ids, {batch, length}), num::embedding(pos_table, positions, {batch, length}));
}

Tensor run_stack(const std::vector<BlockParams>& blocks, std::size_t first, std::size_t last, Tensor x,
                 std::size_t heads, std::span<const double> mask, bool causal, const Memory* memory,
                 std::vector<LayerCache>* caches) {
  for (std::size_t l = first; l < last; ++l) {
    x = block_forward(blocks[l], x, heads, mask, causal, memory, caches ? &(*caches)[l] : nullptr);
  }
  return x;
}

Tensor output_head(const ModelParams& p, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  return project(num::layernorm(x, gamma, beta), p.lm_head_w, p.lm_head_b);
}

void check_length(std::size_t length, std::size_t max_len, std::string_view what) {
  if (length > max_len) {
    fail(ErrorKind::kLength, std::string(what) + " length " + std::to_string(length) + " exceeds max_len " +
                                 std::to_string(max_len));
  }
}

struct EncoderPass {
  Tensor hidden;  // after the last block (and EyeLayer, when it runs)
  std::optional<eye::EyeOutput> eye;
};

// The decoder-only stack or the encoder, with the EyeLayer at the hook.
EncoderPass run_primary(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng,
                        std::vector<LayerCache>* caches) {
  const ModelConfig& c = model.config;
  const ModelParams& p = model.params;
  const bool causal = c.arch == Arch::kDecoderOnly;
  check_length(batch.length, c.max_len, "sequence");
  Tensor x = embed(p.token_embedding, p.position_embedding, batch.token_ids, batch.batch, batch.length);
  EncoderPass pass;
  if (!model.has_eyelayer()) {
    pass.hidden = run_stack(p.blocks, 0, c.n_layers, x, c.n_heads, batch.attn_mask, causal, nullptr, caches);
    return pass;
  }
  const std::size_t hook = c.hook_layer();
  x = run_stack(p.blocks, 0, hook + 1, x, c.n_heads, batch.attn_mask, causal, nullptr, caches);
  eye::EyeOutput out = eye::eyelayer_forward(eye_inputs(batch, x), *model.eye_config, *p.eye, training, rng);
  x = out.hidden;
  pass.eye = std::move(out);
  pass.hidden = run_stack(p.blocks, hook + 1, c.n_layers, x, c.n_heads, batch.attn_mask, causal, nullptr, caches);
  return pass;
}

std::size_t argmax_last_row(const Tensor& logits) {
  const std::size_t v = logits.dim(logits.rank() - 1);
  const auto data = logits.data();
  const std::size_t base = data.size() - v;
  std::size_t best = 0;
  for (std::size_t i = 1; i < v; ++i) {
    if (data[base + i] > data[base + best]) best = i;
  }
  return best;
}

Batch sequence_batch(std::span<const int> ids, std::size_t code_begin, std::size_t code_end) {
  Batch b;
  b.batch = 1;
  b.length = ids.size();
  b.token_ids.assign(ids.begin(), ids.end());
  b.attn_mask.assign(ids.size(), 1.0);
  b.special_mask.resize(ids.size());
  b.code_mask.assign(ids.size(), 0.0);
  for (std::size_t t = 0; t < ids.size(); ++t) b.special_mask[t] = tok::is_special(ids[t]) ? 1.0 : 0.0;
  for (std::size_t t = code_begin; t < code_end; ++t) b.code_mask[t] = 1.0;
  b.labels.assign(ids.size(), -100);
  return b;
}

std::vector<int> generate_decoder_only(const Model& model, const tok::Vocab& vocab, std::span<const int> code_ids,
                                       const GenerateOptions& opt) {
  const ModelConfig& c = model.config;
  const ModelParams& p = model.params;
  const tok::EncodedPrompt prompt = tok::encode_prompt(code_ids, {}, vocab, false);
  std::vector<int> ids = prompt.ids;
  std::vector<int> out;
  if (opt.max_new == 0) return out;
  std::mt19937_64 rng(0);
  std::vector<LayerCache> caches(c.n_layers);
  const Batch first = sequence_batch(ids, prompt.code_begin, prompt.code_end);
  Tensor logits = output_head(p, run_primary(model, first, false, rng, opt.use_cache ? &caches : nullptr).hidden,
                              p.final_ln_gamma, p.final_ln_beta);
  while (true) {
    const int next = static_cast<int>(argmax_last_row(logits));
    if (next == tok::kEos) break;
    out.push_back(next);
    ids.push_back(next);
    if (out.size() >= opt.max_new || ids.size() >= c.max_len) break;
    if (opt.use_cache) {
      // The EyeLayer only perturbs code positions, so new tokens bypass it.
      const int token = next;
      Tensor x = embed(p.token_embedding, p.position_embedding, std::span<const int>(&token, 1), 1, 1,
                       ids.size() - 1);
      for (std::size_t l = 0; l < c.n_layers; ++l) x = block_step(p.blocks[l], x, c.n_heads, caches[l]);
      logits = output_head(p, x, p.final_ln_gamma, p.final_ln_beta);
    } else {
      const Batch full = sequence_batch(ids, prompt.code_begin, prompt.code_end);
      logits = output_head(p, run_primary(model, full, false, rng, nullptr).hidden, p.final_ln_gamma,
                           p.final_ln_beta);
    }
  }
  return out;
}

std::vector<int> generate_encoder_decoder(const Model& model, std::span<const int> code_ids,
                                          const GenerateOptions& opt) {
  const ModelConfig& c = model.config;
  const ModelParams& p = model.params;
  std::vector<int> out;
  if (opt.max_new == 0) return out;
  std::vector<int> enc_ids{tok::kBos};
  enc_ids.insert(enc_ids.end(), code_ids.begin(), code_ids.end());
  enc_ids.push_back(tok::kEos);
  const Batch enc = sequence_batch(enc_ids, 1, enc_ids.size() - 1);
  std::mt19937_64 rng(0);
  const Tensor memory_states = num::layernorm(run_primary(model, enc, false, rng, nullptr).hidden, p.final_ln_gamma,
                                              p.final_ln_beta);
  const Memory memory{memory_states, enc.attn_mask};
  std::vector<int> dec{tok::kBos};
  std::vector<LayerCache> caches(c.n_decoder_layers);
  auto full_logits = [&](std::vector<LayerCache>* sink) {
    const std::vector<double> mask(dec.size(), 1.0);
    Tensor y = embed(p.token_embedding, p.dec_position_embedding, dec, 1, dec.size());
    y = run_stack(p.decoder_blocks, 0, c.n_decoder_layers, y, c.n_heads, mask, true, &memory, sink);
    return output_head(p, y, p.dec_final_ln_gamma, p.dec_final_ln_beta);
  };
  Tensor logits = full_logits(opt.use_cache ? &caches : nullptr);
  while (true) {
    const int next = static_cast<int>(argmax_last_row(logits));
    if (next == tok::kEos) break;
    out.push_back(next);
    dec.push_back(next);
    if (out.size() >= opt.max_new || dec.size() >= c.max_len) break;
    if (opt.use_cache) {
      const int token = next;
      Tensor y = embed(p.token_embedding, p.dec_position_embedding, std::span<const int>(&token, 1), 1, 1,
                       dec.size() - 1);
      for (std::size_t l = 0; l < c.n_decoder_layers; ++l) y = block_step(p.decoder_blocks[l], y, c.n_heads, caches[l]);
      logits = output_head(p, y, p.dec_final_ln_gamma, p.dec_final_ln_beta);
    } else {
      logits = full_logits(nullptr);
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(Arch arch) {
  return arch == Arch::kDecoderOnly ? "decoder_only" : "encoder_decoder";
}

Arch arch_from_string(std::string_view name) {
  if (name == "decoder_only") return Arch::kDecoderOnly;
  if (name == "encoder_decoder") return Arch::kEncoderDecoder;
  fail(ErrorKind::kConfig, "unknown arch '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "model: " + what);
  };
  check(n_layers >= 1, "n_layers must be >= 1");
  check(d >= 1 && n_heads >= 1 && d % n_heads == 0, "d must be divisible by n_heads");
  check(ffn_mult >= 1, "ffn_mult must be >= 1");
  check(vocab_size >= tok::kBaseVocab, "vocab_size must be >= 260");
  check(max_len >= 4, "max_len must be >= 4");
  check(!eyelayer_layer || *eyelayer_layer < n_layers, "eyelayer_layer must be < n_layers");
  check(arch == Arch::kDecoderOnly || n_decoder_layers >= 1, "n_decoder_layers must be >= 1");
}

std::size_t ModelConfig::hook_layer() const {
  if (eyelayer_layer) return *eyelayer_layer;
  if (arch == Arch::kEncoderDecoder) return n_layers - 1;
  fail(ErrorKind::kConfig, "model: decoder-only EyeLayer needs eyelayer_layer");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"d", c.d},
       {"n_heads", c.n_heads},   {"ffn_mult", c.ffn_mult},
       {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
       {"arch", to_string(c.arch)},  {"n_decoder_layers", c.n_decoder_layers}};
  j["eyelayer_layer"] = c.eyelayer_layer ? nlohmann::json(*c.eyelayer_layer) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d = j.value("d", d.d);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_len = j.value("max_len", d.max_len);
  c.arch = arch_from_string(j.value("arch", std::string(to_string(d.arch))));
  c.n_decoder_layers = j.value("n_decoder_layers", d.n_decoder_layers);
  if (j.contains("eyelayer_layer") && !j["eyelayer_layer"].is_null()) {
    c.eyelayer_layer = j["eyelayer_layer"].get<std::size_t>();
  } else {
    c.eyelayer_layer.reset();
  }
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_base() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed.token", token_embedding);
  out.emplace_back("embed.position", position_embedding);
  for (std::size_t l = 0; l < blocks.size(); ++l) append_block(out, "block" + std::to_string(l), blocks[l]);
  out.emplace_back("final_ln.gamma", final_ln_gamma);
  out.emplace_back("final_ln.beta", final_ln_beta);
  if (dec_position_embedding.defined()) {
    out.emplace_back("decoder.embed.position", dec_position_embedding);
    for (std::size_t l = 0; l < decoder_blocks.size(); ++l) {
      append_block(out, "decoder.block" + std::to_string(l), decoder_blocks[l]);
    }
    out.emplace_back("decoder.final_ln.gamma", dec_final_ln_gamma);
    out.emplace_back("decoder.final_ln.beta", dec_final_ln_beta);
  }
  out.emplace_back("lm_head.w", lm_head_w);
  out.emplace_back("lm_head.b", lm_head_b);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_eye() const {
  if (!eye) return {};
  return eye->named();
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  auto out = named_base();
  for (auto& entry : named_eye()) out.push_back(std::move(entry));
  return out;
}

Model init_model(const ModelConfig& config, const std::optional<eye::EyeLayerConfig>& eye_config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  m.eye_config = eye_config;
  std::mt19937_64 rng(seed);
  ModelParams& p = m.params;
  const std::size_t d = config.d;
  p.token_embedding = normal_param({config.vocab_size, d}, rng);
  p.position_embedding = normal_param({config.max_len, d}, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) p.blocks.push_back(init_block(config, false, rng));
  p.final_ln_gamma = const_param({d}, 1.0);
  p.final_ln_beta = const_param({d}, 0.0);
  if (config.arch == Arch::kEncoderDecoder) {
    p.dec_position_embedding = normal_param({config.max_len, d}, rng);
    for (std::size_t l = 0; l < config.n_decoder_layers; ++l) p.decoder_blocks.push_back(init_block(config, true, rng));
    p.dec_final_ln_gamma = const_param({d}, 1.0);
    p.dec_final_ln_beta = const_param({d}, 0.0);
  }
  p.lm_head_w = normal_param({d, config.vocab_size}, rng);
  p.lm_head_b = const_param({config.vocab_size}, 0.0);
  if (eye_config) {
    if (eye_config->width != d) {
      fail(ErrorKind::kConfig, "eyelayer width " + std::to_string(eye_config->width) + " != model d " +
                                   std::to_string(d));
    }
    config.hook_layer();
    std::mt19937_64 eye_rng(seed ^ kEyeStreamSalt);
    p.eye = eye::init_eyelayer(*eye_config, eye_rng);
  }
  for (auto& [name, t] : p.named()) {
    for (double& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
  return m;
}

std::size_t parameter_count(const Model& model) {
  std::size_t n = 0;
  for (const auto& [name, t] : model.params.named()) n += t.numel();
  return n;
}

std::size_t prompt_overhead(const tok::Vocab& vocab) {
  return tok::encode_prompt({}, {}, vocab, false).ids.size();
}

Batch make_batch(std::span<const Example> examples, const ModelConfig& config, const tok::Vocab& vocab) {
  if (examples.empty()) fail(ErrorKind::kData, "make_batch: no examples");
  Batch b;
  b.batch = examples.size();
  if (config.arch == Arch::kDecoderOnly) {
    std::vector<tok::EncodedPrompt> prompts;
    for (const Example& e : examples) {
      prompts.push_back(tok::encode_prompt(e.code_ids, e.summary_ids, vocab, e.has_summary));
      b.length = std::max(b.length, prompts.back().ids.size());
    }
    check_length(b.length, config.max_len, "sequence");
    const std::size_t n = b.batch * b.length;
    b.token_ids.assign(n, tok::kPad);
    b.attn_mask.assign(n, 0.0);
    b.special_mask.assign(n, 1.0);
    b.code_mask.assign(n, 0.0);
    b.labels.assign(n, -100);
    for (std::size_t s = 0; s < b.batch; ++s) {
      const tok::EncodedPrompt& pr = prompts[s];
      for (std::size_t t = 0; t < pr.ids.size(); ++t) {
        const std::size_t at = s * b.length + t;
        b.token_ids[at] = pr.ids[t];
        b.attn_mask[at] = 1.0;
        b.special_mask[at] = tok::is_special(pr.ids[t]) ? 1.0 : 0.0;
        if (t >= pr.code_begin && t < pr.code_end) b.code_mask[at] = 1.0;
        if (t >= pr.summary_begin && t < pr.summary_end) {
          b.labels[at] = pr.ids[t];
          b.has_labels = true;
        }
      }
    }
  } else {
    for (const Example& e : examples) {
      b.length = std::max(b.length, e.code_ids.size() + 2);
      b.dec_length = std::max(b.dec_length, e.has_summary ? e.summary_ids.size() + 2 : std::size_t{1});
    }
    check_length(b.length, config.max_len, "encoder sequence");
    check_length(b.dec_length, config.max_len, "decoder sequence");
    const std::size_t n = b.batch * b.length;
    b.token_ids.assign(n, tok::kPad);
    b.attn_mask.assign(n, 0.0);
    b.special_mask.assign(n, 1.0);
    b.code_mask.assign(n, 0.0);
    b.dec_ids.assign(b.batch * b.dec_length, tok::kPad);
    b.dec_mask.assign(b.batch * b.dec_length, 0.0);
    b.dec_labels.assign(b.batch * b.dec_length, -100);
    for (std::size_t s = 0; s < b.batch; ++s) {
      const Example& e = examples[s];
      std::vector<int> enc{tok::kBos};
      enc.insert(enc.end(), e.code_ids.begin(), e.code_ids.end());
      enc.push_back(tok::kEos);
      for (std::size_t t = 0; t < enc.size(); ++t) {
        const std::size_t at = s * b.length + t;
        b.token_ids[at] = enc[t];
        b.attn_mask[at] = 1.0;
        b.special_mask[at] = tok::is_special(enc[t]) ? 1.0 : 0.0;
        if (t >= 1 && t + 1 < enc.size()) b.code_mask[at] = 1.0;
      }
      std::vector<int> dec{tok::kBos};
      if (e.has_summary) {
        dec.insert(dec.end(), e.summary_ids.begin(), e.summary_ids.end());
        dec.push_back(tok::kEos);
      }
      for (std::size_t t = 0; t < dec.size(); ++t) {
        const std::size_t at = s * b.dec_length + t;
        b.dec_ids[at] = dec[t];
        b.dec_mask[at] = 1.0;
        if (t >= 1) {
          b.dec_labels[at] = dec[t];
          b.has_labels = true;
        }
      }
    }
  }
  b.targets.reserve(b.batch);
  for (const Example& e : examples) b.targets.push_back(e.target);
  return b;
}

eye::EyeInputs eye_inputs(const Batch& batch, const Tensor& hidden) {
  // Pooling and perturbation both cover the code region only, so the prior
  // never depends on summary tokens.
  return eye::EyeInputs{hidden, batch.code_mask, batch.special_mask, batch.code_mask};
}

Tensor hook_hidden(const Model& model, const Batch& batch) {
  const ModelConfig& c = model.config;
  const ModelParams& p = model.params;
  check_length(batch.length, c.max_len, "sequence");
  const Tensor x = embed(p.token_embedding, p.position_embedding, batch.token_ids, batch.batch, batch.length);
  return run_stack(p.blocks, 0, c.hook_layer() + 1, x, c.n_heads, batch.attn_mask,
                   c.arch == Arch::kDecoderOnly, nullptr, nullptr);
}

ForwardResult forward(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng) {
  const ModelConfig& c = model.config;
  const ModelParams& p = model.params;
  EncoderPass pass = run_primary(model, batch, training, rng, nullptr);
  ForwardResult result;
  result.eye = std::move(pass.eye);
  if (c.arch == Arch::kDecoderOnly) {
    result.logits = output_head(p, pass.hidden, p.final_ln_gamma, p.final_ln_beta);
    return result;
  }
  check_length(batch.dec_length, c.max_len, "decoder sequence");
  const Memory memory{num::layernorm(pass.hidden, p.final_ln_gamma, p.final_ln_beta), batch.attn_mask};
  Tensor y = embed(p.token_embedding, p.dec_position_embedding, batch.dec_ids, batch.batch, batch.dec_length);
  y = run_stack(p.decoder_blocks, 0, c.n_decoder_layers, y, c.n_heads, batch.dec_mask, true, &memory, nullptr);
  result.logits = output_head(p, y, p.dec_final_ln_gamma, p.dec_final_ln_beta);
  return result;
}

Tensor generation_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 3) fail(ErrorKind::kDimension, "generation_loss: logits must be [B,L,V]");
  const std::size_t batch = logits.dim(0);
  const std::size_t len = logits.dim(1);
  const std::size_t vocab = logits.dim(2);
  if (labels.size() != batch * len) fail(ErrorKind::kDimension, "generation_loss: label count mismatch");
  std::vector<int> shifted(batch * len, -100);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t + 1 < len; ++t) shifted[b * len + t] = labels[b * len + t + 1];
  }
  return num::cross_entropy(num::reshape(logits, {batch * len, vocab}), shifted);
}

std::vector<int> generate(const Model& model, const tok::Vocab& vocab, std::span<const int> code_ids,
                          const GenerateOptions& options) {
  num::NoGradGuard no_grad;
  if (model.config.arch == Arch::kDecoderOnly) return generate_decoder_only(model, vocab, code_ids, options);
  return generate_encoder_decoder(model, code_ids, options);
}

}  // namespace gazeprior::model
