#include "gazeprior/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <tuple>

#include "gazeprior/error.hpp"

namespace gazeprior::tok {

namespace {

constexpr int kFormatVersion = 1;

std::uint64_t pair_key(int left, int right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) | static_cast<std::uint32_t>(right);
}

enum class CharClass { kWord, kSpace, kOther };

CharClass classify(unsigned char c) {
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '$' ||
      c >= 0x80) {
    return CharClass::kWord;
  }
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return CharClass::kSpace;
  return CharClass::kOther;
}

// Applies merges by rank to one chunk of bytes.
std::vector<int> bpe_chunk(std::string_view chunk, const Vocab& vocab) {
  std::vector<int> symbols(chunk.size());
  for (std::size_t i = 0; i < chunk.size(); ++i) symbols[i] = static_cast<unsigned char>(chunk[i]);
  while (symbols.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const int r = vocab.merge_rank(symbols[i], symbols[i + 1]);
      if (r >= 0 && (best_rank < 0 || r < best_rank)) best_rank = r;
    }
    if (best_rank < 0) break;
    const auto [left, right] = vocab.merges()[static_cast<std::size_t>(best_rank)];
    const int merged = kFirstMergeId + best_rank;
    std::vector<int> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        next.push_back(merged);
        ++i;
      } else {
        next.push_back(symbols[i]);
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

}  // namespace

bool is_special(int id) noexcept { return id >= kPad && id <= kSep; }

Vocab::Vocab() {
  tokens_.reserve(kBaseVocab);
  for (int b = 0; b < 256; ++b) {
    tokens_.emplace_back(1, static_cast<char>(b));
    token_to_id_.emplace(tokens_.back(), b);
  }
  tokens_.emplace_back("<PAD>");
  tokens_.emplace_back("<BOS>");
  tokens_.emplace_back("<EOS>");
  tokens_.emplace_back("<SEP>");
}

int Vocab::add_merge(int left, int right) {
  const int n = static_cast<int>(tokens_.size());
  if (left < 0 || right < 0 || left >= n || right >= n || is_special(left) || is_special(right)) {
    fail(ErrorKind::kRange, "merge references invalid id (" + std::to_string(left) + "," + std::to_string(right) + ")");
  }
  if (merge_rank_.contains(pair_key(left, right))) {
    fail(ErrorKind::kFormat, "duplicate merge (" + std::to_string(left) + "," + std::to_string(right) + ")");
  }
  const int id = n;
  merge_rank_.emplace(pair_key(left, right), static_cast<int>(merges_.size()));
  merges_.emplace_back(left, right);
  tokens_.push_back(tokens_[static_cast<std::size_t>(left)] + tokens_[static_cast<std::size_t>(right)]);
  token_to_id_.try_emplace(tokens_.back(), id);
  return id;
}

const std::string& Vocab::token_bytes(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(ErrorKind::kRange, "token id " + std::to_string(id) + " outside vocab of size " + std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::id_of(std::string_view bytes) const {
  auto it = token_to_id_.find(std::string(bytes));
  return it == token_to_id_.end() ? -1 : it->second;
}

int Vocab::merge_rank(int left, int right) const {
  auto it = merge_rank_.find(pair_key(left, right));
  return it == merge_rank_.end() ? -1 : it->second;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : merges_) merges.push_back({l, r});
  return {
      {"format", "gazeprior-bpe"},
      {"version", kFormatVersion},
      {"special_tokens", {{"PAD", kPad}, {"BOS", kBos}, {"EOS", kEos}, {"SEP", kSep}}},
      {"merges", std::move(merges)},
  };
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "gazeprior-bpe") fail(ErrorKind::kFormat, "not a gazeprior vocab");
  if (j.value("version", 0) != kFormatVersion) {
    fail(ErrorKind::kVersion, "vocab version " + std::to_string(j.value("version", 0)) + " unsupported");
  }
  const auto& specials = j.at("special_tokens");
  if (specials.at("PAD") != kPad || specials.at("BOS") != kBos || specials.at("EOS") != kEos ||
      specials.at("SEP") != kSep) {
    fail(ErrorKind::kFormat, "unexpected special token ids");
  }
  Vocab v;
  for (const auto& m : j.at("merges")) v.add_merge(m.at(0).get<int>(), m.at(1).get<int>());
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) {
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  std::size_t i = 0;
  while (i < text.size()) {
    const CharClass cls = classify(static_cast<unsigned char>(text[i]));
    std::size_t j = i + 1;
    if (cls != CharClass::kOther) {
      while (j < text.size() && classify(static_cast<unsigned char>(text[j])) == cls) ++j;
    }
    chunks.emplace_back(i, j);
    i = j;
  }
  return chunks;
}

Vocab train_bpe(std::span<const std::string> corpus, std::size_t vocab_size) {
  if (corpus.empty()) fail(ErrorKind::kConfig, "train_bpe: empty corpus");
  if (vocab_size < kBaseVocab) {
    fail(ErrorKind::kConfig, "train_bpe: vocab_size must be at least " + std::to_string(kBaseVocab));
  }
  std::map<std::string, long long> chunk_freq;
  for (const std::string& text : corpus) {
    for (auto [b, e] : pretokenize(text)) ++chunk_freq[text.substr(b, e - b)];
  }
  std::vector<std::vector<int>> words;
  std::vector<long long> freq;
  for (const auto& [chunk, count] : chunk_freq) {
    std::vector<int> w(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) w[i] = static_cast<unsigned char>(chunk[i]);
    words.push_back(std::move(w));
    freq.push_back(count);
  }

  Vocab vocab;
  while (vocab.size() < vocab_size) {
    std::unordered_map<std::uint64_t, long long> counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      for (std::size_t i = 0; i + 1 < words[w].size(); ++i) counts[pair_key(words[w][i], words[w][i + 1])] += freq[w];
    }
    if (counts.empty()) break;
    std::uint64_t best = 0;
    long long best_count = -1;
    for (const auto& [key, count] : counts) {
      if (count < best_count) continue;
      if (count == best_count) {
        const int bl = static_cast<int>(best >> 32), br = static_cast<int>(best & 0xffffffffu);
        const int kl = static_cast<int>(key >> 32), kr = static_cast<int>(key & 0xffffffffu);
        const auto cand = std::tie(vocab.token_bytes(kl), vocab.token_bytes(kr));
        const auto cur = std::tie(vocab.token_bytes(bl), vocab.token_bytes(br));
        if (!(cand < cur)) {
          continue;
        }
      }
      best = key;
      best_count = count;
    }
    const int left = static_cast<int>(best >> 32);
    const int right = static_cast<int>(best & 0xffffffffu);
    const int merged = vocab.add_merge(left, right);
    for (auto& w : words) {
      std::size_t out = 0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == left && w[i + 1] == right) {
          w[out++] = merged;
          ++i;
        } else {
          w[out++] = w[i];
        }
      }
      w.resize(out);
    }
  }
  return vocab;
}

std::vector<TokenSpan> encode_with_offsets(std::string_view text, const Vocab& vocab) {
  std::vector<TokenSpan> spans;
  for (auto [b, e] : pretokenize(text)) {
    std::size_t pos = b;
    for (int id : bpe_chunk(text.substr(b, e - b), vocab)) {
      const std::size_t len = vocab.token_bytes(id).size();
      spans.push_back({id, pos, pos + len});
      pos += len;
    }
  }
  return spans;
}

std::vector<int> encode(std::string_view text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const TokenSpan& s : encode_with_offsets(text, vocab)) ids.push_back(s.token_id);
  return ids;
}

std::string decode(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    const std::string& bytes = vocab.token_bytes(id);
    if (!is_special(id)) out += bytes;
  }
  return out;
}

EncodedPrompt encode_prompt(std::span<const int> code_ids, std::span<const int> summary_ids, const Vocab& vocab,
                            bool with_summary) {
  EncodedPrompt p;
  p.ids.push_back(kBos);
  for (int id : encode(kPromptPrefix, vocab)) p.ids.push_back(id);
  p.code_begin = p.ids.size();
  p.ids.insert(p.ids.end(), code_ids.begin(), code_ids.end());
  p.code_end = p.ids.size();
  for (int id : encode(kCodeSuffix, vocab)) p.ids.push_back(id);
  p.ids.push_back(kSep);
  for (int id : encode(kSummaryLead, vocab)) p.ids.push_back(id);
  p.summary_begin = p.ids.size();
  if (with_summary) {
    p.ids.insert(p.ids.end(), summary_ids.begin(), summary_ids.end());
    p.ids.push_back(kEos);
  }
  p.summary_end = p.ids.size();
  return p;
}

}  // namespace gazeprior::tok
