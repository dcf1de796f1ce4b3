#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace gazeprior::tok {

// Ids 0..255 are raw bytes; the four specials follow; merges start at 260.
inline constexpr int kPad = 256;
inline constexpr int kBos = 257;
inline constexpr int kEos = 258;
inline constexpr int kSep = 259;
inline constexpr int kFirstMergeId = 260;
inline constexpr std::size_t kBaseVocab = 260;

bool is_special(int id) noexcept;

struct TokenSpan {
  int token_id = 0;
  std::size_t char_start = 0;  // byte offset, half-open
  std::size_t char_end = 0;

  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

class Vocab {
 public:
  Vocab();

  // Appends one merge; the new token id is returned.
  int add_merge(int left, int right);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::pair<int, int>>& merges() const noexcept { return merges_; }
  const std::string& token_bytes(int id) const;
  // -1 when the byte string is not a token.
  int id_of(std::string_view bytes) const;
  // Rank of the (left, right) merge, or -1.
  int merge_rank(int left, int right) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.merges_ == b.merges_; }

 private:
  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> token_to_id_;
  std::unordered_map<std::uint64_t, int> merge_rank_;
};

// Splits text into pre-token chunks (word characters, whitespace runs, single
// punctuation bytes). Merges never cross chunk boundaries.
std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text);

// Deterministic BPE; frequency ties go to the lexicographically smallest
// (left bytes, right bytes) pair. Stops early when no pair is left.
Vocab train_bpe(std::span<const std::string> corpus, std::size_t vocab_size);

std::vector<TokenSpan> encode_with_offsets(std::string_view text, const Vocab& vocab);
std::vector<int> encode(std::string_view text, const Vocab& vocab);
// Special ids decode to nothing; ids outside the vocab are a range error.
std::string decode(std::span<const int> ids, const Vocab& vocab);

// Decoder prompt: <BOS>summarize:\n<code>\n<SEP>\n<summary><EOS>
inline constexpr std::string_view kPromptPrefix = "summarize:\n";
inline constexpr std::string_view kCodeSuffix = "\n";
inline constexpr std::string_view kSummaryLead = "\n";

struct EncodedPrompt {
  std::vector<int> ids;
  std::size_t code_begin = 0;  // token range of the code region
  std::size_t code_end = 0;
  std::size_t summary_begin = 0;  // first summary token (== ids.size() without summary)
  std::size_t summary_end = 0;    // one past the EOS when a summary is present
};

EncodedPrompt encode_prompt(std::span<const int> code_ids, std::span<const int> summary_ids, const Vocab& vocab,
                            bool with_summary);

}  // namespace gazeprior::tok
