#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace gazeprior::metrics {

using Tokens = std::vector<std::string>;

// Lowercased runs of letters and digits; everything else separates tokens
// and is dropped.
Tokens metric_tokens(std::string_view text);

// Porter (1980) suffix-stripping stemmer for lowercase ASCII words.
std::string porter_stem(std::string_view word);

struct BleuCounts {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;

  BleuCounts& operator+=(const BleuCounts& other);
};

BleuCounts bleu_counts(const Tokens& candidate, const Tokens& reference);
// Geometric mean of clipped 1..4-gram precisions times the brevity penalty.
// Higher orders with zero matches use (0 + 1) / (total + 1).
double bleu_from_counts(const BleuCounts& counts);
double bleu4(const Tokens& candidate, const Tokens& reference);

// F1 of LCS precision and recall.
double rouge_l(const Tokens& candidate, const Tokens& reference);

// Exact then stem matching, Fmean = PR / (0.9P + 0.1R),
// penalty = 0.5 (chunks / m)^3.
double meteor_lite(const Tokens& candidate, const Tokens& reference);

struct PairScore {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double meteor_lite = 0.0;
};

struct CorpusScore {
  double bleu4 = 0.0;  // from pooled n-gram counts
  double rouge_l = 0.0;  // mean over pairs
  double meteor_lite = 0.0;  // mean over pairs
  std::size_t n_pairs = 0;
  std::vector<PairScore> pairs;
};

CorpusScore score_corpus(std::span<const Tokens> candidates, std::span<const Tokens> references);

// {bleu4, rouge_l, meteor_lite, n_pairs}, scores in [0, 1].
nlohmann::json report_json(const CorpusScore& score);

}  // namespace gazeprior::metrics
