#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gazeprior/tokenizer.hpp"

namespace gazeprior::align {

inline constexpr double kDefaultSigmaMin = 1.0;

struct AstNode {
  int node_id = 0;
  std::string node_type;
  std::string text;  // empty for abstract nodes
  std::size_t char_start = 0;
  std::size_t char_end = 0;

  friend bool operator==(const AstNode&, const AstNode&) = default;
};

// Aggregated (or duration-weighted) fixation mass on one node.
struct FixationRecord {
  int node_id = 0;
  double count = 0.0;
};

enum class MatchStrategy { kExact, kAggregate, kOffset };
std::string_view to_string(MatchStrategy s);

struct TokenAlignment {
  int node_id = 0;
  std::vector<std::size_t> subtoken_indices;  // contiguous, sorted
  MatchStrategy strategy = MatchStrategy::kExact;
};

struct AlignmentResult {
  std::vector<TokenAlignment> alignments;
  std::vector<int> unmapped_node_ids;
};

struct FixationTarget {
  std::vector<double> fixation;  // F(i) over code-region subtokens
  double mu_human = 0.0;
  double sigma_target = 0.0;
  double total_mass = 0.0;
};

// Leaf nodes of a Java-like lexical grammar with exact byte spans.
// Throws kLex on empty input and on unterminated strings or comments.
std::vector<AstNode> build_leaf_ast(std::string_view source);
// Pre-serialized AST: returned as-is after schema validation.
std::vector<AstNode> build_leaf_ast_from_json(const nlohmann::json& serialized);

std::vector<AstNode> ast_from_json(const nlohmann::json& j);
nlohmann::json ast_to_json(std::span<const AstNode> nodes);

// Three-stage mapping. `spans` index the code region: alignment indices are
// positions within `spans`.
AlignmentResult map_nodes_to_subtokens(std::span<const AstNode> nodes, std::span<const tok::TokenSpan> spans,
                                       const tok::Vocab& vocab);

// Mass-conserving projection: a node's count is split evenly over its
// subtokens. Records on unmapped nodes are dropped; unknown node ids and
// negative counts are data errors.
std::vector<double> project_fixations(std::span<const FixationRecord> records, const AlignmentResult& alignment,
                                      std::size_t length);

// Throws kData ("rejected: ...") when the fixation mass is zero.
FixationTarget compute_targets(std::span<const double> fixation, double sigma_min = kDefaultSigmaMin);

using GoldAlignment = std::map<int, std::vector<std::size_t>>;

// Fraction of gold nodes whose mapped index set equals the gold set.
double alignment_accuracy(std::span<const TokenAlignment> alignments, const GoldAlignment& gold);

// Subtoken owners of every byte, computed by walking decoded token strings.
// Used as an independent gold oracle for synthetic corpora.
GoldAlignment overlap_gold(std::span<const AstNode> nodes, std::span<const int> code_ids, const tok::Vocab& vocab);

struct GazeSample {
  std::string code;
  std::vector<AstNode> ast;
  std::vector<FixationRecord> fixations;
  std::optional<std::string> summary;
  std::optional<GoldAlignment> gold;
};

GazeSample gaze_sample_from_json(const nlohmann::json& j);
nlohmann::json gaze_sample_to_json(const GazeSample& s);

// Reads a JSON array or JSON-lines file of gaze samples.
std::vector<GazeSample> load_gaze_corpus(const std::string& path);
void save_gaze_corpus(const std::string& path, std::span<const GazeSample> samples);

struct ProcessedGaze {
  std::vector<int> code_ids;
  AlignmentResult alignment;
  std::optional<FixationTarget> target;  // empty when rejected
  std::string rejection;
  std::optional<double> accuracy;
  std::size_t n_gold_nodes = 0;
  std::size_t n_gold_correct = 0;
};

// Runs the full pipeline; code tokens beyond max_code_tokens are dropped and
// nodes lying entirely past the cut become unmapped.
ProcessedGaze process_gaze_sample(const GazeSample& sample, const tok::Vocab& vocab, double sigma_min,
                                  std::size_t max_code_tokens);

nlohmann::json processed_to_json(const ProcessedGaze& p);

}  // namespace gazeprior::align
