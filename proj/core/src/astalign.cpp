#include "gazeprior/astalign.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "gazeprior/error.hpp"

namespace gazeprior::align {

namespace {

const std::unordered_set<std::string_view>& java_keywords() {
  static const std::unordered_set<std::string_view> kw = {
      "abstract", "assert",    "boolean",  "break",     "byte",       "case",      "catch",    "char",
      "class",    "const",     "continue", "default",   "do",         "double",    "else",     "enum",
      "extends",  "final",     "finally",  "float",     "for",        "goto",      "if",       "implements",
      "import",   "instanceof", "int",     "interface", "long",       "native",    "new",      "package",
      "private",  "protected", "public",   "return",    "short",      "static",    "strictfp", "super",
      "switch",   "synchronized", "this",  "throw",     "throws",     "transient", "try",      "void",
      "volatile", "while",     "var",      "record",    "yield"};
  return kw;
}

constexpr std::array<std::string_view, 30> kOperators = {
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=",
    "+=",   "-=",  "*=",  "/=",  "&=",  "|=", "^=", "%=", "<<", ">>", "+",  "-",  "*",  "/",  "%"};
constexpr std::string_view kSingleOperators = "=<>!~?:&|^@";
constexpr std::string_view kSeparators = "(){}[];,.";

bool is_ident_start(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '$' || c >= 0x80;
}
bool is_ident_char(unsigned char c) { return is_ident_start(c) || (c >= '0' && c <= '9'); }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::string_view to_string(MatchStrategy s) {
  switch (s) {
    case MatchStrategy::kExact: return "exact";
    case MatchStrategy::kAggregate: return "aggregate";
    case MatchStrategy::kOffset: return "offset";
  }
  return "unknown";
}

std::vector<AstNode> build_leaf_ast(std::string_view src) {
  if (src.empty()) fail(ErrorKind::kLex, "empty source at offset 0");
  std::vector<AstNode> nodes;
  auto emit = [&](std::string type, std::size_t b, std::size_t e) {
    nodes.push_back({static_cast<int>(nodes.size()), std::move(type), std::string(src.substr(b, e - b)), b, e});
  };
  std::size_t i = 0;
  const std::size_t n = src.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(src[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (src.substr(i, 2) == "//") {
      while (i < n && src[i] != '\n') ++i;
      continue;
    }
    if (src.substr(i, 2) == "/*") {
      const std::size_t close = src.find("*/", i + 2);
      if (close == std::string_view::npos) fail(ErrorKind::kLex, "unterminated comment at offset " + std::to_string(i));
      i = close + 2;
      continue;
    }
    if (c == '"' || c == '\'') {
      const std::size_t start = i++;
      bool closed = false;
      while (i < n) {
        if (src[i] == '\\') {
          i += 2;
          continue;
        }
        if (src[i] == '\n') break;
        if (src[i] == static_cast<char>(c)) {
          closed = true;
          ++i;
          break;
        }
        ++i;
      }
      if (!closed) {
        fail(ErrorKind::kLex, std::string(c == '"' ? "unterminated string" : "unterminated char literal") +
                                  " at offset " + std::to_string(start));
      }
      emit("literal", start, std::min(i, n));
      continue;
    }
    if (is_digit(c) || (c == '.' && i + 1 < n && is_digit(static_cast<unsigned char>(src[i + 1])))) {
      const std::size_t start = i;
      while (i < n) {
        const auto d = static_cast<unsigned char>(src[i]);
        if ((d == 'e' || d == 'E') && i + 1 < n && (src[i + 1] == '+' || src[i + 1] == '-')) {
          i += 2;
        } else if (is_ident_char(d) || d == '.') {
          ++i;
        } else {
          break;
        }
      }
      emit("literal", start, i);
      continue;
    }
    if (is_ident_start(c)) {
      const std::size_t start = i;
      while (i < n && is_ident_char(static_cast<unsigned char>(src[i]))) ++i;
      const std::string_view word = src.substr(start, i - start);
      const bool literal = word == "true" || word == "false" || word == "null";
      emit(literal ? "literal" : (java_keywords().contains(word) ? "keyword" : "identifier"), start, i);
      continue;
    }
    bool matched = false;
    for (std::string_view op : kOperators) {
      if (src.substr(i, op.size()) == op) {
        emit("operator", i, i + op.size());
        i += op.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (kSingleOperators.find(static_cast<char>(c)) != std::string_view::npos) {
      emit("operator", i, i + 1);
    } else if (kSeparators.find(static_cast<char>(c)) != std::string_view::npos) {
      emit("separator", i, i + 1);
    } else {
      emit("unknown", i, i + 1);
    }
    ++i;
  }
  return nodes;
}

std::vector<AstNode> build_leaf_ast_from_json(const nlohmann::json& serialized) { return ast_from_json(serialized); }

std::vector<AstNode> ast_from_json(const nlohmann::json& j) {
  if (!j.is_array()) fail(ErrorKind::kSchema, "ast must be an array");
  std::vector<AstNode> nodes;
  for (const auto& item : j) {
    try {
      AstNode node{item.at("node_id").get<int>(), item.value("node_type", std::string()),
                   item.value("text", std::string()), item.at("char_start").get<std::size_t>(),
                   item.at("char_end").get<std::size_t>()};
      if (node.char_start > node.char_end) {
        fail(ErrorKind::kSchema, "node " + std::to_string(node.node_id) + " has char_start > char_end");
      }
      nodes.push_back(std::move(node));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kSchema, std::string("ast node: ") + e.what());
    }
  }
  return nodes;
}

nlohmann::json ast_to_json(std::span<const AstNode> nodes) {
  nlohmann::json out = nlohmann::json::array();
  for (const AstNode& n : nodes) {
    out.push_back({{"node_id", n.node_id},
                   {"node_type", n.node_type},
                   {"text", n.text},
                   {"char_start", n.char_start},
                   {"char_end", n.char_end}});
  }
  return out;
}

AlignmentResult map_nodes_to_subtokens(std::span<const AstNode> nodes, std::span<const tok::TokenSpan> spans,
                                       const tok::Vocab& vocab) {
  AlignmentResult result;
  // Start offset -> token index, for stage 1 and stage 2 lookups.
  std::unordered_map<std::size_t, std::size_t> by_start;
  for (std::size_t t = 0; t < spans.size(); ++t) by_start.emplace(spans[t].char_start, t);

  for (const AstNode& node : nodes) {
    auto it = by_start.find(node.char_start);
    if (it != by_start.end() && node.char_end > node.char_start) {
      const std::size_t t0 = it->second;
      const tok::TokenSpan& s = spans[t0];
      if (s.char_end == node.char_end && vocab.token_bytes(s.token_id) == node.text) {
        result.alignments.push_back({node.node_id, {t0}, MatchStrategy::kExact});
        continue;
      }
      std::size_t t = t0;
      while (t + 1 < spans.size() && spans[t].char_end < node.char_end && spans[t + 1].char_start == spans[t].char_end) {
        ++t;
      }
      if (t > t0 && spans[t].char_end == node.char_end) {
        std::vector<std::size_t> idx;
        for (std::size_t k = t0; k <= t; ++k) idx.push_back(k);
        result.alignments.push_back({node.node_id, std::move(idx), MatchStrategy::kAggregate});
        continue;
      }
    }
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < spans.size(); ++t) {
      if (spans[t].char_start < node.char_end && spans[t].char_end > node.char_start) idx.push_back(t);
    }
    if (idx.empty()) {
      result.unmapped_node_ids.push_back(node.node_id);
    } else {
      result.alignments.push_back({node.node_id, std::move(idx), MatchStrategy::kOffset});
    }
  }
  return result;
}

std::vector<double> project_fixations(std::span<const FixationRecord> records, const AlignmentResult& alignment,
                                      std::size_t length) {
  std::unordered_map<int, const TokenAlignment*> by_node;
  for (const TokenAlignment& a : alignment.alignments) by_node.emplace(a.node_id, &a);
  const std::unordered_set<int> unmapped(alignment.unmapped_node_ids.begin(), alignment.unmapped_node_ids.end());
  std::vector<double> fixation(length, 0.0);
  for (const FixationRecord& r : records) {
    if (!(r.count >= 0.0) || !std::isfinite(r.count)) {
      fail(ErrorKind::kData, "negative or non-finite fixation count on node " + std::to_string(r.node_id));
    }
    auto it = by_node.find(r.node_id);
    if (it == by_node.end()) {
      if (unmapped.contains(r.node_id)) continue;
      fail(ErrorKind::kData, "fixation on unknown node " + std::to_string(r.node_id));
    }
    const auto& idx = it->second->subtoken_indices;
    const double share = r.count / static_cast<double>(idx.size());
    for (std::size_t t : idx) {
      if (t >= length) fail(ErrorKind::kRange, "alignment index outside code region");
      fixation[t] += share;
    }
  }
  return fixation;
}

FixationTarget compute_targets(std::span<const double> fixation, double sigma_min) {
  double mass = 0.0;
  double first = 0.0;
  for (std::size_t i = 0; i < fixation.size(); ++i) {
    mass += fixation[i];
    first += static_cast<double>(i) * fixation[i];
  }
  if (!(mass > 0.0)) fail(ErrorKind::kData, "rejected: zero fixation mass");
  const double mu = first / mass;
  double second = 0.0;
  for (std::size_t i = 0; i < fixation.size(); ++i) {
    const double d = static_cast<double>(i) - mu;
    second += fixation[i] * d * d;
  }
  FixationTarget t;
  t.fixation.assign(fixation.begin(), fixation.end());
  t.mu_human = mu;
  t.sigma_target = std::max(sigma_min, std::sqrt(second / mass));
  t.total_mass = mass;
  return t;
}

double alignment_accuracy(std::span<const TokenAlignment> alignments, const GoldAlignment& gold) {
  if (gold.empty()) fail(ErrorKind::kData, "alignment_accuracy: empty gold mapping");
  std::unordered_map<int, const std::vector<std::size_t>*> mapped;
  for (const TokenAlignment& a : alignments) mapped.emplace(a.node_id, &a.subtoken_indices);
  std::size_t correct = 0;
  for (const auto& [node_id, indices] : gold) {
    auto it = mapped.find(node_id);
    if (it == mapped.end()) {
      if (indices.empty()) ++correct;
      continue;
    }
    if (*it->second == indices) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(gold.size());
}

GoldAlignment overlap_gold(std::span<const AstNode> nodes, std::span<const int> code_ids, const tok::Vocab& vocab) {
  std::vector<std::size_t> owner;
  for (std::size_t t = 0; t < code_ids.size(); ++t) {
    owner.insert(owner.end(), vocab.token_bytes(code_ids[t]).size(), t);
  }
  GoldAlignment gold;
  for (const AstNode& node : nodes) {
    std::set<std::size_t> idx;
    for (std::size_t c = node.char_start; c < node.char_end && c < owner.size(); ++c) idx.insert(owner[c]);
    gold[node.node_id] = std::vector<std::size_t>(idx.begin(), idx.end());
  }
  return gold;
}

GazeSample gaze_sample_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::kSchema, "gaze sample must be an object");
  if (!j.contains("code") || !j["code"].is_string()) fail(ErrorKind::kSchema, "gaze sample missing field 'code'");
  if (!j.contains("fixations")) fail(ErrorKind::kSchema, "gaze sample missing field 'fixations'");
  GazeSample s;
  s.code = j["code"].get<std::string>();
  if (j.contains("ast") && !j["ast"].is_null()) s.ast = ast_from_json(j["ast"]);
  try {
    for (const auto& f : j["fixations"]) s.fixations.push_back({f.at("node_id").get<int>(), f.at("count").get<double>()});
    if (j.contains("summary") && j["summary"].is_string()) s.summary = j["summary"].get<std::string>();
    if (j.contains("gold") && j["gold"].is_array()) {
      GoldAlignment gold;
      for (const auto& g : j["gold"]) gold[g.at("node_id").get<int>()] = g.at("subtoken_indices").get<std::vector<std::size_t>>();
      s.gold = std::move(gold);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kSchema, std::string("gaze sample: ") + e.what());
  }
  return s;
}

nlohmann::json gaze_sample_to_json(const GazeSample& s) {
  nlohmann::json j = {{"code", s.code}, {"ast", ast_to_json(s.ast)}};
  nlohmann::json fix = nlohmann::json::array();
  for (const FixationRecord& r : s.fixations) fix.push_back({{"node_id", r.node_id}, {"count", r.count}});
  j["fixations"] = std::move(fix);
  if (s.summary) j["summary"] = *s.summary;
  if (s.gold) {
    nlohmann::json gold = nlohmann::json::array();
    for (const auto& [id, idx] : *s.gold) gold.push_back({{"node_id", id}, {"subtoken_indices", idx}});
    j["gold"] = std::move(gold);
  }
  return j;
}

std::vector<GazeSample> load_gaze_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  std::vector<GazeSample> samples;
  if (first != std::string::npos && text[first] == '[') {
    nlohmann::json arr;
    try {
      arr = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kFormat, path + ": " + e.what());
    }
    for (const auto& item : arr) samples.push_back(gaze_sample_from_json(item));
    return samples;
  }
  std::istringstream lines(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      samples.push_back(gaze_sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kFormat, path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      fail(e.kind(), path + ":" + std::to_string(line_no) + ": " + e.message());
    }
  }
  return samples;
}

void save_gaze_corpus(const std::string& path, std::span<const GazeSample> samples) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path);
  nlohmann::json arr = nlohmann::json::array();
  for (const GazeSample& s : samples) arr.push_back(gaze_sample_to_json(s));
  out << arr.dump(1) << '\n';
}

ProcessedGaze process_gaze_sample(const GazeSample& sample, const tok::Vocab& vocab, double sigma_min,
                                  std::size_t max_code_tokens) {
  ProcessedGaze p;
  const std::vector<AstNode> nodes = sample.ast.empty() ? build_leaf_ast(sample.code) : sample.ast;
  std::vector<tok::TokenSpan> spans = tok::encode_with_offsets(sample.code, vocab);
  if (spans.size() > max_code_tokens) spans.resize(max_code_tokens);
  for (const tok::TokenSpan& s : spans) p.code_ids.push_back(s.token_id);
  p.alignment = map_nodes_to_subtokens(nodes, spans, vocab);
  const std::vector<double> fixation = project_fixations(sample.fixations, p.alignment, spans.size());
  try {
    p.target = compute_targets(fixation, sigma_min);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kData) throw;
    p.rejection = e.message();
  }
  if (sample.gold && !sample.gold->empty()) {
    std::unordered_map<int, const std::vector<std::size_t>*> mapped;
    for (const TokenAlignment& a : p.alignment.alignments) mapped.emplace(a.node_id, &a.subtoken_indices);
    p.n_gold_nodes = sample.gold->size();
    for (const auto& [id, idx] : *sample.gold) {
      auto it = mapped.find(id);
      if ((it == mapped.end() && idx.empty()) || (it != mapped.end() && *it->second == idx)) ++p.n_gold_correct;
    }
    p.accuracy = alignment_accuracy(p.alignment.alignments, *sample.gold);
  }
  return p;
}

nlohmann::json processed_to_json(const ProcessedGaze& p) {
  nlohmann::json j;
  if (p.target) {
    j["F"] = p.target->fixation;
    j["mu_human"] = p.target->mu_human;
    j["sigma_target"] = p.target->sigma_target;
    j["total_mass"] = p.target->total_mass;
  } else {
    j["F"] = nullptr;
    j["rejected"] = p.rejection;
  }
  j["unmapped_node_ids"] = p.alignment.unmapped_node_ids;
  if (p.accuracy) j["mapping_accuracy"] = *p.accuracy;
  return j;
}

}  // namespace gazeprior::align
