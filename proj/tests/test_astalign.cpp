#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "gazeprior/astalign.hpp"
#include "gazeprior/corpus.hpp"
#include "gazeprior/error.hpp"
#include "support.hpp"

namespace gazeprior {
namespace {

using align::AstNode;
using align::MatchStrategy;

ErrorKind error_kind(const std::function<void()>& f, std::string* message = nullptr) {
  try {
    f();
  } catch (const Error& e) {
    if (message) *message = e.message();
    return e.kind();
  }
  ADD_FAILURE() << "expected gazeprior::Error";
  return ErrorKind::kIo;
}

tok::TokenSpan span(int id, std::size_t b, std::size_t e) { return {id, b, e}; }

TEST(LeafAst, DeclarationLexesToThreeNodes) {
  auto nodes = align::build_leaf_ast("int x;");
  ASSERT_EQ(nodes.size(), 3u);
  EXPECT_EQ(nodes[0].text, "int");
  EXPECT_EQ(nodes[1].text, "x");
  EXPECT_EQ(nodes[2].text, ";");
  EXPECT_EQ(std::make_pair(nodes[0].char_start, nodes[0].char_end), std::make_pair(std::size_t{0}, std::size_t{3}));
  EXPECT_EQ(std::make_pair(nodes[1].char_start, nodes[1].char_end), std::make_pair(std::size_t{4}, std::size_t{5}));
  EXPECT_EQ(std::make_pair(nodes[2].char_start, nodes[2].char_end), std::make_pair(std::size_t{5}, std::size_t{6}));
}

TEST(LeafAst, EmptySourceIsLexError) {
  EXPECT_EQ(error_kind([] { align::build_leaf_ast(""); }), ErrorKind::kLex);
}

TEST(LeafAst, UnterminatedStringReportsPosition) {
  std::string msg;
  EXPECT_EQ(error_kind([] { align::build_leaf_ast("String s = \"abc;"); }, &msg), ErrorKind::kLex);
  EXPECT_NE(msg.find("11"), std::string::npos) << msg;
}

TEST(LeafAst, UnterminatedCommentIsLexError) {
  EXPECT_EQ(error_kind([] { align::build_leaf_ast("int a; /* open"); }), ErrorKind::kLex);
}

TEST(LeafAst, NodeTextMatchesSourceSlice) {
  const std::string src = "public int add(int a, int b) { return a + b; } // sum\n\"s\\\"q\"";
  for (const auto& n : align::build_leaf_ast(src)) {
    EXPECT_EQ(n.text, src.substr(n.char_start, n.char_end - n.char_start));
  }
}

TEST(LeafAst, SerializedInputPassesThrough) {
  std::vector<AstNode> nodes{{0, "identifier", "foo", 0, 3}, {7, "block", "", 0, 10}};
  auto back = align::build_leaf_ast_from_json(align::ast_to_json(nodes));
  EXPECT_EQ(back, nodes);
}

TEST(LeafAst, SerializedWithReversedSpanIsSchemaError) {
  nlohmann::json j = nlohmann::json::array({{{"node_id", 1}, {"node_type", "x"}, {"char_start", 5}, {"char_end", 2}}});
  EXPECT_EQ(error_kind([&] { align::build_leaf_ast_from_json(j); }), ErrorKind::kSchema);
}

TEST(Mapping, SingleSubtokenNodeIsExact) {
  tok::Vocab v;
  const int re = v.add_merge('r', 'e');
  const int ret = v.add_merge(re, 't');
  const int retu = v.add_merge(ret, 'u');
  const int retur = v.add_merge(retu, 'r');
  const int ret_full = v.add_merge(retur, 'n');
  std::vector<AstNode> nodes{{0, "keyword", "return", 0, 6}};
  std::vector<tok::TokenSpan> spans{span(ret_full, 0, 6)};
  auto r = align::map_nodes_to_subtokens(nodes, spans, v);
  ASSERT_EQ(r.alignments.size(), 1u);
  EXPECT_EQ(r.alignments[0].strategy, MatchStrategy::kExact);
  EXPECT_EQ(r.alignments[0].subtoken_indices, (std::vector<std::size_t>{0}));
}

TEST(Mapping, SplitIdentifierIsAggregate) {
  tok::Vocab v;
  std::vector<AstNode> nodes{{0, "identifier", "BFSdistance", 0, 11}};
  std::vector<tok::TokenSpan> spans{span('B', 0, 3), span('d', 3, 11)};
  auto r = align::map_nodes_to_subtokens(nodes, spans, v);
  ASSERT_EQ(r.alignments.size(), 1u);
  EXPECT_EQ(r.alignments[0].strategy, MatchStrategy::kAggregate);
  EXPECT_EQ(r.alignments[0].subtoken_indices, (std::vector<std::size_t>{0, 1}));
}

TEST(Mapping, MisalignedSpanFallsBackToOverlap) {
  tok::Vocab v;
  std::vector<AstNode> nodes{{4, "expr", "", 10, 22}};
  std::vector<tok::TokenSpan> spans{span('a', 0, 8), span('b', 8, 12), span('c', 12, 18), span('d', 18, 25)};
  auto r = align::map_nodes_to_subtokens(nodes, spans, v);
  ASSERT_EQ(r.alignments.size(), 1u);
  EXPECT_EQ(r.alignments[0].strategy, MatchStrategy::kOffset);
  EXPECT_EQ(r.alignments[0].subtoken_indices, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Mapping, NodeOutsideEverySpanIsUnmapped) {
  tok::Vocab v;
  std::vector<AstNode> nodes{{9, "identifier", "z", 30, 31}};
  std::vector<tok::TokenSpan> spans{span('a', 0, 4)};
  auto r = align::map_nodes_to_subtokens(nodes, spans, v);
  EXPECT_TRUE(r.alignments.empty());
  EXPECT_EQ(r.unmapped_node_ids, (std::vector<int>{9}));
}

align::AlignmentResult two_node_alignment() {
  align::AlignmentResult a;
  a.alignments.push_back({0, {0, 1}, MatchStrategy::kAggregate});
  a.alignments.push_back({1, {1}, MatchStrategy::kExact});
  a.unmapped_node_ids.push_back(2);
  return a;
}

TEST(Projection, CountSplitsEvenlyOverSubtokens) {
  std::vector<align::FixationRecord> recs{{0, 5.0}};
  auto f = align::project_fixations(recs, two_node_alignment(), 3);
  EXPECT_EQ(f, (std::vector<double>{2.5, 2.5, 0.0}));
}

TEST(Projection, NoRecordsGiveZeros) {
  auto f = align::project_fixations({}, two_node_alignment(), 4);
  EXPECT_EQ(f, std::vector<double>(4, 0.0));
}

TEST(Projection, SharedSubtokenAccumulates) {
  align::AlignmentResult a;
  a.alignments.push_back({0, {2}, MatchStrategy::kOffset});
  a.alignments.push_back({1, {2}, MatchStrategy::kOffset});
  std::vector<align::FixationRecord> recs{{0, 1.0}, {1, 2.0}};
  EXPECT_EQ(align::project_fixations(recs, a, 3)[2], 3.0);
}

TEST(Projection, UnmappedNodeIsDroppedButUnknownNodeIsError) {
  std::vector<align::FixationRecord> dropped{{2, 4.0}};
  auto f = align::project_fixations(dropped, two_node_alignment(), 2);
  EXPECT_EQ(f, (std::vector<double>{0.0, 0.0}));
  std::vector<align::FixationRecord> unknown{{42, 1.0}};
  EXPECT_EQ(error_kind([&] { align::project_fixations(unknown, two_node_alignment(), 2); }), ErrorKind::kData);
}

TEST(Projection, NegativeCountIsDataError) {
  std::vector<align::FixationRecord> recs{{0, -1.0}};
  EXPECT_EQ(error_kind([&] { align::project_fixations(recs, two_node_alignment(), 2); }), ErrorKind::kData);
}

TEST(Projection, MassIsConservedOnRandomAlignments) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t length = 1 + rng() % 30;
    align::AlignmentResult a;
    std::vector<align::FixationRecord> recs;
    double expected = 0.0;
    for (int n = 0; n < 12; ++n) {
      const std::size_t b = rng() % length;
      const std::size_t e = b + 1 + rng() % (length - b);
      std::vector<std::size_t> idx(e - b);
      std::iota(idx.begin(), idx.end(), b);
      a.alignments.push_back({n, idx, MatchStrategy::kOffset});
      const double c = std::uniform_real_distribution<double>(0, 7)(rng);
      recs.push_back({n, c});
      expected += c;
    }
    auto f = align::project_fixations(recs, a, length);
    EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), expected, 1e-9);
  }
}

TEST(Targets, ZeroVarianceUsesFloor) {
  std::vector<double> f{0, 0, 4, 0, 0};
  auto t = align::compute_targets(f, 1.0);
  EXPECT_DOUBLE_EQ(t.mu_human, 2.0);
  EXPECT_DOUBLE_EQ(t.sigma_target, 1.0);
  EXPECT_DOUBLE_EQ(t.total_mass, 4.0);
}

TEST(Targets, HandArithmetic) {
  std::vector<double> f{1, 0, 1};
  auto t = align::compute_targets(f, 0.5);
  EXPECT_DOUBLE_EQ(t.mu_human, 1.0);
  EXPECT_DOUBLE_EQ(t.sigma_target, 1.0);
}

TEST(Targets, SinglePosition) {
  std::vector<double> f{1};
  EXPECT_DOUBLE_EQ(align::compute_targets(f).mu_human, 0.0);
}

TEST(Targets, ZeroMassIsRejected) {
  std::vector<double> f{0, 0};
  std::string msg;
  EXPECT_EQ(error_kind([&] { align::compute_targets(f); }, &msg), ErrorKind::kData);
  EXPECT_NE(msg.find("rejected"), std::string::npos);
}

TEST(Accuracy, GoldAgreementIsOne) {
  auto a = two_node_alignment();
  align::GoldAlignment gold{{0, {0, 1}}, {1, {1}}};
  EXPECT_DOUBLE_EQ(align::alignment_accuracy(a.alignments, gold), 1.0);
  gold[1] = {0};
  EXPECT_DOUBLE_EQ(align::alignment_accuracy(a.alignments, gold), 0.5);
}

TEST(Accuracy, EmptyGoldIsError) {
  EXPECT_EQ(error_kind([] { align::alignment_accuracy({}, {}); }), ErrorKind::kData);
}

TEST(Pipeline, SyntheticSamplesMapAgainstByteOwnershipGold) {
  std::mt19937_64 rng(21);
  auto samples = data::synthetic_gaze(30, rng);
  const auto& v = testing::tiny_vocab();
  data::attach_gold(samples, v);
  std::size_t gold_nodes = 0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    auto p = align::process_gaze_sample(s, v, 1.0, 1000);
    ASSERT_TRUE(p.target.has_value()) << p.rejection;
    gold_nodes += p.n_gold_nodes;
    correct += p.n_gold_correct;
    double input = 0.0;
    for (const auto& r : s.fixations) input += r.count;
    EXPECT_NEAR(p.target->total_mass, input, 1e-9);
    EXPECT_EQ(p.target->fixation.size(), p.code_ids.size());
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(gold_nodes), 0.98);
}

TEST(Pipeline, JsonRoundTripOfGazeSample) {
  std::mt19937_64 rng(22);
  auto samples = data::synthetic_gaze(2, rng);
  data::attach_gold(samples, testing::tiny_vocab());
  auto back = align::gaze_sample_from_json(align::gaze_sample_to_json(samples[0]));
  EXPECT_EQ(back.code, samples[0].code);
  EXPECT_EQ(back.ast, samples[0].ast);
  EXPECT_EQ(back.gold, samples[0].gold);
  ASSERT_EQ(back.fixations.size(), samples[0].fixations.size());
}

TEST(Pipeline, MissingCodeFieldIsSchemaError) {
  EXPECT_EQ(error_kind([] { align::gaze_sample_from_json({{"fixations", nlohmann::json::array()}}); }),
            ErrorKind::kSchema);
}

}  // namespace
}  // namespace gazeprior
