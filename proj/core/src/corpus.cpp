#include "gazeprior/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string_view>

#include <nlohmann/json.hpp>

#include "gazeprior/error.hpp"

namespace gazeprior::data {

namespace {

constexpr std::array<std::string_view, 16> kNouns = {"value", "item",  "count", "price", "score", "node",
                                                     "user",  "order", "record", "index", "total", "size",
                                                     "name",  "key",   "line",  "word"};
constexpr std::array<std::string_view, 5> kQualifiers = {"", "local", "cached", "current", "next"};

struct Template {
  std::string_view code;
  std::string_view summary;
};

// {N} is the lowerCamel variable, {C} the UpperCamel name part and {S} the
// spoken phrase of the qualified noun.
constexpr std::array<Template, 10> kTemplates = {{
    {"public int sum{C}s(int[] {N}s) {\n  int total = 0;\n  for (int x : {N}s) {\n    total += x;\n  }\n  return "
     "total;\n}",
     "returns the sum of all {S}s"},
    {"public int max{C}(int[] {N}s) {\n  int best = {N}s[0];\n  for (int x : {N}s) {\n    if (x > best) {\n      "
     "best = x;\n    }\n  }\n  return best;\n}",
     "returns the largest {S}"},
    {"public String get{C}() {\n  return this.{N};\n}", "returns the {S}"},
    {"public void set{C}(String {N}) {\n  this.{N} = {N};\n}", "sets the {S}"},
    {"public boolean has{C}s(List<String> {N}s) {\n  return {N}s != null && !{N}s.isEmpty();\n}",
     "checks whether there are any {S}s"},
    {"public int count{C}s(List<String> {N}s, String target) {\n  int n = 0;\n  for (String s : {N}s) {\n    if "
     "(s.equals(target)) {\n      n++;\n    }\n  }\n  return n;\n}",
     "counts the {S}s equal to the target"},
    {"public void print{C}(String {N}) {\n  System.out.println(\"{S}: \" + {N});\n}",
     "prints the {S} to standard output"},
    {"public boolean contains{C}(int[] {N}s, int key) {\n  for (int x : {N}s) {\n    if (x == key) {\n      "
     "return true;\n    }\n  }\n  return false;\n}",
     "checks whether the {S} array contains the key"},
    {"public double average{C}(double[] {N}s) {\n  double s = 0.0;\n  for (double x : {N}s) {\n    s += x;\n  }\n  "
     "return s / {N}s.length;\n}",
     "computes the average {S}"},
    {"public int clamp{C}(int {N}, int low, int high) {\n  return Math.max(low, Math.min(high, {N}));\n}",
     "clamps the {S} between low and high"},
}};

std::string capitalize(std::string_view s) {
  std::string out(s);
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

std::string substitute(std::string_view text, const std::string& var, const std::string& camel,
                       const std::string& spoken) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '{' && i + 2 < text.size() && text[i + 2] == '}') {
      const char tag = text[i + 1];
      if (tag == 'N' || tag == 'C' || tag == 'S') {
        out += tag == 'N' ? var : tag == 'C' ? camel : spoken;
        i += 2;
        continue;
      }
    }
    out.push_back(text[i]);
  }
  return out;
}

CodePair draw_pair(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick_t(0, kTemplates.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_n(0, kNouns.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_q(0, kQualifiers.size() - 1);
  const Template& t = kTemplates[pick_t(rng)];
  const std::string_view noun = kNouns[pick_n(rng)];
  const std::string_view qual = kQualifiers[pick_q(rng)];
  const std::string var = qual.empty() ? std::string(noun) : std::string(qual) + capitalize(noun);
  const std::string camel = capitalize(var);
  const std::string spoken = qual.empty() ? std::string(noun) : std::string(qual) + " " + std::string(noun);
  return {substitute(t.code, var, camel, spoken), substitute(t.summary, var, camel, spoken)};
}

}  // namespace

std::vector<CodePair> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  std::vector<CodePair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::kData, where + ": malformed JSON line");
    }
    for (const char* field : {"code", "summary"}) {
      if (!j.is_object() || !j.contains(field) || !j[field].is_string()) {
        fail(ErrorKind::kSchema, where + ": missing string field '" + field + "'");
      }
    }
    pairs.push_back({j["code"].get<std::string>(), j["summary"].get<std::string>()});
  }
  return pairs;
}

void save_pairs(const std::filesystem::path& path, std::span<const CodePair> pairs) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  for (const CodePair& p : pairs) out << nlohmann::json{{"code", p.code}, {"summary", p.summary}}.dump() << '\n';
}

std::vector<CodePair> synthetic_pairs(std::size_t count, std::mt19937_64& rng) {
  std::vector<CodePair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(draw_pair(rng));
  return out;
}

std::vector<align::GazeSample> synthetic_gaze(std::size_t count, std::mt19937_64& rng) {
  std::vector<align::GazeSample> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const CodePair pair = draw_pair(rng);
    align::GazeSample g;
    g.code = pair.code;
    g.summary = pair.summary;
    g.ast = align::build_leaf_ast(pair.code);
    const std::size_t n_leaves = g.ast.size();
    const std::size_t body_start = pair.code.find('{');
    const std::size_t body_end = pair.code.rfind('}');
    g.ast.push_back({static_cast<int>(n_leaves), "method_body", "", body_start, body_end + 1});

    std::uniform_int_distribution<std::size_t> n_foci(1, 3);
    std::uniform_int_distribution<std::size_t> leaf(0, n_leaves - 1);
    std::vector<std::size_t> foci;
    for (std::size_t f = n_foci(rng); f > 0; --f) foci.push_back(leaf(rng));
    const double spread = 1.5;
    for (std::size_t i = 0; i < n_leaves; ++i) {
      double rate = 0.05;
      for (std::size_t f : foci) {
        const double d = static_cast<double>(i) - static_cast<double>(f);
        rate += 6.0 * std::exp(-d * d / (2.0 * spread * spread));
      }
      std::poisson_distribution<int> fixations(rate);
      int n = fixations(rng);
      // Every focus carries at least one fixation.
      if (n == 0 && std::find(foci.begin(), foci.end(), i) != foci.end()) n = 1;
      if (n > 0) g.fixations.push_back({static_cast<int>(i), static_cast<double>(n)});
    }
    std::poisson_distribution<int> body_hits(1.0);
    if (const int n = body_hits(rng); n > 0) g.fixations.push_back({static_cast<int>(n_leaves), static_cast<double>(n)});
    out.push_back(std::move(g));
  }
  return out;
}

void attach_gold(std::span<align::GazeSample> samples, const tok::Vocab& vocab) {
  for (align::GazeSample& s : samples) {
    const std::vector<int> ids = tok::encode(s.code, vocab);
    s.gold = align::overlap_gold(s.ast, ids, vocab);
  }
}

}  // namespace gazeprior::data
