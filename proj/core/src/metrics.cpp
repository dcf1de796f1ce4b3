#include "gazeprior/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "gazeprior/error.hpp"

namespace gazeprior::metrics {

namespace {

class PorterStemmer {
 public:
  explicit PorterStemmer(std::string_view word) : b_(word), k_(static_cast<int>(word.size()) - 1) {}

  std::string run() {
    if (k_ <= 1) return b_;
    step1ab();
    if (k_ > 0) {
      step1c();
      step2();
      step3();
      step4();
      step5();
    }
    return b_.substr(0, static_cast<std::size_t>(k_ + 1));
  }

 private:
  char at(int i) const { return b_[static_cast<std::size_t>(i)]; }

  bool cons(int i) const {
    switch (at(i)) {
      case 'a':
      case 'e':
      case 'i':
      case 'o':
      case 'u':
        return false;
      case 'y':
        return i == 0 ? true : !cons(i - 1);
      default:
        return true;
    }
  }

  // Number of VC sequences in b[0..j].
  int m() const {
    int n = 0;
    int i = 0;
    while (true) {
      if (i > j_) return n;
      if (!cons(i)) break;
      ++i;
    }
    ++i;
    while (true) {
      while (true) {
        if (i > j_) return n;
        if (cons(i)) break;
        ++i;
      }
      ++i;
      ++n;
      while (true) {
        if (i > j_) return n;
        if (!cons(i)) break;
        ++i;
      }
      ++i;
    }
  }

  bool vowel_in_stem() const {
    for (int i = 0; i <= j_; ++i) {
      if (!cons(i)) return true;
    }
    return false;
  }

  bool double_consonant(int i) const { return i >= 1 && at(i) == at(i - 1) && cons(i); }

  bool cvc(int i) const {
    if (i < 2 || !cons(i) || cons(i - 1) || !cons(i - 2)) return false;
    const char c = at(i);
    return c != 'w' && c != 'x' && c != 'y';
  }

  bool ends(std::string_view s) {
    const int len = static_cast<int>(s.size());
    if (len > k_ + 1) return false;
    if (std::string_view(b_).substr(static_cast<std::size_t>(k_ - len + 1), s.size()) != s) return false;
    j_ = k_ - len;
    return true;
  }

  void set_to(std::string_view s) {
    b_.replace(static_cast<std::size_t>(j_ + 1), static_cast<std::size_t>(k_ - j_), s);
    k_ = j_ + static_cast<int>(s.size());
    b_.resize(static_cast<std::size_t>(k_ + 1));
  }

  void replace_if_measured(std::string_view s) {
    if (m() > 0) set_to(s);
  }

  void step1ab() {
    if (at(k_) == 's') {
      if (ends("sses")) {
        k_ -= 2;
      } else if (ends("ies")) {
        set_to("i");
      } else if (at(k_ - 1) != 's') {
        --k_;
      }
    }
    if (ends("eed")) {
      if (m() > 0) --k_;
    } else if ((ends("ed") || ends("ing")) && vowel_in_stem()) {
      k_ = j_;
      if (ends("at")) {
        set_to("ate");
      } else if (ends("bl")) {
        set_to("ble");
      } else if (ends("iz")) {
        set_to("ize");
      } else if (double_consonant(k_)) {
        --k_;
        const char c = at(k_);
        if (c == 'l' || c == 's' || c == 'z') ++k_;
      } else if (j_ = k_, m() == 1 && cvc(k_)) {
        set_to("e");
      }
    }
    b_.resize(static_cast<std::size_t>(k_ + 1));
  }

  void step1c() {
    if (ends("y") && vowel_in_stem()) b_[static_cast<std::size_t>(k_)] = 'i';
  }

  bool rule(std::string_view suffix, std::string_view replacement) {
    if (!ends(suffix)) return false;
    replace_if_measured(replacement);
    return true;
  }

  void step2() {
    switch (at(k_ - 1)) {
      case 'a':
        rule("ational", "ate") || rule("tional", "tion");
        break;
      case 'c':
        rule("enci", "ence") || rule("anci", "ance");
        break;
      case 'e':
        rule("izer", "ize");
        break;
      case 'l':
        rule("bli", "ble") || rule("alli", "al") || rule("entli", "ent") || rule("eli", "e") || rule("ousli", "ous");
        break;
      case 'o':
        rule("ization", "ize") || rule("ation", "ate") || rule("ator", "ate");
        break;
      case 's':
        rule("alism", "al") || rule("iveness", "ive") || rule("fulness", "ful") || rule("ousness", "ous");
        break;
      case 't':
        rule("aliti", "al") || rule("iviti", "ive") || rule("biliti", "ble");
        break;
      case 'g':
        rule("logi", "log");
        break;
      default:
        break;
    }
  }

  void step3() {
    switch (at(k_)) {
      case 'e':
        rule("icate", "ic") || rule("ative", "") || rule("alize", "al");
        break;
      case 'i':
        rule("iciti", "ic");
        break;
      case 'l':
        rule("ical", "ic") || rule("ful", "");
        break;
      case 's':
        rule("ness", "");
        break;
      default:
        break;
    }
  }

  void step4() {
    bool found = false;
    switch (at(k_ - 1)) {
      case 'a':
        found = ends("al");
        break;
      case 'c':
        found = ends("ance") || ends("ence");
        break;
      case 'e':
        found = ends("er");
        break;
      case 'i':
        found = ends("ic");
        break;
      case 'l':
        found = ends("able") || ends("ible");
        break;
      case 'n':
        found = ends("ant") || ends("ement") || ends("ment") || ends("ent");
        break;
      case 'o':
        found = (ends("ion") && j_ >= 0 && (at(j_) == 's' || at(j_) == 't')) || ends("ou");
        break;
      case 's':
        found = ends("ism");
        break;
      case 't':
        found = ends("ate") || ends("iti");
        break;
      case 'u':
        found = ends("ous");
        break;
      case 'v':
        found = ends("ive");
        break;
      case 'z':
        found = ends("ize");
        break;
      default:
        break;
    }
    if (found && m() > 1) k_ = j_;
  }

  void step5() {
    j_ = k_;
    if (at(k_) == 'e') {
      const int a = m();
      if (a > 1 || (a == 1 && !cvc(k_ - 1))) --k_;
    }
    if (at(k_) == 'l' && double_consonant(k_) && m() > 1) --k_;
  }

  std::string b_;
  int k_;
  int j_ = 0;
};

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

Tokens metric_tokens(std::string_view text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string porter_stem(std::string_view word) { return PorterStemmer(word).run(); }

BleuCounts& BleuCounts::operator+=(const BleuCounts& other) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  candidate_length += other.candidate_length;
  reference_length += other.reference_length;
  return *this;
}

BleuCounts bleu_counts(const Tokens& candidate, const Tokens& reference) {
  BleuCounts c;
  c.candidate_length = candidate.size();
  c.reference_length = reference.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    for (const auto& [gram, count] : cand) {
      auto it = ref.find(gram);
      if (it != ref.end()) c.matches[n - 1] += std::min(count, it->second);
      c.totals[n - 1] += count;
    }
  }
  return c;
}

double bleu_from_counts(const BleuCounts& c) {
  if (c.candidate_length == 0 || c.matches[0] == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double p;
    if (n > 0 && c.matches[n] == 0) {
      p = 1.0 / (static_cast<double>(c.totals[n]) + 1.0);
    } else {
      p = static_cast<double>(c.matches[n]) / static_cast<double>(c.totals[n]);
    }
    log_sum += std::log(p);
  }
  const double cand = static_cast<double>(c.candidate_length);
  const double ref = static_cast<double>(c.reference_length);
  const double bp = cand >= ref ? 1.0 : std::exp(1.0 - ref / cand);
  return bp * std::exp(log_sum / 4.0);
}

double bleu4(const Tokens& candidate, const Tokens& reference) {
  return bleu_from_counts(bleu_counts(candidate, reference));
}

double rouge_l(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

double meteor_lite(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  std::vector<int> cand_to_ref(candidate.size(), -1);
  std::vector<bool> ref_used(reference.size(), false);
  auto match_stage = [&](auto&& key) {
    std::vector<std::string> ref_keys;
    for (const auto& r : reference) ref_keys.push_back(key(r));
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (cand_to_ref[i] >= 0) continue;
      const std::string k = key(candidate[i]);
      for (std::size_t j = 0; j < reference.size(); ++j) {
        if (!ref_used[j] && ref_keys[j] == k) {
          cand_to_ref[i] = static_cast<int>(j);
          ref_used[j] = true;
          break;
        }
      }
    }
  };
  match_stage([](const std::string& w) { return w; });
  match_stage([](const std::string& w) { return porter_stem(w); });

  std::size_t matches = 0;
  std::size_t chunks = 0;
  int prev_ref = -2;
  bool prev_matched = false;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    const int r = cand_to_ref[i];
    if (r < 0) {
      prev_matched = false;
      continue;
    }
    ++matches;
    if (!prev_matched || r != prev_ref + 1) ++chunks;
    prev_ref = r;
    prev_matched = true;
  }
  if (matches == 0) return 0.0;
  const double m = static_cast<double>(matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double fmean = p * r / (0.9 * p + 0.1 * r);
  const double frag = static_cast<double>(chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return fmean * (1.0 - penalty);
}

CorpusScore score_corpus(std::span<const Tokens> candidates, std::span<const Tokens> references) {
  if (candidates.size() != references.size()) {
    fail(ErrorKind::kDimension, "score_corpus: " + std::to_string(candidates.size()) + " candidates vs " +
                                    std::to_string(references.size()) + " references");
  }
  CorpusScore s;
  s.n_pairs = candidates.size();
  BleuCounts pooled;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const BleuCounts c = bleu_counts(candidates[i], references[i]);
    pooled += c;
    PairScore p{bleu_from_counts(c), rouge_l(candidates[i], references[i]), meteor_lite(candidates[i], references[i])};
    s.rouge_l += p.rouge_l;
    s.meteor_lite += p.meteor_lite;
    s.pairs.push_back(p);
  }
  if (s.n_pairs > 0) {
    s.bleu4 = bleu_from_counts(pooled);
    s.rouge_l /= static_cast<double>(s.n_pairs);
    s.meteor_lite /= static_cast<double>(s.n_pairs);
  }
  return s;
}

nlohmann::json report_json(const CorpusScore& score) {
  return {{"bleu4", score.bleu4}, {"rouge_l", score.rouge_l}, {"meteor_lite", score.meteor_lite},
          {"n_pairs", score.n_pairs}};
}

}  // namespace gazeprior::metrics
