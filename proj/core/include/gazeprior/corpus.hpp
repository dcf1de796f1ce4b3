#pragma once

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gazeprior/astalign.hpp"
#include "gazeprior/tokenizer.hpp"

namespace gazeprior::data {

struct CodePair {
  std::string code;
  std::string summary;
};

// JSON lines of {"code": str, "summary": str}. Errors name the line.
std::vector<CodePair> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::filesystem::path& path, std::span<const CodePair> pairs);

// Template-generated Java-like methods with one-line summaries.
std::vector<CodePair> synthetic_pairs(std::size_t count, std::mt19937_64& rng);

// Gaze samples over synthetic methods: leaf AST plus one abstract
// "method_body" node, and Poisson fixation counts around 1-3 foci.
// Gold alignments are left empty; see attach_gold.
std::vector<align::GazeSample> synthetic_gaze(std::size_t count, std::mt19937_64& rng);

// Fills each sample's gold alignment from byte ownership under `vocab`.
void attach_gold(std::span<align::GazeSample> samples, const tok::Vocab& vocab);

}  // namespace gazeprior::data
