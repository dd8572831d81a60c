#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcl/corpus.hpp"

namespace mcl::synth {

/// Desk-scale stand-in for a multi-domain parallel corpus. Every domain shares
/// a core lexicon and a first-order Markov grammar over it; each domain adds a
/// private lexicon whose words replace core words at a per-sentence rate drawn
/// from U(0, private_rate_max). Translation is word-for-word through a fixed
/// lexicon, except that "modifier" core words swap with the following word.
struct SyntheticSpec {
  std::size_t core_vocab = 60;
  std::size_t private_vocab = 20;
  std::size_t modifier_words = 8;
  std::size_t successors = 4;          // preferred next words per core word
  double successor_prob = 0.75;        // chance of following the grammar
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::size_t general_sentences = 4000;
  std::size_t domain_sentences = 1500;
  double private_rate_max = 0.6;
  std::string general_domain = "general";
  std::vector<std::string> domains{"covid", "bible", "books", "ecb", "ted",
                                   "emea", "globalvoices", "jrc", "kde", "news"};

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

struct SyntheticData {
  DomainCorpus general;
  std::vector<DomainCorpus> domains;  // in spec order
};

SyntheticData generate(const SyntheticSpec& spec, std::uint64_t seed);

std::string private_source_word(const std::string& domain, std::size_t i);

/// Writes `<dir>/<domain>.src` and `<dir>/<domain>.tgt`.
void write_corpus(const std::filesystem::path& dir, const DomainCorpus& corpus);

}  // namespace mcl::synth
