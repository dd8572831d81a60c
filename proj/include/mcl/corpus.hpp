#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace mcl {

using Tokens = std::vector<std::string>;
using TokenIds = std::vector<int>;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Source and target files disagree on the number of lines.
class AlignmentError : public CorpusError {
 public:
  using CorpusError::CorpusError;
};

/// Input bytes are not valid UTF-8.
class EncodingError : public CorpusError {
 public:
  using CorpusError::CorpusError;
};

inline constexpr std::size_t kDefaultMaxLen = 175;

struct SentencePair {
  int id = 0;
  Tokens source;
  Tokens target;
  std::string domain;
};

enum class DomainRole { MetaTrainSeen, MetaTestSeen, MetaTestUnseen };

std::string_view to_string(DomainRole role);
DomainRole domain_role_from_string(std::string_view s);

struct DomainCorpus {
  std::string domain;
  std::vector<SentencePair> pairs;
  DomainRole role = DomainRole::MetaTrainSeen;

  std::size_t source_tokens() const;
};

/// NFC-normalizes `text` and splits it on Unicode whitespace. Case is preserved.
Tokens tokenize(std::string_view text);

/// Joins tokens with single spaces.
std::string detokenize(std::span<const std::string> tokens);

/// Throws EncodingError when `bytes` is not well-formed UTF-8.
void validate_utf8(std::string_view bytes, std::string_view context);

/// Reads `<source_file>` and `<target_file>` line by line into a corpus with
/// dense ids in file order.
DomainCorpus ingest(const std::filesystem::path& source_file,
                    const std::filesystem::path& target_file,
                    const std::string& domain);

/// Drops pairs with an empty side or with either side longer than `max_len`,
/// then renumbers ids densely in the surviving order.
DomainCorpus filter_length(const DomainCorpus& corpus, std::size_t max_len = kDefaultMaxLen);

/// Uniform sample without replacement, greedily filled until the next pair in
/// the permutation would exceed `token_budget` source tokens.
DomainCorpus subsample(const DomainCorpus& corpus, std::size_t token_budget,
                       std::uint64_t rng_seed);

struct SupportQuerySplit {
  std::vector<SentencePair> support;
  std::vector<SentencePair> query;
};

/// Disjoint support/query samples drawn from a single permutation of `pairs`.
SupportQuerySplit split_support_query(std::span<const SentencePair> pairs,
                                      std::size_t support_budget,
                                      std::size_t query_budget, std::uint64_t rng_seed);

inline SupportQuerySplit split_support_query(const DomainCorpus& corpus,
                                             std::size_t support_budget,
                                             std::size_t query_budget,
                                             std::uint64_t rng_seed) {
  return split_support_query(std::span<const SentencePair>(corpus.pairs), support_budget,
                             query_budget, rng_seed);
}

inline constexpr std::size_t kDefaultSupportTokens = 8000;
inline constexpr std::size_t kDefaultQueryTokens = 16000;

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

class Vocabulary {
 public:
  Vocabulary();

  /// Appends a non-reserved token; returns its id. Existing tokens keep their id.
  int add(const std::string& token);

  int id(const std::string& token) const;  // UNK when absent
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  std::size_t size() const { return tokens_.size(); }

  TokenIds encode(std::span<const std::string> tokens) const;
  /// Drops PAD/BOS/EOS; stops at the first EOS.
  Tokens decode(std::span<const int> ids) const;

  /// Order-sensitive hash of the token list; equal iff the vocabularies match.
  std::uint64_t fingerprint() const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Joint source+target vocabulary over all corpora. Tokens with count below
/// `min_count` are left out (and so encode to UNK). Ordered by descending count,
/// ties by first occurrence.
Vocabulary build_vocab(std::span<const DomainCorpus> corpora, int min_count = 1);

// ---------------------------------------------------------------------------
// Split manifest

struct DomainSplit {
  std::string domain;
  DomainRole role = DomainRole::MetaTestUnseen;
  std::vector<int> meta_train_pool;  // ids available to meta-training tasks (seen only)
  std::vector<int> support;          // meta-test support
  std::vector<int> query;            // meta-test query
};

struct SplitManifest {
  std::uint64_t seed = 0;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t support_tokens = kDefaultSupportTokens;
  std::size_t query_tokens = kDefaultQueryTokens;
  std::size_t pool_tokens = 0;  // meta-train pool budget per seen domain; 0 = rest of corpus
  std::vector<DomainSplit> domains;

  const DomainSplit& find(std::string_view domain) const;

  nlohmann::json to_json() const;
  static SplitManifest from_json(const nlohmann::json& j);
};

/// Collects the pairs of `corpus` whose ids are listed, in list order.
std::vector<SentencePair> select_pairs(const DomainCorpus& corpus, std::span<const int> ids);

std::size_t count_source_tokens(std::span<const SentencePair> pairs);

}  // namespace mcl
