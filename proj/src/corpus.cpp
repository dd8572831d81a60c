#include "mcl/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/ustring.h>

#include "mcl/rng.hpp"

namespace mcl {

std::string_view to_string(DomainRole role) {
  switch (role) {
    case DomainRole::MetaTrainSeen:
      return "meta-train-seen";
    case DomainRole::MetaTestSeen:
      return "meta-test-seen";
    case DomainRole::MetaTestUnseen:
      return "meta-test-unseen";
  }
  return "?";
}

DomainRole domain_role_from_string(std::string_view s) {
  if (s == "meta-train-seen") return DomainRole::MetaTrainSeen;
  if (s == "meta-test-seen") return DomainRole::MetaTestSeen;
  if (s == "meta-test-unseen") return DomainRole::MetaTestUnseen;
  throw CorpusError("unknown domain role '" + std::string(s) + "'");
}

std::size_t DomainCorpus::source_tokens() const { return count_source_tokens(pairs); }

std::size_t count_source_tokens(std::span<const SentencePair> pairs) {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.source.size();
  return n;
}

void validate_utf8(std::string_view bytes, std::string_view context) {
  UErrorCode status = U_ZERO_ERROR;
  int32_t needed = 0;
  u_strFromUTF8(nullptr, 0, &needed, bytes.data(), static_cast<int32_t>(bytes.size()), &status);
  if (status == U_BUFFER_OVERFLOW_ERROR || status == U_STRING_NOT_TERMINATED_WARNING) {
    status = U_ZERO_ERROR;
  }
  if (U_FAILURE(status)) {
    throw EncodingError("invalid UTF-8 in " + std::string(context));
  }
}

Tokens tokenize(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw CorpusError("ICU NFC normalizer unavailable");

  const icu::UnicodeString raw =
      icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  const icu::UnicodeString normalized = nfc->normalize(raw, status);
  if (U_FAILURE(status)) throw CorpusError("NFC normalization failed");

  Tokens tokens;
  icu::UnicodeString current;
  auto flush = [&] {
    if (current.isEmpty()) return;
    std::string utf8;
    current.toUTF8String(utf8);
    tokens.push_back(std::move(utf8));
    current.remove();
  };
  for (int32_t i = 0; i < normalized.length();) {
    const UChar32 c = normalized.char32At(i);
    if (u_isUWhiteSpace(c)) {
      flush();
    } else {
      current.append(c);
    }
    i = normalized.moveIndex32(i, 1);
  }
  flush();
  return tokens;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  validate_utf8(bytes, path.string());

  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < bytes.size()) {
    std::size_t end = bytes.find('\n', start);
    if (end == std::string::npos) end = bytes.size();
    std::string line = bytes.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

}  // namespace

DomainCorpus ingest(const std::filesystem::path& source_file,
                    const std::filesystem::path& target_file, const std::string& domain) {
  const auto src = read_lines(source_file);
  const auto tgt = read_lines(target_file);
  if (src.size() != tgt.size()) {
    throw AlignmentError(domain + ": " + source_file.string() + " has " +
                         std::to_string(src.size()) + " lines but " + target_file.string() +
                         " has " + std::to_string(tgt.size()));
  }
  DomainCorpus corpus;
  corpus.domain = domain;
  corpus.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    corpus.pairs.push_back(
        SentencePair{static_cast<int>(i), tokenize(src[i]), tokenize(tgt[i]), domain});
  }
  return corpus;
}

DomainCorpus filter_length(const DomainCorpus& corpus, std::size_t max_len) {
  DomainCorpus out;
  out.domain = corpus.domain;
  out.role = corpus.role;
  for (const auto& p : corpus.pairs) {
    if (p.source.empty() || p.target.empty()) continue;
    if (p.source.size() > max_len || p.target.size() > max_len) continue;
    SentencePair kept = p;
    kept.id = static_cast<int>(out.pairs.size());
    out.pairs.push_back(std::move(kept));
  }
  return out;
}

namespace {

/// Greedy fill over `order` starting at `pos`; stops at the first pair that
/// does not fit. Returns the indices taken and advances `pos` past them.
std::vector<std::size_t> greedy_fill(std::span<const SentencePair> pairs,
                                     const std::vector<std::size_t>& order, std::size_t& pos,
                                     std::size_t budget) {
  std::vector<std::size_t> taken;
  std::size_t used = 0;
  while (pos < order.size()) {
    const std::size_t len = pairs[order[pos]].source.size();
    if (used + len > budget) break;
    used += len;
    taken.push_back(order[pos]);
    ++pos;
  }
  return taken;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  return order;
}

}  // namespace

DomainCorpus subsample(const DomainCorpus& corpus, std::size_t token_budget,
                       std::uint64_t rng_seed) {
  if (token_budget == 0) throw CorpusError("subsample: token budget must be positive");
  if (corpus.pairs.empty()) throw CorpusError("subsample: corpus '" + corpus.domain + "' is empty");
  const auto order = permutation(corpus.pairs.size(), rng_seed);
  std::size_t pos = 0;
  DomainCorpus out;
  out.domain = corpus.domain;
  out.role = corpus.role;
  for (std::size_t i : greedy_fill(corpus.pairs, order, pos, token_budget)) {
    out.pairs.push_back(corpus.pairs[i]);
  }
  return out;
}

SupportQuerySplit split_support_query(std::span<const SentencePair> pairs,
                                      std::size_t support_budget, std::size_t query_budget,
                                      std::uint64_t rng_seed) {
  const auto order = permutation(pairs.size(), rng_seed);
  std::size_t pos = 0;
  SupportQuerySplit split;
  for (std::size_t i : greedy_fill(pairs, order, pos, support_budget)) {
    split.support.push_back(pairs[i]);
  }
  for (std::size_t i : greedy_fill(pairs, order, pos, query_budget)) {
    split.query.push_back(pairs[i]);
  }
  if (split.support.empty() || split.query.empty()) {
    throw CorpusError("split_support_query: " + std::to_string(pairs.size()) +
                      " pairs cannot fill support budget " + std::to_string(support_budget) +
                      " and query budget " + std::to_string(query_budget));
  }
  return split;
}

std::vector<SentencePair> select_pairs(const DomainCorpus& corpus, std::span<const int> ids) {
  std::vector<SentencePair> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= corpus.pairs.size()) {
      throw CorpusError(corpus.domain + ": pair id " + std::to_string(id) + " out of range");
    }
    out.push_back(corpus.pairs[static_cast<std::size_t>(id)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} {}

int Vocabulary::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw CorpusError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return index_.contains(token); }

TokenIds Vocabulary::encode(std::span<const std::string> tokens) const {
  TokenIds ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocabulary::decode(std::span<const int> ids) const {
  Tokens out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    out.push_back(token(id));
  }
  return out;
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) h = (h ^ c) * 0x100000001b3ULL;
    h = (h ^ 0xffU) * 0x100000001b3ULL;
  }
  return h;
}

nlohmann::json Vocabulary::to_json() const {
  return nlohmann::json{{"tokens", std::vector<std::string>(tokens_.begin() + kNumReserved,
                                                            tokens_.end())}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  for (const auto& t : j.at("tokens")) v.add(t.get<std::string>());
  return v;
}

Vocabulary build_vocab(std::span<const DomainCorpus> corpora, int min_count) {
  if (min_count < 1) throw CorpusError("build_vocab: min_count must be >= 1");
  if (corpora.empty()) throw CorpusError("build_vocab: no corpora");

  struct Entry {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Entry> counts;
  std::vector<std::string> order;
  auto see = [&](const std::string& tok) {
    auto [it, inserted] = counts.try_emplace(tok, Entry{0, order.size()});
    if (inserted) order.push_back(tok);
    ++it->second.count;
  };
  std::size_t pairs = 0;
  for (const auto& corpus : corpora) {
    for (const auto& p : corpus.pairs) {
      ++pairs;
      for (const auto& t : p.source) see(t);
      for (const auto& t : p.target) see(t);
    }
  }
  if (pairs == 0) throw CorpusError("build_vocab: corpora contain no sentences");

  std::vector<std::string> kept;
  for (const auto& tok : order) {
    if (counts[tok].count >= static_cast<std::size_t>(min_count)) kept.push_back(tok);
  }
  std::stable_sort(kept.begin(), kept.end(), [&](const std::string& a, const std::string& b) {
    return counts[a].count > counts[b].count;
  });
  Vocabulary vocab;
  for (const auto& tok : kept) vocab.add(tok);
  return vocab;
}

// ---------------------------------------------------------------------------
// Manifest

const DomainSplit& SplitManifest::find(std::string_view domain) const {
  for (const auto& d : domains) {
    if (d.domain == domain) return d;
  }
  throw CorpusError("manifest has no domain '" + std::string(domain) + "'");
}

nlohmann::json SplitManifest::to_json() const {
  nlohmann::json doms = nlohmann::json::array();
  for (const auto& d : domains) {
    doms.push_back({{"domain", d.domain},
                    {"role", std::string(to_string(d.role))},
                    {"meta_train_pool", d.meta_train_pool},
                    {"support", d.support},
                    {"query", d.query}});
  }
  return {{"seed", seed},
          {"max_len", max_len},
          {"support_tokens", support_tokens},
          {"query_tokens", query_tokens},
          {"pool_tokens", pool_tokens},
          {"domains", doms}};
}

SplitManifest SplitManifest::from_json(const nlohmann::json& j) {
  SplitManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.max_len = j.at("max_len").get<std::size_t>();
  m.support_tokens = j.at("support_tokens").get<std::size_t>();
  m.query_tokens = j.at("query_tokens").get<std::size_t>();
  m.pool_tokens = j.value("pool_tokens", std::size_t{0});
  for (const auto& d : j.at("domains")) {
    DomainSplit s;
    s.domain = d.at("domain").get<std::string>();
    s.role = domain_role_from_string(d.at("role").get<std::string>());
    s.meta_train_pool = d.at("meta_train_pool").get<std::vector<int>>();
    s.support = d.at("support").get<std::vector<int>>();
    s.query = d.at("query").get<std::vector<int>>();
    m.domains.push_back(std::move(s));
  }
  return m;
}

}  // namespace mcl
