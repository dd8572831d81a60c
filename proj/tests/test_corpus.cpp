#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "mcl/corpus.hpp"

using namespace mcl;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }

  std::filesystem::path write(const std::string& name, const std::string& bytes) const {
    std::ofstream out(path / name, std::ios::binary);
    out << bytes;
    return path / name;
  }
};

DomainCorpus make_corpus(const std::string& domain, const std::vector<std::size_t>& lengths) {
  DomainCorpus c;
  c.domain = domain;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Tokens s;
    for (std::size_t k = 0; k < lengths[i]; ++k) s.push_back("w" + std::to_string(k));
    c.pairs.push_back({static_cast<int>(i), s, s, domain});
  }
  return c;
}

}  // namespace

TEST_CASE("tokenize") {
  CHECK(tokenize("Hello world") == Tokens{"Hello", "world"});
  CHECK(tokenize("Hello  world") == Tokens{"Hello", "world"});
  CHECK(tokenize("  padded\tline 　end ") == Tokens{"padded", "line", "end"});
  CHECK(tokenize("").empty());
  // decomposed O + combining diaeresis normalizes to the precomposed form
  const auto t = tokenize("O\xCC\x88konomie heute");
  REQUIRE(t.size() == 2);
  CHECK(t[0] == "\xC3\x96konomie");
  CHECK(t[1] == "heute");
  CHECK(tokenize("Case KEPT") == Tokens{"Case", "KEPT"});
  CHECK(detokenize(tokenize("a  b c")) == "a b c");
}

TEST_CASE("ingest") {
  TempDir dir("mcl_corpus_ingest");
  SUBCASE("aligned files") {
    const auto src = dir.write("a.src", "ein Haus\r\nzwei\n");
    const auto tgt = dir.write("a.tgt", "a house\ntwo\n");
    const DomainCorpus c = ingest(src, tgt, "law");
    REQUIRE(c.pairs.size() == 2);
    CHECK(c.pairs[0].source == Tokens{"ein", "Haus"});
    CHECK(c.pairs[1].target == Tokens{"two"});
    CHECK(c.pairs[1].id == 1);
    CHECK(c.pairs[0].domain == "law");
  }
  SUBCASE("line count mismatch") {
    const auto src = dir.write("b.src", "x\ny\nz\n");
    const auto tgt = dir.write("b.tgt", "x\ny\n");
    CHECK_THROWS_AS(ingest(src, tgt, "law"), AlignmentError);
  }
  SUBCASE("invalid utf-8") {
    const auto src = dir.write("c.src", "ok\n\xC3\x28\n");
    const auto tgt = dir.write("c.tgt", "ok\nok\n");
    CHECK_THROWS_AS(ingest(src, tgt, "law"), EncodingError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(ingest(dir.path / "nope", dir.path / "nope2", "law"), CorpusError);
  }
}

TEST_CASE("filter_length drops empty and overlong pairs and renumbers") {
  DomainCorpus c = make_corpus("med", {3, 200, 5, 175, 176});
  c.pairs.push_back({5, {}, {"x"}, "med"});
  c.pairs.push_back({6, {"x"}, {"y"}, "med"});
  const DomainCorpus f = filter_length(c);
  REQUIRE(f.pairs.size() == 4);
  CHECK(f.pairs[0].source.size() == 3);
  CHECK(f.pairs[1].source.size() == 5);
  CHECK(f.pairs[2].source.size() == 175);
  CHECK(f.pairs[3].source == Tokens{"x"});
  for (std::size_t i = 0; i < f.pairs.size(); ++i) CHECK(f.pairs[i].id == static_cast<int>(i));
}

TEST_CASE("build_vocab") {
  DomainCorpus a;
  a.domain = "a";
  a.pairs.push_back({0, {"the", "cat"}, {"die", "Katze"}, "a"});
  a.pairs.push_back({1, {"the", "dog"}, {"der", "Hund"}, "a"});
  DomainCorpus b;
  b.domain = "b";
  b.pairs.push_back({0, {"the"}, {"die"}, "b"});
  const std::vector<DomainCorpus> corpora{a, b};

  const Vocabulary v = build_vocab(corpora);
  CHECK(v.token(kPad) == "<pad>");
  CHECK(v.token(kBos) == "<s>");
  CHECK(v.token(kEos) == "</s>");
  CHECK(v.token(kUnk) == "<unk>");
  // the(3) die(2), then count-1 tokens in first-occurrence order
  CHECK(v.id("the") == 4);
  CHECK(v.id("die") == 5);
  CHECK(v.id("cat") == 6);
  CHECK(v.id("Katze") == 7);
  CHECK(v.size() == 4 + 7);
  CHECK(v.id("never") == kUnk);

  const Vocabulary pruned = build_vocab(corpora, 2);
  CHECK(pruned.size() == 6);
  CHECK(pruned.encode(Tokens{"the", "cat"}) == TokenIds{4, kUnk});

  CHECK(v.decode(TokenIds{kBos, 4, 6, kPad, kEos, 5}) == Tokens{"the", "cat"});
  CHECK(Vocabulary::from_json(v.to_json()) == v);
  CHECK(Vocabulary::from_json(v.to_json()).fingerprint() == v.fingerprint());
  CHECK(pruned.fingerprint() != v.fingerprint());

  CHECK_THROWS_AS(build_vocab(std::vector<DomainCorpus>{}), CorpusError);
  CHECK_THROWS_AS(build_vocab(corpora, 0), CorpusError);
}

TEST_CASE("subsample respects the token budget") {
  const DomainCorpus c = make_corpus("it", std::vector<std::size_t>(10, 5));
  const DomainCorpus s = subsample(c, 12, 7);
  CHECK(s.pairs.size() == 2);
  CHECK(s.source_tokens() == 10);

  const DomainCorpus again = subsample(c, 12, 7);
  REQUIRE(again.pairs.size() == s.pairs.size());
  for (std::size_t i = 0; i < s.pairs.size(); ++i) CHECK(again.pairs[i].id == s.pairs[i].id);

  SUBCASE("mixed lengths: budget never exceeded, no duplicates") {
    std::vector<std::size_t> lengths;
    for (std::size_t i = 0; i < 200; ++i) lengths.push_back(1 + (i * 7919) % 23);
    const DomainCorpus mixed = make_corpus("ko", lengths);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const DomainCorpus sub = subsample(mixed, 300, seed);
      CHECK(sub.source_tokens() <= 300);
      std::set<int> ids;
      std::size_t longest_unsampled = 0;
      for (const auto& p : sub.pairs) ids.insert(p.id);
      for (const auto& p : mixed.pairs) {
        if (!ids.contains(p.id)) longest_unsampled = std::max(longest_unsampled, p.source.size());
      }
      CHECK(ids.size() == sub.pairs.size());
      CHECK(300 - sub.source_tokens() < longest_unsampled);
    }
  }
  SUBCASE("budget larger than corpus takes everything") {
    CHECK(subsample(c, 1000, 1).pairs.size() == 10);
  }
  CHECK_THROWS_AS(subsample(c, 0, 1), CorpusError);
}

TEST_CASE("support and query are disjoint and within budget") {
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < 300; ++i) lengths.push_back(2 + i % 9);
  const DomainCorpus c = make_corpus("covid", lengths);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto split = split_support_query(c, 200, 400, seed);
    CHECK(count_source_tokens(split.support) <= 200);
    CHECK(count_source_tokens(split.query) <= 400);
    std::set<int> ids;
    for (const auto& p : split.support) ids.insert(p.id);
    for (const auto& p : split.query) CHECK(ids.insert(p.id).second);
  }
  CHECK_THROWS_AS(split_support_query(make_corpus("tiny", {3}), 5, 5, 0), CorpusError);

  const auto four = split_support_query(make_corpus("four", {2, 2, 2, 2}), 4, 4, 3);
  CHECK(four.support.size() == 2);
  CHECK(four.query.size() == 2);
}

TEST_CASE("split manifest json round trip") {
  SplitManifest m;
  m.seed = 17;
  m.support_tokens = 100;
  m.query_tokens = 200;
  m.pool_tokens = 5000;
  m.domains.push_back({"law", DomainRole::MetaTrainSeen, {0, 2, 5}, {1}, {3, 4}});
  m.domains.push_back({"bible", DomainRole::MetaTestUnseen, {}, {7, 8}, {9}});
  const SplitManifest r = SplitManifest::from_json(m.to_json());
  CHECK(r.seed == 17);
  CHECK(r.pool_tokens == 5000);
  CHECK(r.find("law").meta_train_pool == std::vector<int>{0, 2, 5});
  CHECK(r.find("bible").role == DomainRole::MetaTestUnseen);
  CHECK(r.to_json() == m.to_json());
  CHECK_THROWS_AS(r.find("nope"), CorpusError);
  CHECK(domain_role_from_string(to_string(DomainRole::MetaTestSeen)) == DomainRole::MetaTestSeen);
}
