#include "mcl/synthetic.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "mcl/rng.hpp"

namespace mcl::synth {

void SyntheticSpec::validate() const {
  if (domains.size() < 2) throw CorpusError("synthetic spec needs at least 2 domains");
  if (core_vocab < 2 || private_vocab < 1) throw CorpusError("synthetic lexicons too small");
  if (modifier_words >= core_vocab) throw CorpusError("modifier_words must be < core_vocab");
  if (successors < 1 || successors > core_vocab) throw CorpusError("bad successor count");
  if (min_len < 1 || max_len < min_len) throw CorpusError("bad sentence length range");
  if (private_rate_max < 0.0 || private_rate_max > 1.0) {
    throw CorpusError("private_rate_max must be in [0, 1]");
  }
  if (general_sentences == 0 || domain_sentences == 0) throw CorpusError("empty corpus size");
  std::set<std::string> names(domains.begin(), domains.end());
  names.insert(general_domain);
  if (names.size() != domains.size() + 1) throw CorpusError("duplicate synthetic domain names");
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"core_vocab", core_vocab},
          {"private_vocab", private_vocab},
          {"modifier_words", modifier_words},
          {"successors", successors},
          {"successor_prob", successor_prob},
          {"min_len", min_len},
          {"max_len", max_len},
          {"general_sentences", general_sentences},
          {"domain_sentences", domain_sentences},
          {"private_rate_max", private_rate_max},
          {"general_domain", general_domain},
          {"domains", domains}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.core_vocab = j.value("core_vocab", s.core_vocab);
  s.private_vocab = j.value("private_vocab", s.private_vocab);
  s.modifier_words = j.value("modifier_words", s.modifier_words);
  s.successors = j.value("successors", s.successors);
  s.successor_prob = j.value("successor_prob", s.successor_prob);
  s.min_len = j.value("min_len", s.min_len);
  s.max_len = j.value("max_len", s.max_len);
  s.general_sentences = j.value("general_sentences", s.general_sentences);
  s.domain_sentences = j.value("domain_sentences", s.domain_sentences);
  s.private_rate_max = j.value("private_rate_max", s.private_rate_max);
  s.general_domain = j.value("general_domain", s.general_domain);
  s.domains = j.value("domains", s.domains);
  return s;
}

std::string private_source_word(const std::string& domain, std::size_t i) {
  return domain + "_x" + std::to_string(i);
}

namespace {

std::string core_source(std::size_t i) { return "a" + std::to_string(i); }
std::string core_target(std::size_t i) { return "b" + std::to_string(i); }
std::string private_target(const std::string& domain, std::size_t i) {
  return domain + "_y" + std::to_string(i);
}

/// Source-side token before rendering: core index or private index.
struct Word {
  bool is_private = false;
  std::size_t index = 0;
};

class Generator {
 public:
  Generator(const SyntheticSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    Rng rng(derive_seed(seed, {0x6a11ULL}));
    succ_.resize(spec.core_vocab);
    for (auto& s : succ_) {
      std::vector<std::size_t> all(spec.core_vocab);
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      rng.shuffle(all);
      s.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.successors));
    }
    // Zipf weights over the private lexicon.
    double total = 0.0;
    for (std::size_t i = 0; i < spec.private_vocab; ++i) {
      total += 1.0 / static_cast<double>(i + 1);
      zipf_cdf_.push_back(total);
    }
    for (double& c : zipf_cdf_) c /= total;
  }

  DomainCorpus corpus(const std::string& domain, std::size_t n, double rate_max,
                      std::uint64_t salt) const {
    Rng rng(derive_seed(seed_, {salt}));
    DomainCorpus c;
    c.domain = domain;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t len =
          spec_.min_len + rng.uniform_index(spec_.max_len - spec_.min_len + 1);
      const double rate = rng.uniform(0.0, rate_max);
      std::vector<Word> words;
      std::size_t state = rng.uniform_index(spec_.core_vocab);
      for (std::size_t t = 0; t < len; ++t) {
        if (t > 0) {
          state = rng.bernoulli(spec_.successor_prob)
                      ? succ_[state][rng.uniform_index(spec_.successors)]
                      : rng.uniform_index(spec_.core_vocab);
        }
        if (rate > 0.0 && rng.bernoulli(rate)) {
          words.push_back({true, zipf(rng)});
        } else {
          words.push_back({false, state});
        }
      }
      c.pairs.push_back({static_cast<int>(k), render_source(domain, words),
                         render_target(domain, words), domain});
    }
    return c;
  }

 private:
  std::size_t zipf(Rng& rng) const {
    const double u = rng.uniform01();
    for (std::size_t i = 0; i < zipf_cdf_.size(); ++i) {
      if (u < zipf_cdf_[i]) return i;
    }
    return zipf_cdf_.size() - 1;
  }

  bool is_modifier(const Word& w) const { return !w.is_private && w.index < spec_.modifier_words; }

  Tokens render_source(const std::string& domain, const std::vector<Word>& words) const {
    Tokens out;
    for (const auto& w : words) {
      out.push_back(w.is_private ? private_source_word(domain, w.index) : core_source(w.index));
    }
    return out;
  }

  Tokens render_target(const std::string& domain, const std::vector<Word>& words) const {
    auto tgt = [&](const Word& w) {
      return w.is_private ? private_target(domain, w.index) : core_target(w.index);
    };
    Tokens out;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (is_modifier(words[i]) && i + 1 < words.size() && !is_modifier(words[i + 1])) {
        out.push_back(tgt(words[i + 1]));
        out.push_back(tgt(words[i]));
        ++i;
      } else {
        out.push_back(tgt(words[i]));
      }
    }
    return out;
  }

  const SyntheticSpec& spec_;
  std::uint64_t seed_;
  std::vector<std::vector<std::size_t>> succ_;
  std::vector<double> zipf_cdf_;
};

}  // namespace

SyntheticData generate(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Generator gen(spec, seed);
  SyntheticData data;
  data.general = gen.corpus(spec.general_domain, spec.general_sentences, 0.0, 0);
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    data.domains.push_back(
        gen.corpus(spec.domains[d], spec.domain_sentences, spec.private_rate_max, d + 1));
  }
  return data;
}

void write_corpus(const std::filesystem::path& dir, const DomainCorpus& corpus) {
  std::filesystem::create_directories(dir);
  std::ofstream src(dir / (corpus.domain + ".src"), std::ios::trunc);
  std::ofstream tgt(dir / (corpus.domain + ".tgt"), std::ios::trunc);
  if (!src || !tgt) throw CorpusError("cannot write corpus files in " + dir.string());
  for (const auto& p : corpus.pairs) {
    src << detokenize(p.source) << '\n';
    tgt << detokenize(p.target) << '\n';
  }
}

}  // namespace mcl::synth
