#include "mcl/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mcl/rng.hpp"

namespace mcl::scoring {

std::vector<double> NeuralLm::log_probs(std::span<const int> sentence) const {
  return nn::lm_token_log_probs(params_, config_, sentence);
}

TrainedLm train_lm(std::span<const TokenIds> sentences, const nn::ModelConfig& config,
                   const LmTrainConfig& tc, std::uint64_t vocab_fingerprint,
                   const nn::ParamVector* init) {
  if (sentences.empty()) throw ScoringError("train_lm: empty corpus");
  std::vector<nn::Example> all;
  all.reserve(sentences.size());
  for (const auto& s : sentences) {
    if (s.empty()) continue;
    all.push_back({{}, s});
  }
  if (all.empty()) throw ScoringError("train_lm: corpus has only empty sentences");

  // Held-out slice from a seeded permutation; a one-sentence corpus validates on itself.
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(tc.fit.seed, {0x1a11ULL}));
  rng.shuffle(order);
  std::size_t n_valid = std::min(
      tc.max_valid, static_cast<std::size_t>(std::floor(tc.valid_fraction * all.size())));
  std::vector<nn::Example> train, valid;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_valid ? valid : train).push_back(all[order[i]]);
  }
  if (train.empty()) train = valid;
  if (valid.empty() && tc.fit.patience > 0) valid = train;

  nn::ParamVector params =
      init ? *init : nn::init_params(config, nn::ModelKind::LanguageModel, tc.fit.seed);
  if (init && !nn::init_params(config, nn::ModelKind::LanguageModel, 0).same_layout(*init)) {
    throw ScoringError("train_lm: initial parameters do not match the model config");
  }
  auto history = nn::fit(params, config, nn::ModelKind::LanguageModel, train, valid, tc.fit);
  return {NeuralLm(std::move(params), config, vocab_fingerprint), std::move(history)};
}

double token_avg_cross_entropy(const LanguageModel& lm, std::span<const int> sentence) {
  if (sentence.empty()) throw ScoringError("cross-entropy of an empty sentence");
  const auto lp = lm.log_probs(sentence);
  if (lp.size() != sentence.size() + 1) {
    throw ScoringError("language model returned " + std::to_string(lp.size()) +
                       " log-probabilities for " + std::to_string(sentence.size()) + " tokens");
  }
  double sum = 0.0;
  for (double v : lp) sum += v;
  return -sum / static_cast<double>(lp.size());
}

namespace {

void check_vocab(const LanguageModel& general, const LanguageModel& domain) {
  if (general.vocab_fingerprint() != domain.vocab_fingerprint()) {
    throw ScoringError("general and domain language models use different vocabularies");
  }
}

}  // namespace

double divergence(const LanguageModel& general, const LanguageModel& domain,
                  std::span<const int> sentence, bool flip_sign) {
  check_vocab(general, domain);
  const double d =
      token_avg_cross_entropy(domain, sentence) - token_avg_cross_entropy(general, sentence);
  return flip_sign ? -d : d;
}

std::vector<ScoredSentence> score_pairs(const LanguageModel& general, const LanguageModel& domain,
                                        std::span<const SentencePair> pairs,
                                        const Vocabulary& vocab, bool flip_sign) {
  check_vocab(general, domain);
  if (vocab.fingerprint() != general.vocab_fingerprint()) {
    throw ScoringError("language models were trained with a different vocabulary");
  }
  std::vector<ScoredSentence> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const TokenIds ids = vocab.encode(p.source);
    ScoredSentence s;
    s.pair_id = p.id;
    s.domain = p.domain;
    s.h_general = token_avg_cross_entropy(general, ids);
    s.h_domain = token_avg_cross_entropy(domain, ids);
    s.divergence = flip_sign ? s.h_general - s.h_domain : s.h_domain - s.h_general;
    if (!std::isfinite(s.divergence)) {
      throw ScoringError("non-finite score for pair " + std::to_string(p.id) + " of " + p.domain);
    }
    out.push_back(std::move(s));
  }
  return out;
}

DomainScores score_corpus(const LanguageModel& general,
                          const std::map<std::string, const LanguageModel*>& domain_lms,
                          std::span<const DomainCorpus> corpora, const Vocabulary& vocab,
                          bool flip_sign) {
  DomainScores out;
  for (const auto& corpus : corpora) {
    const auto it = domain_lms.find(corpus.domain);
    if (it == domain_lms.end() || it->second == nullptr) {
      throw ScoringError("no domain language model for '" + corpus.domain + "'");
    }
    out[corpus.domain] = score_pairs(general, *it->second, corpus.pairs, vocab, flip_sign);
  }
  return out;
}

namespace {

std::string format17(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& field, const std::filesystem::path& path) {
  double v = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
    throw ScoringError(path.string() + ": bad number '" + field + "'");
  }
  return v;
}

}  // namespace

void write_scores(const std::filesystem::path& path, std::span<const ScoredSentence> scores) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ScoringError("cannot write " + path.string());
  out << "pair_id\th_general\th_domain\tdivergence\n";
  for (const auto& s : scores) {
    out << s.pair_id << '\t' << format17(s.h_general) << '\t' << format17(s.h_domain) << '\t'
        << format17(s.divergence) << '\n';
  }
}

std::vector<ScoredSentence> read_scores(const std::filesystem::path& path,
                                        const std::string& domain) {
  std::ifstream in(path);
  if (!in) throw ScoringError("cannot open score file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "pair_id\th_general\th_domain\tdivergence") {
    throw ScoringError(path.string() + ": unexpected header");
  }
  std::vector<ScoredSentence> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    if (f.size() != 4) throw ScoringError(path.string() + ": expected 4 columns");
    ScoredSentence s;
    s.pair_id = std::stoi(f[0]);
    s.domain = domain;
    s.h_general = parse_double(f[1], path);
    s.h_domain = parse_double(f[2], path);
    s.divergence = parse_double(f[3], path);
    out.push_back(std::move(s));
  }
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ScoringError("quantile of an empty list");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

nlohmann::json ScoreSummary::to_json() const {
  return {{"count", count}, {"min", min},       {"q33", q33}, {"median", median},
          {"q67", q67},     {"max", max},       {"mean", mean}};
}

ScoreSummary summarize(std::span<const ScoredSentence> scores) {
  ScoreSummary s;
  s.count = scores.size();
  if (scores.empty()) return s;
  std::vector<double> v;
  for (const auto& x : scores) v.push_back(x.divergence);
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  s.q33 = quantile(v, 1.0 / 3.0);
  s.median = quantile(v, 0.5);
  s.q67 = quantile(v, 2.0 / 3.0);
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return s;
}

}  // namespace mcl::scoring
