#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcl/corpus.hpp"
#include "mcl/model.hpp"
#include "mcl/train.hpp"

namespace mcl::scoring {

class ScoringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Anything that assigns log-probabilities to a sentence followed by EOS,
/// conditioned on BOS.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  /// One natural-log probability per token of `sentence` plus one for EOS.
  virtual std::vector<double> log_probs(std::span<const int> sentence) const = 0;

  /// Identifies the vocabulary the ids refer to.
  virtual std::uint64_t vocab_fingerprint() const = 0;
};

/// Trained decoder-only transformer LM.
class NeuralLm : public LanguageModel {
 public:
  NeuralLm(nn::ParamVector params, nn::ModelConfig config, std::uint64_t vocab_fingerprint)
      : params_(std::move(params)), config_(config), fingerprint_(vocab_fingerprint) {}

  std::vector<double> log_probs(std::span<const int> sentence) const override;
  std::uint64_t vocab_fingerprint() const override { return fingerprint_; }

  const nn::ParamVector& params() const { return params_; }
  nn::ParamVector& params() { return params_; }
  const nn::ModelConfig& config() const { return config_; }

 private:
  nn::ParamVector params_;
  nn::ModelConfig config_;
  std::uint64_t fingerprint_;
};

struct LmTrainConfig {
  nn::FitConfig fit;              // patience defaults to 3 below
  double valid_fraction = 0.1;    // held-out share used for early stopping
  std::size_t max_valid = 400;

  LmTrainConfig() { fit.patience = 3; }
};

struct TrainedLm {
  NeuralLm lm;
  nn::FitHistory history;
};

/// Trains a language model on `sentences` (ids, no EOS). A seeded held-out
/// slice drives early stopping. With `init` the model starts from those
/// parameters, which is how domain LMs are fine-tuned from the general LM.
TrainedLm train_lm(std::span<const TokenIds> sentences, const nn::ModelConfig& config,
                   const LmTrainConfig& train_config, std::uint64_t vocab_fingerprint,
                   const nn::ParamVector* init = nullptr);

/// H(S) = -(sum of log P) / (|S| + 1), in nats. Throws on an empty sentence.
double token_avg_cross_entropy(const LanguageModel& lm, std::span<const int> sentence);

/// H_domain(S) - H_general(S), negated when `flip_sign` is set.
double divergence(const LanguageModel& general, const LanguageModel& domain,
                  std::span<const int> sentence, bool flip_sign = false);

struct ScoredSentence {
  int pair_id = 0;
  std::string domain;
  double h_general = 0.0;
  double h_domain = 0.0;
  double divergence = 0.0;
};

using DomainScores = std::map<std::string, std::vector<ScoredSentence>>;

/// Scores the source side of every pair of every corpus.
DomainScores score_corpus(const LanguageModel& general,
                          const std::map<std::string, const LanguageModel*>& domain_lms,
                          std::span<const DomainCorpus> corpora, const Vocabulary& vocab,
                          bool flip_sign = false);

std::vector<ScoredSentence> score_pairs(const LanguageModel& general, const LanguageModel& domain,
                                        std::span<const SentencePair> pairs,
                                        const Vocabulary& vocab, bool flip_sign = false);

/// TSV with header `pair_id h_general h_domain divergence`, 17 significant digits.
void write_scores(const std::filesystem::path& path, std::span<const ScoredSentence> scores);
std::vector<ScoredSentence> read_scores(const std::filesystem::path& path,
                                        const std::string& domain);

/// Linear-interpolated quantile of unsorted values, q in [0, 1].
double quantile(std::vector<double> values, double q);

struct ScoreSummary {
  std::size_t count = 0;
  double min = 0.0, q33 = 0.0, median = 0.0, q67 = 0.0, max = 0.0, mean = 0.0;

  nlohmann::json to_json() const;
};

ScoreSummary summarize(std::span<const ScoredSentence> scores);

}  // namespace mcl::scoring
