#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcl/corpus.hpp"
#include "mcl/curriculum.hpp"
#include "mcl/eval.hpp"
#include "mcl/metatrain.hpp"
#include "mcl/model.hpp"
#include "mcl/scoring.hpp"
#include "mcl/synthetic.hpp"
#include "mcl/train.hpp"

namespace mcl::pipeline {

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything an experiment depends on. Model vocab sizes of 0 are filled in
/// from the built vocabulary.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string corpus_dir;  // <domain>.src/.tgt files; empty: generate synthetic corpora
  synth::SyntheticSpec synthetic;
  std::string general_domain = "general";
  std::vector<std::string> seen{"emea", "globalvoices", "jrc", "kde", "news"};
  std::vector<std::string> unseen{"covid", "bible", "books", "ecb", "ted"};

  std::size_t max_len = kDefaultMaxLen;  // training and validation data only
  int min_count = 1;
  double valid_fraction = 0.05;          // of the general corpus, for pre-training
  std::size_t max_valid = 500;
  std::size_t pool_tokens = 0;           // per seen domain meta-train pool; 0 = rest of corpus

  nn::ModelConfig nmt;
  nn::FitConfig pretrain;
  nn::ModelConfig lm;
  scoring::LmTrainConfig general_lm;
  scoring::LmTrainConfig domain_lm;
  bool flip_sign = false;

  /// Budgets here apply to meta-training tasks and to the meta-test sets alike.
  curriculum::ScheduleConfig schedule;
  meta::MetaConfig meta;  // meta_steps and tasks_per_step follow `schedule`
  meta::FinetuneConfig finetune;
  int beam = 5;
  bool step_checkpoints = true;

  RunConfig();

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing fields keep their defaults.
  static RunConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
};

RunConfig load_config(const std::filesystem::path& path);

/// Canonical system names, in report order.
inline const std::vector<std::string>& systems() {
  static const std::vector<std::string> names{eval::kVanilla, eval::kMetaMt,
                                              eval::kMetaCurriculum};
  return names;
}

/// Sampler behind a meta-trained system: "uniform" or "curriculum".
std::string sampler_for(const std::string& system);
std::string system_for(const std::string& sampler);

/// Holds the run-directory lock for its lifetime.
class RunDir {
 public:
  RunDir(std::filesystem::path root, const RunConfig& config);
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& relative) const { return root_ / relative; }

  bool stage_done(const std::string& stage) const;
  void mark_done(const std::string& stage) const;
  void clear(const std::string& stage) const;
  /// Throws naming the artifact and the command producing it when `relative`
  /// is absent or `stage` is not done for the current config.
  void require(const std::string& relative, const std::string& stage,
               const std::string& producer) const;

 private:
  std::filesystem::path root_;
  std::uint64_t config_hash_;
  bool locked_ = false;
};

using Logger = std::function<void(const std::string&)>;

struct StageOptions {
  bool force = false;
  Logger log;
};

/// Each stage skips itself when its marker matches the config, unless forced.
/// Returns true when the stage ran.
bool stage_gen(const RunConfig& config, RunDir& dir, const StageOptions& opt);
bool stage_pretrain(const RunConfig& config, RunDir& dir, const StageOptions& opt);
bool stage_train_lm(const RunConfig& config, RunDir& dir, const StageOptions& opt);
bool stage_score(const RunConfig& config, RunDir& dir, const StageOptions& opt);
bool stage_meta_train(const RunConfig& config, RunDir& dir, const std::string& sampler,
                      const StageOptions& opt);
bool stage_finetune(const RunConfig& config, RunDir& dir, const std::string& system,
                    const StageOptions& opt);
bool stage_evaluate(const RunConfig& config, RunDir& dir, const std::string& system,
                    const StageOptions& opt);
bool stage_report(const RunConfig& config, RunDir& dir, const StageOptions& opt);

/// All stages in order for every system.
void run_all(const RunConfig& config, RunDir& dir, const StageOptions& opt);

/// Loaded split data for one run.
struct RunData {
  Vocabulary vocab;
  SplitManifest manifest;
  std::map<std::string, DomainCorpus> corpora;  // filtered general corpus, raw domains
  std::vector<SentencePair> general_train;
  std::vector<SentencePair> general_valid;

  std::vector<SentencePair> support(const std::string& domain) const;
  std::vector<SentencePair> query(const std::string& domain) const;
  std::vector<SentencePair> pool(const std::string& domain) const;
};

RunData load_run_data(const RunDir& dir);

eval::EvalReport load_eval_report(const std::filesystem::path& run_dir, const std::string& system);

/// Per-system averages over several run directories, rendered like a single
/// run's report. Writes report.tsv and report.md into `out_dir`.
eval::ComparisonTable aggregate(std::span<const std::filesystem::path> run_dirs,
                                const std::filesystem::path& out_dir);

/// Writes `text` to `path`, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace mcl::pipeline
