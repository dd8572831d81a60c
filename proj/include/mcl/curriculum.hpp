#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mcl/corpus.hpp"
#include "mcl/scoring.hpp"

namespace mcl::curriculum {

class CurriculumError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Task {
  int task_id = 0;
  std::string domain;
  std::vector<SentencePair> support;
  std::vector<SentencePair> query;
  double mean_divergence = 0.0;  // over support and query members
};

/// Ascending by divergence, ties by pair id.
std::vector<scoring::ScoredSentence> sort_by_divergence(
    std::vector<scoring::ScoredSentence> scored);

/// Quantile window for `step` of `meta_steps`: lo = (1 - width)(step - 1)/(M - 1),
/// hi = lo + width. A single step sees the whole range.
std::pair<double, double> window(int meta_steps, int step, double width = 0.5);

/// One seen domain's meta-train pool sorted by ascending divergence.
struct DomainPool {
  std::string domain;
  std::vector<SentencePair> pairs;
  std::unordered_map<int, double> divergence;  // by pair id
};

/// Builds a sorted pool; every pair needs a score.
DomainPool make_pool(const std::string& domain, std::span<const SentencePair> pairs,
                     std::span<const scoring::ScoredSentence> scores);

struct ScheduleConfig {
  int meta_steps = 5;
  int tasks_per_step = 10;
  double width = 0.5;
  std::size_t support_tokens = kDefaultSupportTokens;
  std::size_t query_tokens = kDefaultQueryTokens;

  void validate() const;
};

class CurriculumSchedule {
 public:
  CurriculumSchedule(ScheduleConfig config, std::vector<DomainPool> pools);

  const ScheduleConfig& config() const { return config_; }
  const std::vector<DomainPool>& pools() const { return pools_; }

  std::pair<double, double> window(int step) const;

  /// Index range [begin, end) of the window for `step` in a sorted pool of n.
  std::pair<std::size_t, std::size_t> slice(int step, std::size_t n) const;

 private:
  ScheduleConfig config_;
  std::vector<DomainPool> pools_;
};

/// I tasks for `step`, assigned to domains round-robin, each drawn uniformly
/// from its domain's window slice with sub-seed derive_seed(seed, {step, task}).
std::vector<Task> assemble_tasks(const CurriculumSchedule& schedule, int step,
                                 std::uint64_t seed);

/// Baseline tasks: full window, drawn once and reused for every step.
std::vector<Task> uniform_tasks(const CurriculumSchedule& schedule, std::uint64_t seed);

/// Source of tasks for each meta-step.
class TaskSampler {
 public:
  virtual ~TaskSampler() = default;
  virtual std::vector<Task> tasks(int step) const = 0;
  virtual std::string name() const = 0;
};

class OrderedSampler : public TaskSampler {
 public:
  OrderedSampler(const CurriculumSchedule& schedule, std::uint64_t seed)
      : schedule_(schedule), seed_(seed) {}
  std::vector<Task> tasks(int step) const override { return assemble_tasks(schedule_, step, seed_); }
  std::string name() const override { return "curriculum"; }

 private:
  const CurriculumSchedule& schedule_;
  std::uint64_t seed_;
};

class UniformSampler : public TaskSampler {
 public:
  UniformSampler(const CurriculumSchedule& schedule, std::uint64_t seed)
      : tasks_(uniform_tasks(schedule, seed)) {}
  std::vector<Task> tasks(int) const override { return tasks_; }
  std::string name() const override { return "uniform"; }

 private:
  std::vector<Task> tasks_;
};

double mean_task_divergence(std::span<const Task> tasks);

/// {"step", "tasks": [{"task_id", "domain", "support", "query", "mean_divergence"}]}
nlohmann::json task_manifest(int step, std::span<const Task> tasks);

}  // namespace mcl::curriculum
