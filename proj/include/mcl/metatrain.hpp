#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcl/curriculum.hpp"
#include "mcl/model.hpp"
#include "mcl/optim.hpp"
#include "mcl/train.hpp"

namespace mcl::meta {

class MetaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes the gradient of some loss at `params` into params.grads() and
/// returns the loss.
using GradFn = std::function<double(nn::ParamVector& params)>;

struct TaskObjective {
  GradFn support;
  GradFn query;
};

using ObjectiveFactory = std::function<TaskObjective(const curriculum::Task&)>;

struct MetaConfig {
  int meta_steps = 5;
  int tasks_per_step = 10;
  double inner_lr = 1e-3;                                   // alpha
  int inner_steps = 1;
  nn::OptimizerKind inner_optimizer = nn::OptimizerKind::Sgd;
  nn::OptimizerKind outer_optimizer = nn::OptimizerKind::Adam;
  double outer_lr = 1e-5;                                   // beta
  double clip_norm = 5.0;                                   // <= 0 disables clipping

  void validate() const;
  nlohmann::json to_json() const;
  static MetaConfig from_json(const nlohmann::json& j);
};

struct FinetuneConfig {
  int epochs = 20;
  double lr = 5e-5;
  std::size_t batch_sentences = 16;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

struct TaskRecord {
  int step = 0;
  int task_id = 0;
  std::string domain;
  double support_loss_first = 0.0;  // before the first inner step
  double support_loss_last = 0.0;   // before the last inner step
  double query_loss = 0.0;          // at the adapted parameters
  double grad_norm = 0.0;           // of this task's outer gradient
  double mean_divergence = 0.0;
};

struct StepRecord {
  int step = 0;
  double meta_grad_norm = 0.0;  // before clipping
  bool clipped = false;
  double mean_query_loss = 0.0;
  double mean_divergence = 0.0;
  double seconds = 0.0;         // wall time; kept out of the deterministic log
};

struct TrainLog {
  std::vector<TaskRecord> tasks;
  std::vector<StepRecord> steps;

  /// Deterministic per-task log (no timings).
  void write_tsv(const std::filesystem::path& path) const;
  /// Per-step summary including wall time.
  void write_steps_tsv(const std::filesystem::path& path) const;
};

struct InnerResult {
  nn::ParamVector adapted;
  std::vector<double> support_losses;  // one per inner step
};

/// theta' = theta - alpha * grad, repeated `inner_steps` times on a copy.
InnerResult inner_adapt(const nn::ParamVector& theta, const GradFn& support, double alpha,
                        int inner_steps = 1,
                        nn::OptimizerKind kind = nn::OptimizerKind::Sgd);

struct OuterGrad {
  std::vector<double> grad;
  double query_loss = 0.0;
};

/// First-order meta-gradient: the query-loss gradient at the adapted parameters.
OuterGrad fomaml_outer_grad(nn::ParamVector& adapted, const GradFn& query);

/// Called after every meta-step with the updated parameters.
using StepCallback = std::function<void(int step, const nn::ParamVector& params,
                                        const std::vector<curriculum::Task>& tasks)>;

/// FoMAML: per step, adapt on each task's support, sum the query gradients at
/// the adapted parameters in task order, clip, and take one outer step.
TrainLog meta_train(nn::ParamVector& params, const curriculum::TaskSampler& sampler,
                    const ObjectiveFactory& objective, const MetaConfig& config,
                    const StepCallback& on_step = nullptr);

/// NMT objective over a task's support and query sets as single batches.
ObjectiveFactory translation_objective(const nn::ModelConfig& model, const Vocabulary& vocab);

std::vector<nn::Example> to_examples(std::span<const SentencePair> pairs, const Vocabulary& vocab);

/// General-domain pre-training with the warm-up schedule.
nn::FitHistory vanilla_train(nn::ParamVector& params, const nn::ModelConfig& model,
                             std::span<const nn::Example> train,
                             std::span<const nn::Example> valid, const nn::FitConfig& fit);

/// Fixed-budget adaptation: `epochs` passes of Adam over the support set.
nn::FitHistory fine_tune(nn::ParamVector& params, const nn::ModelConfig& model,
                         std::span<const nn::Example> support, const FinetuneConfig& config);

}  // namespace mcl::meta
