#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "mcl/model.hpp"
#include "mcl/optim.hpp"

namespace mcl::nn {

/// Thrown when the training loss becomes NaN or infinite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FitConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;               // constant rate unless `noam` is set
  bool noam = false;              // inverse-square-root schedule with warm-up
  std::int64_t warmup = 200;
  double lr_factor = 1.0;         // multiplier on the noam schedule
  int epochs = 1;
  std::int64_t max_steps = -1;    // < 0: no step limit
  std::size_t batch_sentences = 32;
  std::int64_t eval_every = 0;    // 0: evaluate at the end of each epoch
  int patience = 0;               // > 0: stop after this many non-improving checks
  bool shuffle = true;
  std::uint64_t seed = 0;
};

struct FitHistory {
  std::vector<double> train_loss;  // one entry per optimizer step
  std::vector<double> valid_loss;  // one entry per check
  std::int64_t steps = 0;
  bool early_stopped = false;
};

/// Token-mean loss over `examples`, evaluated in chunks.
double dataset_loss(const ParamVector& params, const ModelConfig& config, ModelKind kind,
                    std::span<const Example> examples, std::size_t chunk = 64);

/// Mini-batch training loop. With patience > 0 the parameters of the best
/// validation check are restored on exit.
FitHistory fit(ParamVector& params, const ModelConfig& config, ModelKind kind,
               std::span<const Example> train, std::span<const Example> valid,
               const FitConfig& fit_config);

/// Number of optimizer steps `fit` takes for `n` examples (ignoring early stop).
std::int64_t planned_steps(std::size_t n, const FitConfig& fit_config);

}  // namespace mcl::nn
