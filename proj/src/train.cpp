#include "mcl/train.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "mcl/rng.hpp"

namespace mcl::nn {

double dataset_loss(const ParamVector& params, const ModelConfig& config, ModelKind kind,
                    std::span<const Example> examples, std::size_t chunk) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const auto part = examples.subspan(start, std::min(chunk, examples.size() - start));
    const Batch batch = make_batch(part, kind);
    const LossResult r = forward_loss(params, config, batch, kind);
    total += r.loss * static_cast<double>(r.tokens);
    tokens += r.tokens;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

std::int64_t planned_steps(std::size_t n, const FitConfig& fc) {
  if (n == 0) return 0;
  const auto per_epoch = static_cast<std::int64_t>((n + fc.batch_sentences - 1) / fc.batch_sentences);
  std::int64_t steps = per_epoch * fc.epochs;
  if (fc.max_steps >= 0) steps = std::min(steps, fc.max_steps);
  return steps;
}

FitHistory fit(ParamVector& params, const ModelConfig& config, ModelKind kind,
               std::span<const Example> train, std::span<const Example> valid,
               const FitConfig& fc) {
  if (fc.batch_sentences == 0) throw std::invalid_argument("batch_sentences must be > 0");
  FitHistory history;
  if (train.empty() || fc.max_steps == 0) return history;

  auto opt = OptimizerState::make(fc.optimizer, fc.lr);
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_values;
  int bad_checks = 0;

  // Returns true when training should stop.
  auto check = [&]() {
    if (valid.empty()) return false;
    const double loss = dataset_loss(params, config, kind, valid);
    history.valid_loss.push_back(loss);
    if (fc.patience <= 0) return false;
    if (loss < best) {
      best = loss;
      best_values.assign(params.values().begin(), params.values().end());
      bad_checks = 0;
      return false;
    }
    return ++bad_checks >= fc.patience;
  };

  std::vector<std::size_t> order(train.size());
  bool stop = false;
  for (int epoch = 0; epoch < fc.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (fc.shuffle) {
      Rng rng(derive_seed(fc.seed, {static_cast<std::uint64_t>(epoch)}));
      rng.shuffle(order);
    }
    for (std::size_t start = 0; start < order.size() && !stop; start += fc.batch_sentences) {
      std::vector<Example> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + fc.batch_sentences); ++i) {
        chunk.push_back(train[order[i]]);
      }
      const Batch batch = make_batch(chunk, kind);
      const DropoutContext drop{derive_seed(fc.seed, {0xd0ULL, static_cast<std::uint64_t>(history.steps)})};
      const double loss = backward(params, config, batch, kind, &drop);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("non-finite training loss at step " + std::to_string(history.steps));
      }
      opt.lr = fc.noam ? noam_lr(config.d_model, history.steps + 1, fc.warmup, fc.lr_factor) : fc.lr;
      optimizer_step(params, opt);
      history.train_loss.push_back(loss);
      ++history.steps;
      if (fc.eval_every > 0 && history.steps % fc.eval_every == 0) stop = check();
      if (fc.max_steps >= 0 && history.steps >= fc.max_steps) break;
    }
    if (fc.eval_every == 0 && !stop) stop = check();
    if (fc.max_steps >= 0 && history.steps >= fc.max_steps) break;
  }
  history.early_stopped = stop;
  if (fc.patience > 0 && !best_values.empty()) {
    const double final_loss = history.valid_loss.empty() ? best : history.valid_loss.back();
    if (final_loss > best) params.assign_values(best_values);
  }
  return history;
}

}  // namespace mcl::nn
