#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcl/param_vector.hpp"

namespace mcl::nn {

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(std::string_view s);

/// Raised when a gradient entry is NaN or infinite.
class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& tensor)
      : std::runtime_error("non-finite gradient in tensor '" + tensor + "'"), tensor_(tensor) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  static OptimizerState sgd(double lr) { return make(OptimizerKind::Sgd, lr); }
  static OptimizerState adam(double lr) { return make(OptimizerKind::Adam, lr); }
  static OptimizerState make(OptimizerKind kind, double lr) {
    OptimizerState s;
    s.kind = kind;
    s.lr = lr;
    return s;
  }
};

/// Applies one update using params.grads(). Adam moments are allocated on the
/// first call. The step counter is incremented for both kinds.
void optimizer_step(ParamVector& params, OptimizerState& state);

/// Inverse-square-root schedule with linear warm-up:
/// factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double noam_lr(int d_model, std::int64_t step, std::int64_t warmup, double factor = 1.0);

/// Scales the gradient buffer so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<double> grads, double max_norm);

}  // namespace mcl::nn
