#include "mcl/optim.hpp"

#include <algorithm>
#include <cmath>

namespace mcl::nn {

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_kind_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

void optimizer_step(ParamVector& params, OptimizerState& state) {
  auto values = params.values();
  auto grads = params.grads();
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) throw NonFiniteGradient(params.name_at(i));
  }
  ++state.step;
  if (state.kind == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= state.lr * grads[i];
    return;
  }
  if (state.m.size() != values.size()) {
    state.m.assign(values.size(), 0.0);
    state.v.assign(values.size(), 0.0);
  }
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    values[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

double noam_lr(int d_model, std::int64_t step, std::int64_t warmup, double factor) {
  if (step < 1) step = 1;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(std::max<std::int64_t>(warmup, 1));
  return factor * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

double clip_grad_norm(std::span<double> grads, double max_norm) {
  const double norm = l2_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& g : grads) g *= scale;
  }
  return norm;
}

}  // namespace mcl::nn
