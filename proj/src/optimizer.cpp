#include "unlearn/optimizer.hpp"

#include <cmath>

namespace unlearn::optim {

void adamw_step(std::span<double> params, std::span<const double> grads, std::span<double> m, std::span<double> v,
                const AdamWConfig& cfg, int64_t step_index) {
  if (params.size() != grads.size() || params.size() != m.size() || params.size() != v.size()) {
    throw ContractError("adamw_step requires params, grads and both moment buffers to share a size");
  }
  if (step_index < 1) throw ContractError("adamw_step step_index starts at 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
  for (size_t i = 0; i < params.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    params[i] -= cfg.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * params[i]);
  }
}

void AdamW::step(std::span<std::span<double>> params, std::span<const std::vector<double>> grads) {
  if (params.size() != grads.size()) throw ContractError("AdamW::step parameter/gradient count mismatch");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].size(), 0.0);
      v_[i].assign(params[i].size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("AdamW::step parameter count changed between steps");
  ++step_;
  for (size_t i = 0; i < params.size(); ++i) {
    adamw_step(params[i], grads[i], m_[i], v_[i], cfg_, step_);
  }
}

}  // namespace unlearn::optim
