#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "unlearn/common.hpp"

namespace unlearn::optim {

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// One decoupled-weight-decay update: bias-corrected moments drive the step,
// decay is applied to the parameters only.
void adamw_step(std::span<double> params, std::span<const double> grads, std::span<double> m, std::span<double> v,
                const AdamWConfig& cfg, int64_t step_index);

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  // Parameter slots are positional; sizes must stay stable across steps.
  void step(std::span<std::span<double>> params, std::span<const std::vector<double>> grads);
  int64_t step_index() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t step_ = 0;
};

}  // namespace unlearn::optim
