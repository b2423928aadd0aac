#pragma once

#include <span>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/model.hpp"

namespace unlearn::losses {

struct LossConfig {
  double beta = 0.5;   // NPO temperature, > 0
  double gamma = 1.0;  // retain-loss weight, >= 0
  double delta = 0.5;  // KL weight, >= 0
};

struct LossBreakdown {
  double l_npo = 0.0;
  double l_rt = 0.0;
  double k_rt = 0.0;
  double combined = 0.0;
  int64_t n_forget_tokens = 0;
  int64_t n_retain_tokens = 0;
};

struct GradVec {
  std::string name;
  std::vector<double> values;
};

struct BatchResult {
  LossBreakdown breakdown;
  std::vector<GradVec> grads;  // LoRA parameters only; empty unless requested
  // mean of the per-token NPO gradient weight 2*sigma(beta*(log pi - log ref))
  double mean_npo_weight = 0.0;
};

using Batch = std::span<const corpus::Encoded>;

// Two passes per batch: the LoRA-enabled pass records gradients for every
// term, the LoRA-disabled pass supplies the reference log-probs without any
// gradient bookkeeping.
BatchResult combined_loss(const model::ModelState& state, Batch forget, Batch retain, const LossConfig& cfg,
                          bool with_grads);

// Individual objective terms, averaged per completion token over the batch.
double ga_loss(const model::ModelState& state, Batch forget);
double npo_loss(const model::ModelState& state, Batch forget, double beta);
double retain_loss(const model::ModelState& state, Batch retain);
double kl_retain(const model::ModelState& state, Batch retain);

// Gradient views of the two unlearning objectives w.r.t. the LoRA parameters.
struct LossGrads {
  double value = 0.0;
  std::vector<GradVec> grads;
};
LossGrads ga_loss_with_grads(const model::ModelState& state, Batch forget);
LossGrads npo_loss_with_grads(const model::ModelState& state, Batch forget, double beta);

}  // namespace unlearn::losses
