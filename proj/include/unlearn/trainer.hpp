#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/evaluator.hpp"
#include "unlearn/losses.hpp"
#include "unlearn/model.hpp"
#include "unlearn/optimizer.hpp"

namespace unlearn::trainer {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 4;
  int epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  uint64_t seed = 1;
  int eval_every = 0;  // 0 = use the explicit schedule only

  optim::AdamWConfig adamw() const { return {learning_rate, beta1, beta2, eps, weight_decay}; }
};

struct EpochRecord {
  int epoch = 0;
  std::optional<double> l_npo;
  std::optional<double> l_rt;
  std::optional<double> k_rt;
  double combined = 0.0;
  std::optional<double> mean_npo_weight;
  std::optional<double> accuracy;  // memorization stage only
  int64_t n_forget_tokens = 0;
  int64_t n_retain_tokens = 0;
  double wall_clock_s = 0.0;
  std::optional<evaluator::ScoreReport> scores;
};

struct RunLog {
  uint64_t seed = 0;
  std::string config_hash;
  std::string version;
  std::vector<EpochRecord> records;
};

// Line-delimited serialization: one header record, then one record per epoch
// with the fields epoch, l_npo, l_rt, k_rt, combined and optional scores.
std::string runlog_to_jsonl(const RunLog& log);
RunLog runlog_from_jsonl(const std::string& text);

struct MemorizeOptions {
  TrainConfig train{.learning_rate = 3e-4, .epochs = 400};
  double target_accuracy = 0.999;  // stop once teacher-forced accuracy reaches this
  int min_epochs = 150;            // keep consolidating this long even if accuracy is there
  double fail_below = 0.9;         // error out if max epochs end under this
  // Caps the memorized next-token probabilities so the target model stays
  // unlearnable; the unlearning objective itself never smooths.
  double label_smoothing = 0.05;
  bool verbose = false;
};

struct MemorizeResult {
  model::ModelState state;
  RunLog log;
  double final_accuracy = 0.0;
};

// Fine-tunes the backbone on forget+retain until the corpus is memorized;
// returns the target model with LoRA stripped.
MemorizeResult memorize(const model::ModelState& fresh, const corpus::Corpus& corpus, const corpus::Tokenizer& tok,
                        const MemorizeOptions& options);

struct EvalHooks {
  std::vector<int> eval_epochs;
  std::function<evaluator::ScoreReport(const model::ModelState&)> evaluate;
  std::function<void(int, const model::ModelState&)> on_checkpoint;
  bool verbose = false;
};

struct UnlearnResult {
  model::ModelState state;
  RunLog log;
};

// NPO unlearning over the LoRA parameters. One epoch is one pass over the
// forget set; retain batches are drawn with replacement to pair each step.
UnlearnResult unlearn(const model::ModelState& start, const corpus::Corpus& corpus, const corpus::Tokenizer& tok,
                      const losses::LossConfig& loss_cfg, const TrainConfig& train_cfg, const EvalHooks& hooks = {});

struct SweepCell {
  double gamma = 1.0;
  double delta = 0.5;
  int rank = 5;
};

struct Stat {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single run
};

struct SweepRow {
  SweepCell cell;
  bool failed = false;
  std::string error;
  int n_runs = 0;
  Stat task, mia_raw, mia_scaled, utility, final_score;
  std::vector<evaluator::ScoreReport> reports;  // one per seed, in seed order
};

// Per cell: attach fresh LoRA per seed, unlearn, score the final state.
// A failing cell is marked and the sweep continues.
std::vector<SweepRow> sweep(const model::ModelState& memorized, const corpus::Corpus& corpus,
                            const corpus::Tokenizer& tok, const std::vector<SweepCell>& grid,
                            const std::vector<uint64_t>& seeds, const losses::LossConfig& base_loss,
                            const TrainConfig& base_train, double lora_alpha, const std::string& lora_targets,
                            int jobs = 1);

std::string sweep_to_csv(const std::vector<SweepRow>& rows, const std::map<std::string, std::string>& meta = {});

// Teacher-forced completion-token accuracy over a sample set.
double exact_match_accuracy(const model::ModelState& state, std::span<const corpus::Encoded> samples, bool use_lora);

}  // namespace unlearn::trainer
