#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/model.hpp"

namespace unlearn::evaluator {

struct ScoreReport {
  std::map<std::string, double> rouge_subscores;  // 12 keys: <split>.<doc_type>.<task_type>
  double task_score = 0.0;
  double mia_raw = 0.0;
  double mia_scaled = 0.0;
  double utility_score = 0.0;
  double final_score = 0.0;
};

// LCS-F1 over whitespace tokens; both empty -> 1, no common subsequence -> 0.
double rouge_l(const std::string& candidate, const std::string& reference);

// Probability that a member sample shows lower loss than a nonmember one,
// ties counted half. 0.5 means the attack cannot tell the sets apart.
double mia_auc(std::span<const double> member_losses, std::span<const double> nonmember_losses);

// S' = 1 - 2*|S - 0.5|: penalizes both under- and over-unlearning.
double scale_mia(double s);

// Harmonic mean with the limit convention that any zero entry yields zero.
double harmonic_mean(std::span<const double> values);

double final_score(double task, double mia_scaled, double utility);

std::pair<double, std::map<std::string, double>> task_score(const model::ModelState& state,
                                                            const corpus::Corpus& corpus,
                                                            const corpus::Tokenizer& tok);
double mia_score(const model::ModelState& state, const corpus::Corpus& corpus, const corpus::Tokenizer& tok);
double utility_score(const model::ModelState& state, const corpus::Corpus& corpus, const corpus::Tokenizer& tok);

ScoreReport evaluate(const model::ModelState& state, const corpus::Corpus& corpus, const corpus::Tokenizer& tok);

// Mean completion-token NLL of one encoded sample under the given pass.
double sample_nll(const model::ModelState& state, const corpus::Encoded& enc, bool use_lora);
// Greedy-decoded continuation text for a sample's input.
std::string decode_output(const model::ModelState& state, const corpus::Sample& sample, const corpus::Tokenizer& tok);

std::string report_to_json(const ScoreReport& report, const std::map<std::string, std::string>& meta = {});
ScoreReport report_from_json(const std::string& text);

}  // namespace unlearn::evaluator
