#include "unlearn/evaluator.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"

namespace unlearn::evaluator {

namespace {

using corpus::DocType;
using corpus::Sample;
using corpus::Split;
using corpus::TaskType;
using corpus::Tokenizer;

std::vector<std::string> whitespace_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

std::string cell_key(Split s, DocType d, TaskType t) {
  std::ostringstream os;
  os << corpus::split_name(s) << "." << corpus::doc_type_name(d) << "." << corpus::task_type_name(t);
  return os.str();
}

}  // namespace

double rouge_l(const std::string& candidate, const std::string& reference) {
  const std::vector<std::string> c = whitespace_tokens(candidate);
  const std::vector<std::string> r = whitespace_tokens(reference);
  if (c.empty() && r.empty()) return 1.0;
  const int lcs = lcs_length(c, r);
  if (lcs == 0) return 0.0;
  // F1 = 2PR/(P+R) with P = lcs/|c|, R = lcs/|r| simplifies to this quotient.
  return 2.0 * static_cast<double>(lcs) / static_cast<double>(c.size() + r.size());
}

double mia_auc(std::span<const double> member_losses, std::span<const double> nonmember_losses) {
  if (member_losses.empty() || nonmember_losses.empty()) {
    throw ScoringError("mia_auc needs nonempty member and nonmember loss sets");
  }
  double won = 0.0;
  for (double m : member_losses) {
    for (double n : nonmember_losses) {
      if (m < n) won += 1.0;
      else if (m == n) won += 0.5;
    }
  }
  return won / (static_cast<double>(member_losses.size()) * static_cast<double>(nonmember_losses.size()));
}

double scale_mia(double s) {
  if (s < 0.0 || s > 1.0) throw ContractError("mia score must be in [0, 1], got " + format_double(s));
  return 1.0 - 2.0 * std::abs(s - 0.5);
}

double harmonic_mean(std::span<const double> values) {
  if (values.empty()) throw ContractError("harmonic_mean of an empty list");
  double denom = 0.0;
  for (double v : values) {
    if (v < 0.0) throw ContractError("harmonic_mean needs nonnegative values");
    if (v == 0.0) return 0.0;
    denom += 1.0 / v;
  }
  return static_cast<double>(values.size()) / denom;
}

double final_score(double task, double mia_scaled, double utility) {
  for (double v : {task, mia_scaled, utility}) {
    if (v < 0.0 || v > 1.0) throw ContractError("final_score components must be in [0, 1]");
  }
  return (task + mia_scaled + utility) / 3.0;
}

double sample_nll(const model::ModelState& state, const corpus::Encoded& enc, bool use_lora) {
  const diff::Tensor lp = model::log_probs(state, enc.tokens, use_lora);
  double sum = 0.0;
  int64_t n = 0;
  for (size_t t = 0; t < enc.targets.size(); ++t) {
    if (!enc.mask[t]) continue;
    sum -= lp.at(static_cast<int>(t), enc.targets[t]);
    ++n;
  }
  if (n == 0) throw ScoringError("sample " + enc.sample->id + " has no completion tokens");
  return sum / static_cast<double>(n);
}

std::string decode_output(const model::ModelState& state, const Sample& sample, const Tokenizer& tok) {
  std::vector<int> prompt;
  const std::vector<int> input_ids = tok.tokenize(sample.input);
  prompt.reserve(input_ids.size() + 2);
  prompt.push_back(Tokenizer::kBos);
  prompt.insert(prompt.end(), input_ids.begin(), input_ids.end());
  prompt.push_back(Tokenizer::kSep);
  const std::vector<int> generated =
      model::greedy_complete(state, std::move(prompt), state.config.context_len, Tokenizer::kEos, /*use_lora=*/true);
  return tok.detokenize(generated);
}

std::pair<double, std::map<std::string, double>> task_score(const model::ModelState& state,
                                                            const corpus::Corpus& corpus,
                                                            const Tokenizer& tok) {
  std::map<std::string, double> subscores;
  std::vector<double> merged;
  for (Split split : {Split::kForget, Split::kRetain}) {
    for (DocType d : {DocType::kCreative, DocType::kBiography, DocType::kWeb}) {
      for (TaskType t : {TaskType::kCompletion, TaskType::kQa}) {
        const std::vector<const Sample*> cell = corpus.cell(split, d, t);
        if (cell.empty()) throw ScoringError("empty evaluation cell " + cell_key(split, d, t));
        double sum = 0.0;
        for (const Sample* s : cell) sum += rouge_l(decode_output(state, *s, tok), s->output);
        const double mean = sum / static_cast<double>(cell.size());
        subscores[cell_key(split, d, t)] = mean;
        merged.push_back(split == Split::kForget ? 1.0 - mean : mean);
      }
    }
  }
  return {harmonic_mean(merged), std::move(subscores)};
}

double mia_score(const model::ModelState& state, const corpus::Corpus& corpus, const Tokenizer& tok) {
  auto losses_of = [&](Split split) {
    std::vector<double> losses;
    for (const Sample* s : corpus.split(split)) {
      losses.push_back(sample_nll(state, corpus::encode(*s, tok, state.config.context_len), /*use_lora=*/true));
    }
    return losses;
  };
  const std::vector<double> member = losses_of(Split::kForget);
  const std::vector<double> nonmember = losses_of(Split::kHoldout);
  return mia_auc(member, nonmember);
}

double utility_score(const model::ModelState& state, const corpus::Corpus& corpus, const Tokenizer& tok) {
  const std::vector<const Sample*> items = corpus.split(Split::kUtility);
  if (items.empty()) throw ScoringError("utility split is empty");
  int64_t hits = 0;
  for (const Sample* s : items) {
    if (decode_output(state, *s, tok) == s->output) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

ScoreReport evaluate(const model::ModelState& state, const corpus::Corpus& corpus, const Tokenizer& tok) {
  ScoreReport r;
  auto [task, subscores] = task_score(state, corpus, tok);
  r.task_score = task;
  r.rouge_subscores = std::move(subscores);
  r.mia_raw = mia_score(state, corpus, tok);
  r.mia_scaled = scale_mia(r.mia_raw);
  r.utility_score = utility_score(state, corpus, tok);
  r.final_score = final_score(r.task_score, r.mia_scaled, r.utility_score);
  return r;
}

std::string report_to_json(const ScoreReport& report, const std::map<std::string, std::string>& meta) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json sub = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.rouge_subscores) sub[k] = v;
  j["rouge_subscores"] = sub;
  j["task_score"] = report.task_score;
  j["mia_raw"] = report.mia_raw;
  j["mia_scaled"] = report.mia_scaled;
  j["utility_score"] = report.utility_score;
  j["final_score"] = report.final_score;
  if (!meta.empty()) {
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : meta) m[k] = v;
    j["provenance"] = m;
  }
  return j.dump(2) + "\n";
}

ScoreReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ParseError(std::string("bad score report: ") + e.what());
  }
  ScoreReport r;
  for (const auto& [k, v] : j.at("rouge_subscores").items()) r.rouge_subscores[k] = v.get<double>();
  r.task_score = j.at("task_score").get<double>();
  r.mia_raw = j.at("mia_raw").get<double>();
  r.mia_scaled = j.at("mia_scaled").get<double>();
  r.utility_score = j.at("utility_score").get<double>();
  r.final_score = j.at("final_score").get<double>();
  return r;
}

}  // namespace unlearn::evaluator
