#include "unlearn/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace unlearn::trainer {

namespace {

using corpus::Encoded;
using model::ModelState;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<size_t> shuffled_indices(size_t n, std::mt19937_64& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

int64_t masked_count(const Encoded& e) {
  int64_t n = 0;
  for (uint8_t m : e.mask) n += (m != 0);
  return n;
}

struct ParamSet {
  std::vector<model::NamedParam> params;
  std::vector<std::span<double>> views;

  explicit ParamSet(std::vector<model::NamedParam> p) : params(std::move(p)) {
    views.reserve(params.size());
    for (auto& np : params) views.emplace_back(np.tensor->data);
  }
};

// Gradients arrive keyed by name; order them to match the parameter list.
std::vector<std::vector<double>> align_grads(const ParamSet& set, std::vector<losses::GradVec>& grads) {
  std::vector<std::vector<double>> out(set.params.size());
  for (size_t i = 0; i < set.params.size(); ++i) {
    bool found = false;
    for (auto& gv : grads) {
      if (gv.name == set.params[i].name) {
        out[i] = std::move(gv.values);
        found = true;
        break;
      }
    }
    if (!found) throw ContractError("missing gradient for parameter " + set.params[i].name);
    if (out[i].size() != set.views[i].size()) {
      throw ContractError("gradient size mismatch for parameter " + set.params[i].name);
    }
  }
  return out;
}

std::string batch_ids(std::span<const Encoded> batch) {
  std::ostringstream os;
  for (size_t i = 0; i < batch.size(); ++i) {
    if (i) os << ", ";
    os << batch[i].sample->id;
  }
  return os.str();
}

}  // namespace

double exact_match_accuracy(const ModelState& state, std::span<const Encoded> samples, bool use_lora) {
  int64_t hits = 0, total = 0;
  for (const Encoded& e : samples) {
    const diff::Tensor lp = model::log_probs(state, e.tokens, use_lora);
    for (size_t t = 0; t < e.targets.size(); ++t) {
      if (!e.mask[t]) continue;
      int best = 0;
      double best_lp = lp.at(static_cast<int>(t), 0);
      for (int j = 1; j < lp.cols(); ++j) {
        if (lp.at(static_cast<int>(t), j) > best_lp) {
          best_lp = lp.at(static_cast<int>(t), j);
          best = j;
        }
      }
      hits += (best == e.targets[t]);
      ++total;
    }
  }
  if (total == 0) throw ContractError("accuracy over a set with no completion tokens");
  return static_cast<double>(hits) / static_cast<double>(total);
}

MemorizeResult memorize(const ModelState& fresh, const corpus::Corpus& corpus, const corpus::Tokenizer& tok,
                        const MemorizeOptions& options) {
  MemorizeResult res;
  res.state = fresh;
  model::strip_lora(res.state);

  std::vector<const corpus::Sample*> train_samples = corpus.split(corpus::Split::kForget);
  for (const corpus::Sample* s : corpus.split(corpus::Split::kRetain)) train_samples.push_back(s);
  if (train_samples.empty()) throw ContractError("memorize needs a nonempty forget+retain corpus");
  const std::vector<Encoded> encoded = corpus::encode_all(train_samples, tok, res.state.config.context_len);

  const TrainConfig& cfg = options.train;
  ParamSet params(model::backbone_parameters(res.state));
  optim::AdamW opt(cfg.adamw());
  std::mt19937_64 rng(cfg.seed);

  res.log.seed = cfg.seed;
  res.log.version = kVersion;

  double accuracy = 0.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const std::vector<size_t> order = shuffled_indices(encoded.size(), rng);
    double loss_sum = 0.0;
    int64_t steps = 0, hits = 0, total = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      diff::Graph g;
      model::ForwardBuilder fb(g, res.state, /*use_lora=*/false, model::Trainable::kBackbone);
      diff::NodeId acc = -1;
      int64_t token_total = 0;
      for (size_t i = b; i < end; ++i) {
        const Encoded& e = encoded[order[i]];
        const diff::NodeId lp = fb.log_probs(e.tokens);
        const diff::NodeId pred = g.slice_rows(lp, 0, static_cast<int>(e.targets.size()));
        const diff::NodeId ce = g.cross_entropy(pred, e.targets, e.mask, options.label_smoothing);
        const int64_t n = masked_count(e);
        const diff::NodeId weighted = g.scale(ce, static_cast<double>(n));
        acc = acc < 0 ? weighted : g.add(acc, weighted);
        token_total += n;
        // running teacher-forced accuracy from the same forward pass
        const diff::Tensor& lpv = g.value(pred);
        for (size_t t = 0; t < e.targets.size(); ++t) {
          if (!e.mask[t]) continue;
          int best = 0;
          double best_lp = lpv.at(static_cast<int>(t), 0);
          for (int j = 1; j < lpv.cols(); ++j) {
            if (lpv.at(static_cast<int>(t), j) > best_lp) {
              best_lp = lpv.at(static_cast<int>(t), j);
              best = j;
            }
          }
          hits += (best == e.targets[t]);
          ++total;
        }
      }
      const diff::NodeId loss = g.scale(acc, 1.0 / static_cast<double>(token_total));
      const double loss_value = g.value(loss).data[0];
      if (!std::isfinite(loss_value)) {
        throw TrainingError("memorize loss became non-finite at epoch " + std::to_string(epoch));
      }
      loss_sum += loss_value;
      ++steps;
      g.backward(loss);
      std::vector<losses::GradVec> named;
      named.reserve(fb.param_nodes().size());
      for (const auto& [name, id] : fb.param_nodes()) named.push_back({name, g.grad_or_zeros(id)});
      std::vector<std::vector<double>> grads = align_grads(params, named);
      opt.step(params.views, grads);
    }
    accuracy = static_cast<double>(hits) / static_cast<double>(total);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.combined = loss_sum / static_cast<double>(steps);
    rec.accuracy = accuracy;
    rec.wall_clock_s = seconds_since(start);
    res.log.records.push_back(rec);
    if (options.verbose && (epoch % 10 == 0 || epoch == 1)) {
      std::cerr << "[memorize] epoch " << epoch << " nll " << rec.combined << " acc " << accuracy << "\n";
    }
    if (epoch >= options.min_epochs && accuracy >= options.target_accuracy) {
      // confirm with a clean full pass; the running number mixes mid-epoch updates
      accuracy = exact_match_accuracy(res.state, encoded, /*use_lora=*/false);
      if (accuracy >= options.target_accuracy) break;
    }
  }
  if (accuracy < options.fail_below) {
    throw TrainingError("memorization failed: accuracy " + format_double(accuracy) + " below " +
                        format_double(options.fail_below) + " after " + std::to_string(cfg.epochs) +
                        " epochs; the model is too small for this corpus");
  }
  res.final_accuracy = accuracy;
  return res;
}

UnlearnResult unlearn(const ModelState& start, const corpus::Corpus& corpus, const corpus::Tokenizer& tok,
                      const losses::LossConfig& loss_cfg, const TrainConfig& train_cfg, const EvalHooks& hooks) {
  UnlearnResult res;
  res.state = start;
  res.log.seed = train_cfg.seed;
  res.log.version = kVersion;
  if (train_cfg.epochs <= 0) return res;

  const std::vector<Encoded> forget =
      corpus::encode_all(corpus.split(corpus::Split::kForget), tok, res.state.config.context_len);
  const std::vector<Encoded> retain =
      corpus::encode_all(corpus.split(corpus::Split::kRetain), tok, res.state.config.context_len);
  if (forget.empty() || retain.empty()) throw ContractError("unlearn needs nonempty forget and retain splits");

  ParamSet params(model::trainable_parameters(res.state));
  optim::AdamW opt(train_cfg.adamw());
  std::mt19937_64 rng(train_cfg.seed);

  std::vector<int> eval_epochs = hooks.eval_epochs;
  std::sort(eval_epochs.begin(), eval_epochs.end());
  if (train_cfg.eval_every > 0) {
    for (int e = train_cfg.eval_every; e <= train_cfg.epochs; e += train_cfg.eval_every) {
      if (!std::binary_search(eval_epochs.begin(), eval_epochs.end(), e)) {
        eval_epochs.insert(std::lower_bound(eval_epochs.begin(), eval_epochs.end(), e), e);
      }
    }
  }

  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    const auto start_time = Clock::now();
    const std::vector<size_t> order = shuffled_indices(forget.size(), rng);
    losses::LossBreakdown sums;
    double weight_sum = 0.0;
    int64_t steps = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(train_cfg.batch_size)) {
      const size_t end = std::min(order.size(), b + static_cast<size_t>(train_cfg.batch_size));
      // canonical in-batch order so the batch loss does not depend on how the
      // shuffle happened to arrange the same membership
      std::vector<size_t> members(order.begin() + static_cast<ptrdiff_t>(b),
                                  order.begin() + static_cast<ptrdiff_t>(end));
      std::sort(members.begin(), members.end());
      std::vector<Encoded> fbatch, rbatch;
      for (size_t i : members) fbatch.push_back(forget[i]);
      for (size_t i = b; i < end; ++i) rbatch.push_back(retain[rng() % retain.size()]);

      losses::BatchResult step = losses::combined_loss(res.state, fbatch, rbatch, loss_cfg, /*with_grads=*/true);
      if (!std::isfinite(step.breakdown.combined)) {
        std::cerr << "[unlearn] non-finite loss at epoch " << epoch << "; forget batch: " << batch_ids(fbatch)
                  << "; retain batch: " << batch_ids(rbatch) << "\n";
        throw TrainingError("unlearn loss became non-finite at epoch " + std::to_string(epoch) +
                            " (batch: " + batch_ids(fbatch) + ")");
      }
      std::vector<std::vector<double>> grads = align_grads(params, step.grads);
      opt.step(params.views, grads);

      sums.l_npo += step.breakdown.l_npo;
      sums.l_rt += step.breakdown.l_rt;
      sums.k_rt += step.breakdown.k_rt;
      sums.combined += step.breakdown.combined;
      sums.n_forget_tokens += step.breakdown.n_forget_tokens;
      sums.n_retain_tokens += step.breakdown.n_retain_tokens;
      weight_sum += step.mean_npo_weight;
      ++steps;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const double inv = 1.0 / static_cast<double>(steps);
    rec.l_npo = sums.l_npo * inv;
    rec.l_rt = sums.l_rt * inv;
    rec.k_rt = sums.k_rt * inv;
    rec.combined = sums.combined * inv;
    rec.mean_npo_weight = weight_sum * inv;
    rec.n_forget_tokens = sums.n_forget_tokens;
    rec.n_retain_tokens = sums.n_retain_tokens;
    if (std::binary_search(eval_epochs.begin(), eval_epochs.end(), epoch)) {
      if (hooks.evaluate) rec.scores = hooks.evaluate(res.state);
      if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, res.state);
    }
    rec.wall_clock_s = seconds_since(start_time);
    if (hooks.verbose) {
      std::cerr << "[unlearn] epoch " << epoch << " combined " << rec.combined << " npo-weight "
                << *rec.mean_npo_weight << "\n";
    }
    res.log.records.push_back(std::move(rec));
  }
  return res;
}

namespace {

Stat stat_of(const std::vector<double>& xs) {
  Stat s;
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double sq = 0.0;
    for (double x : xs) sq += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(xs.size() - 1));
  }
  return s;
}

}  // namespace

std::vector<SweepRow> sweep(const ModelState& memorized, const corpus::Corpus& corpus, const corpus::Tokenizer& tok,
                            const std::vector<SweepCell>& grid, const std::vector<uint64_t>& seeds,
                            const losses::LossConfig& base_loss, const TrainConfig& base_train, double lora_alpha,
                            const std::string& lora_targets, int jobs) {
  if (grid.empty() || seeds.empty()) throw ContractError("sweep needs a nonempty grid and seed list");
  std::vector<SweepRow> rows(grid.size());

  std::atomic<size_t> next_cell{0};
  auto worker = [&]() {
    for (;;) {
      const size_t ci = next_cell.fetch_add(1);
      if (ci >= grid.size()) return;
      SweepRow& row = rows[ci];
      row.cell = grid[ci];
      try {
        std::vector<double> task, mia_raw, mia_scaled, utility, final_sc;
        for (uint64_t seed : seeds) {
          ModelState state = memorized;
          model::attach_lora(state, row.cell.rank, lora_alpha, lora_targets, seed);
          losses::LossConfig loss = base_loss;
          loss.gamma = row.cell.gamma;
          loss.delta = row.cell.delta;
          TrainConfig train = base_train;
          train.seed = seed;
          UnlearnResult run = unlearn(state, corpus, tok, loss, train);
          const evaluator::ScoreReport rep = evaluator::evaluate(run.state, corpus, tok);
          task.push_back(rep.task_score);
          mia_raw.push_back(rep.mia_raw);
          mia_scaled.push_back(rep.mia_scaled);
          utility.push_back(rep.utility_score);
          final_sc.push_back(rep.final_score);
          row.reports.push_back(rep);
          ++row.n_runs;
        }
        row.task = stat_of(task);
        row.mia_raw = stat_of(mia_raw);
        row.mia_scaled = stat_of(mia_scaled);
        row.utility = stat_of(utility);
        row.final_score = stat_of(final_sc);
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
    }
  };

  jobs = std::max(1, jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows, const std::map<std::string, std::string>& meta) {
  std::ostringstream os;
  for (const auto& [k, v] : meta) os << "# " << k << " " << v << "\n";
  os << "gamma,delta,rank,status,n_runs,task_mean,task_std,mia_raw_mean,mia_raw_std,"
        "mia_scaled_mean,mia_scaled_std,utility_mean,utility_std,final_mean,final_std\n";
  for (const SweepRow& r : rows) {
    os << format_double(r.cell.gamma) << "," << format_double(r.cell.delta) << "," << r.cell.rank << ","
       << (r.failed ? "failed" : "ok") << "," << r.n_runs;
    for (const Stat* s : {&r.task, &r.mia_raw, &r.mia_scaled, &r.utility, &r.final_score}) {
      os << "," << format_double(s->mean) << "," << format_double(s->stddev);
    }
    os << "\n";
  }
  return os.str();
}

namespace {

using nlohmann::ordered_json;

void put_scores(ordered_json& j, const evaluator::ScoreReport& r) {
  j["task_score"] = r.task_score;
  j["mia_raw"] = r.mia_raw;
  j["mia_scaled"] = r.mia_scaled;
  j["utility_score"] = r.utility_score;
  j["final_score"] = r.final_score;
  ordered_json sub = ordered_json::object();
  for (const auto& [k, v] : r.rouge_subscores) sub[k] = v;
  j["rouge_subscores"] = sub;
}

}  // namespace

std::string runlog_to_jsonl(const RunLog& log) {
  std::ostringstream os;
  ordered_json header;
  header["record"] = "header";
  header["seed"] = log.seed;
  header["config_hash"] = log.config_hash;
  header["version"] = log.version;
  os << header.dump() << "\n";
  for (const EpochRecord& r : log.records) {
    ordered_json j;
    j["record"] = "epoch";
    j["epoch"] = r.epoch;
    if (r.l_npo) j["l_npo"] = *r.l_npo;
    if (r.l_rt) j["l_rt"] = *r.l_rt;
    if (r.k_rt) j["k_rt"] = *r.k_rt;
    j["combined"] = r.combined;
    if (r.mean_npo_weight) j["mean_npo_weight"] = *r.mean_npo_weight;
    if (r.accuracy) j["accuracy"] = *r.accuracy;
    if (r.n_forget_tokens) j["n_forget_tokens"] = r.n_forget_tokens;
    if (r.n_retain_tokens) j["n_retain_tokens"] = r.n_retain_tokens;
    j["wall_clock_s"] = r.wall_clock_s;
    if (r.scores) put_scores(j, *r.scores);
    os << j.dump() << "\n";
  }
  return os.str();
}

RunLog runlog_from_jsonl(const std::string& text) {
  RunLog log;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  int last_epoch = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ParseError("runlog line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::string kind = j.value("record", "");
    if (kind == "header") {
      log.seed = j.value("seed", 0ull);
      log.config_hash = j.value("config_hash", "");
      log.version = j.value("version", "");
      continue;
    }
    if (kind != "epoch") throw ParseError("runlog line " + std::to_string(line_no) + ": unknown record kind");
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    if (r.epoch != last_epoch + 1) {
      throw ValidationError("runlog line " + std::to_string(line_no) + ": epochs must be consecutive from 1");
    }
    last_epoch = r.epoch;
    if (j.contains("l_npo")) r.l_npo = j["l_npo"].get<double>();
    if (j.contains("l_rt")) r.l_rt = j["l_rt"].get<double>();
    if (j.contains("k_rt")) r.k_rt = j["k_rt"].get<double>();
    r.combined = j.at("combined").get<double>();
    if (j.contains("mean_npo_weight")) r.mean_npo_weight = j["mean_npo_weight"].get<double>();
    if (j.contains("accuracy")) r.accuracy = j["accuracy"].get<double>();
    r.n_forget_tokens = j.value("n_forget_tokens", 0ll);
    r.n_retain_tokens = j.value("n_retain_tokens", 0ll);
    r.wall_clock_s = j.value("wall_clock_s", 0.0);
    if (j.contains("task_score")) {
      evaluator::ScoreReport rep;
      rep.task_score = j.at("task_score").get<double>();
      rep.mia_raw = j.at("mia_raw").get<double>();
      rep.mia_scaled = j.at("mia_scaled").get<double>();
      rep.utility_score = j.at("utility_score").get<double>();
      rep.final_score = j.at("final_score").get<double>();
      if (j.contains("rouge_subscores")) {
        for (const auto& [k, v] : j["rouge_subscores"].items()) rep.rouge_subscores[k] = v.get<double>();
      }
      r.scores = std::move(rep);
    }
    log.records.push_back(std::move(r));
  }
  return log;
}

}  // namespace unlearn::trainer
