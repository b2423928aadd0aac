// Acceptance suite: runs every shipped acceptance check against the default
// configuration and prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "unlearn/cli.hpp"
#include "unlearn/evaluator.hpp"
#include "unlearn/trainer.hpp"

using namespace unlearn;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::vector<corpus::Encoded> synthetic_batch(int n, int len, int vocab, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<corpus::Encoded> out;
  for (int i = 0; i < n; ++i) {
    corpus::Encoded e;
    e.tokens.resize(static_cast<size_t>(len));
    for (int& t : e.tokens) t = static_cast<int>(rng() % static_cast<uint64_t>(vocab));
    e.sep_pos = len / 2;
    e.targets.assign(e.tokens.begin() + 1, e.tokens.end());
    e.mask.assign(e.targets.size(), 0);
    for (size_t t = static_cast<size_t>(e.sep_pos); t < e.mask.size(); ++t) e.mask[t] = 1;
    out.push_back(std::move(e));
  }
  return out;
}

model::ModelConfig probe_model_config() {
  model::ModelConfig cfg;
  cfg.vocab_size = 100;
  cfg.model_dim = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.context_len = 64;
  cfg.lora_rank = 5;
  cfg.lora_alpha = 5.0;
  return cfg;
}

void perturb_lora_b(model::ModelState& state, double magnitude, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, magnitude);
  for (model::NamedParam& p : model::trainable_parameters(state)) {
    if (p.name.ends_with(".b")) {
      for (double& v : p.tensor->data) v += dist(rng);
    }
  }
}

double grad_l2_gap(const std::vector<losses::GradVec>& a, const std::vector<losses::GradVec>& b) {
  double diff = 0.0, base = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    for (size_t j = 0; j < a[i].values.size(); ++j) {
      const double d = a[i].values[j] - b[i].values[j];
      diff += d * d;
      base += b[i].values[j] * b[i].values[j];
    }
  }
  return std::sqrt(diff) / std::sqrt(base);
}

// ---- criterion 1 ------------------------------------------------------

void criterion_gradients() {
  const auto t0 = Clock::now();
  const model::ModelConfig cfg = probe_model_config();
  model::ModelState state = model::init_model(cfg, 11);
  perturb_lora_b(state, 0.02, 12);
  const auto forget = synthetic_batch(2, 24, cfg.vocab_size, 13);
  const auto retain = synthetic_batch(2, 22, cfg.vocab_size, 14);
  const losses::LossConfig loss_cfg{0.5, 1.0, 0.5};

  const losses::BatchResult res = losses::combined_loss(state, forget, retain, loss_cfg, /*with_grads=*/true);
  auto params = model::trainable_parameters(state);

  double worst = 0.0;
  int64_t checked = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    diff::Tensor& tensor = *params[pi].tensor;
    const std::vector<double>& analytic = res.grads[pi].values;
    for (size_t k = 0; k < tensor.data.size(); ++k) {
      const double keep = tensor.data[k];
      const double h = 1e-5;
      tensor.data[k] = keep + h;
      const double up = losses::combined_loss(state, forget, retain, loss_cfg, false).breakdown.combined;
      tensor.data[k] = keep - h;
      const double down = losses::combined_loss(state, forget, retain, loss_cfg, false).breakdown.combined;
      tensor.data[k] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double tol = std::max(1e-8, 1e-4 * std::max(std::abs(fd), std::abs(analytic[k])));
      worst = std::max(worst, std::abs(analytic[k] - fd) / tol);
      ++checked;
    }
  }
  const double secs = seconds_since(t0);
  report(1, "combined-loss LoRA gradients match finite differences", worst <= 1.0 && secs < 60.0,
         std::to_string(checked) + " params, worst violation " + fmt(worst) + "x tolerance, " + fmt(secs) + "s");
}

// ---- criterion 2 ------------------------------------------------------

void criterion_npo_ga_link() {
  const model::ModelConfig cfg = probe_model_config();
  const auto forget = synthetic_batch(3, 24, cfg.vocab_size, 21);

  model::ModelState fresh = model::init_model(cfg, 22);
  const losses::LossGrads ga_fresh = losses::ga_loss_with_grads(fresh, forget);
  double worst_fresh = 0.0;
  for (double beta : {0.1, 0.5, 2.0}) {
    const losses::LossGrads npo = losses::npo_loss_with_grads(fresh, forget, beta);
    for (size_t i = 0; i < npo.grads.size(); ++i) {
      for (size_t j = 0; j < npo.grads[i].values.size(); ++j) {
        const double a = npo.grads[i].values[j], b = ga_fresh.grads[i].values[j];
        worst_fresh = std::max(worst_fresh, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-30}));
      }
    }
  }

  model::ModelState bent = model::init_model(cfg, 22);
  perturb_lora_b(bent, 0.02, 23);
  const losses::LossGrads ga_bent = losses::ga_loss_with_grads(bent, forget);
  std::vector<double> gaps;
  for (double beta : {1.0, 0.1, 0.01, 0.001}) {
    gaps.push_back(grad_l2_gap(losses::npo_loss_with_grads(bent, forget, beta).grads, ga_bent.grads));
  }
  bool monotone = true;
  for (size_t i = 1; i < gaps.size(); ++i) monotone = monotone && gaps[i] < gaps[i - 1];

  const bool pass = worst_fresh <= 1e-10 && monotone && gaps.back() <= 1e-3;
  std::ostringstream detail;
  detail << "fresh rel diff " << fmt(worst_fresh) << "; gaps";
  for (double gap : gaps) detail << " " << fmt(gap);
  report(2, "NPO gradient matches GA at the fresh state and converges as beta->0", pass, detail.str());
}

// ---- criterion 3 ------------------------------------------------------

void criterion_lora_identities() {
  const model::ModelConfig cfg = probe_model_config();
  model::ModelState state = model::init_model(cfg, 31);
  std::mt19937_64 rng(32);
  auto random_tokens = [&](int len) {
    std::vector<int> tokens(static_cast<size_t>(len));
    for (int& t : tokens) t = static_cast<int>(rng() % static_cast<uint64_t>(cfg.vocab_size));
    return tokens;
  };

  // B = 0 no-op
  double init_diff = 0.0;
  for (int i = 0; i < 4; ++i) {
    const auto tokens = random_tokens(20);
    const diff::Tensor on = model::log_probs(state, tokens, true);
    const diff::Tensor off = model::log_probs(state, tokens, false);
    for (size_t k = 0; k < on.data.size(); ++k) init_diff = std::max(init_diff, std::abs(on.data[k] - off.data[k]));
  }

  // toggle soundness, bitwise
  const auto probe_tokens = random_tokens(24);
  const diff::Tensor before = model::log_probs(state, probe_tokens, false);
  perturb_lora_b(state, 5.0, 33);
  const diff::Tensor after = model::log_probs(state, probe_tokens, false);
  const bool toggle_bitwise = before.data == after.data;

  // merge equivalence on 32 random sequences
  model::ModelState trained = model::init_model(cfg, 31);
  perturb_lora_b(trained, 0.05, 34);
  const model::MergeResult merged = model::merge_lora(trained);
  double merge_diff = 0.0;
  for (int i = 0; i < 32; ++i) {
    const auto tokens = random_tokens(10 + static_cast<int>(rng() % 10));
    const diff::Tensor augmented = model::log_probs(trained, tokens, true);
    const diff::Tensor folded = model::log_probs(merged.state, tokens, true);
    for (size_t k = 0; k < augmented.data.size(); ++k) {
      merge_diff = std::max(merge_diff, std::abs(augmented.data[k] - folded.data[k]));
    }
  }

  const model::MergeResult twice = model::merge_lora(merged.state);
  bool idempotent = twice.already_merged;
  for (size_t l = 0; l < merged.state.layers.size() && idempotent; ++l) {
    idempotent = twice.state.layers[l].w_q.data == merged.state.layers[l].w_q.data &&
                 twice.state.layers[l].w_o.data == merged.state.layers[l].w_o.data;
  }

  const bool pass = init_diff <= 1e-12 && toggle_bitwise && merge_diff <= 1e-9 && idempotent;
  report(3, "LoRA toggle, merge and init identities", pass,
         "init diff " + fmt(init_diff) + ", merge diff " + fmt(merge_diff) + ", toggle " +
             (toggle_bitwise ? "bitwise" : "BROKEN") + ", idempotent " + (idempotent ? "yes" : "no"));
}

// ---- criterion 4 ------------------------------------------------------

void criterion_loss_anchors() {
  const model::ModelConfig cfg = probe_model_config();
  model::ModelState state = model::init_model(cfg, 41);
  const auto forget = synthetic_batch(3, 20, cfg.vocab_size, 42);
  const auto retain = synthetic_batch(3, 18, cfg.vocab_size, 43);

  const double npo_fresh = losses::npo_loss(state, forget, 0.5);
  const double npo_err = std::abs(npo_fresh - 4.0 * std::log(2.0));
  const double kl_fresh = std::abs(losses::kl_retain(state, retain));

  perturb_lora_b(state, 0.05, 44);
  const losses::BatchResult res = losses::combined_loss(state, forget, retain, {0.5, 1.0, 0.5}, false);
  const double comp_err =
      std::abs(res.breakdown.combined - (res.breakdown.l_npo + 1.0 * res.breakdown.l_rt + 0.5 * res.breakdown.k_rt));

  const bool pass = npo_err <= 1e-12 && kl_fresh <= 1e-12 && comp_err <= 1e-12;
  report(4, "loss anchors: fresh NPO = (2/beta) ln 2, fresh KL = 0, combined composition", pass,
         "npo err " + fmt(npo_err) + ", kl " + fmt(kl_fresh) + ", composition err " + fmt(comp_err));
}

// ---- criterion 5 ------------------------------------------------------

void criterion_metric_oracles() {
  bool pass = true;
  std::ostringstream detail;

  pass = pass && evaluator::rouge_l("the cat", "the cat sat") == 0.8;
  const std::vector<double> members = {1.0, 2.0};
  const std::vector<double> nonmembers = {1.5, 2.5};
  pass = pass && evaluator::mia_auc(members, nonmembers) == 0.75;
  pass = pass && evaluator::scale_mia(0.5) == 1.0 && evaluator::scale_mia(0.0) == 0.0 &&
         evaluator::scale_mia(1.0) == 0.0;
  std::vector<double> twelve(12, 0.8);
  twelve[7] = 0.0;
  pass = pass && evaluator::harmonic_mean(twelve) == 0.0;

  const struct {
    double task, mia, mmlu, published;
  } rows[] = {{.431, .657, .461, .516}, {0.0, 0.0, .510, .170}, {.449, .389, .449, .429}, {.349, .375, .462, .395},
              {.434, .594, .439, .489}, {.349, .165, .465, .327}, {.453, .620, .449, .507}, {.369, .699, .441, .503},
              {.332, .400, .370, .367}, {.021, .080, .463, .188}, {0.0, .382, .348, .243}};
  double worst_row = 0.0;
  for (const auto& row : rows) {
    worst_row = std::max(worst_row, std::abs(evaluator::final_score(row.task, row.mia, row.mmlu) - row.published));
  }
  pass = pass && worst_row <= 0.0015;
  detail << "published final-score residual " << fmt(worst_row);
  report(5, "metric oracles: rouge, MIA AUC, scaling, harmonic mean, published triples", pass, detail.str());
}

// ---- criteria 6-8 (end-to-end desk experiment) -------------------------

struct DeskWorld {
  cli::RunConfig cfg;
  corpus::Corpus corpus;
  corpus::Tokenizer tok;
  model::ModelState memorized;
  double memorize_accuracy = 0.0;
  double baseline_utility = 0.0;
  evaluator::ScoreReport baseline;
  // seed-1 default unlearning run, reused by criterion 8
  std::string final_report_json;
  std::string final_ckpt_bytes;
  bool ready = false;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

double mean_cell(const std::map<std::string, double>& sub, const char* prefix) {
  double sum = 0.0;
  int n = 0;
  for (const auto& [k, v] : sub) {
    if (k.rfind(prefix, 0) == 0) {
      sum += v;
      ++n;
    }
  }
  return sum / n;
}

void run_desk_experiment(DeskWorld& world, const fs::path& out_dir) {
  const auto t0 = Clock::now();
  world.cfg = cli::default_config();
  const auto gen = corpus::generate(world.cfg.corpus_spec);
  world.corpus = gen.corpus;
  corpus::save(world.corpus, (out_dir / "corpus.jsonl").string());

  trainer::MemorizeOptions mopt = world.cfg.memorize;
  mopt.verbose = false;
  const auto mem = trainer::memorize(model::init_model(world.cfg.model, mopt.train.seed), world.corpus, world.tok,
                                     mopt);
  world.memorized = mem.state;
  world.memorize_accuracy = mem.final_accuracy;
  const double t_memorize = seconds_since(t0);

  world.baseline = evaluator::evaluate(world.memorized, world.corpus, world.tok);
  world.baseline_utility = world.baseline.utility_score;
  const double baseline_forget = mean_cell(world.baseline.rouge_subscores, "forget.");

  model::ModelState start = world.memorized;
  model::attach_lora(start, world.cfg.model.lora_rank, world.cfg.model.lora_alpha, world.cfg.model.lora_targets,
                     world.cfg.train.seed);
  trainer::EvalHooks hooks;
  hooks.eval_epochs = world.cfg.eval_schedule;
  hooks.evaluate = [&](const model::ModelState& s) { return evaluator::evaluate(s, world.corpus, world.tok); };
  const auto run = trainer::unlearn(start, world.corpus, world.tok, world.cfg.loss, world.cfg.train, hooks);

  std::ofstream(out_dir / "unlearn_runlog.jsonl") << trainer::runlog_to_jsonl(run.log);
  const evaluator::ScoreReport* at10 = nullptr;
  const evaluator::ScoreReport* at20 = nullptr;
  for (const auto& rec : run.log.records) {
    if (rec.scores && rec.epoch == 10) at10 = &*rec.scores;
    if (rec.scores && rec.epoch == 20) at20 = &*rec.scores;
  }
  const double total = seconds_since(t0);

  bool pass = world.memorize_accuracy >= 0.99 && at10 != nullptr && at20 != nullptr;
  std::ostringstream detail;
  detail << "memorize acc " << fmt(world.memorize_accuracy) << " (" << fmt(t_memorize) << "s)";
  if (pass) {
    const double forget20 = mean_cell(at20->rouge_subscores, "forget.");
    const double retain20 = mean_cell(at20->rouge_subscores, "retain.");
    pass = baseline_forget >= 0.95 && world.baseline.task_score <= 0.05 && forget20 <= 0.3 && retain20 >= 0.7 &&
           at20->task_score >= 0.4;
    detail << "; baseline forget rouge " << fmt(baseline_forget) << ", task " << fmt(world.baseline.task_score)
           << "; epoch20 forget " << fmt(forget20) << ", retain " << fmt(retain20) << ", task "
           << fmt(at20->task_score) << ", final " << fmt(at20->final_score);
    world.final_report_json = evaluator::report_to_json(*at20);
    std::ofstream(out_dir / "score_epoch20.json") << world.final_report_json;
    model::save_checkpoint(run.state, (out_dir / "unlearned_epoch20").string());
    world.final_ckpt_bytes = slurp((out_dir / "unlearned_epoch20.bin").string());
    world.ready = true;
  }
  detail << "; runtime " << fmt(total) << "s (target 900s)";
  pass = pass && total <= 900.0;
  report(6, "end-to-end desk experiment at the default configuration", pass, detail.str());
}

void criterion_regularization_trend(const DeskWorld& world, const fs::path& out_dir) {
  if (!world.ready) {
    report(7, "KL regularization limits utility degradation", false, "skipped: criterion 6 setup failed");
    return;
  }
  const std::vector<trainer::SweepCell> grid = {{1.0, 0.0, world.cfg.model.lora_rank},
                                                {1.0, 0.5, world.cfg.model.lora_rank}};
  const std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  const unsigned jobs = std::max(2u, std::thread::hardware_concurrency());
  const auto rows = trainer::sweep(world.memorized, world.corpus, world.tok, grid, seeds, world.cfg.loss,
                                   world.cfg.train, world.cfg.model.lora_alpha, world.cfg.model.lora_targets,
                                   static_cast<int>(jobs));
  std::map<std::string, std::string> meta = {{"baseline_utility", format_double(world.baseline_utility)},
                                             {"seeds", "5"},
                                             {"epochs", std::to_string(world.cfg.train.epochs)}};
  const std::string csv = trainer::sweep_to_csv(rows, meta);
  std::ofstream(out_dir / "sweep_summary.csv") << csv;

  bool pass = !rows[0].failed && !rows[1].failed;
  std::ostringstream detail;
  if (pass) {
    const double deg_without = world.baseline_utility - rows[0].utility.mean;  // delta = 0
    const double deg_with = world.baseline_utility - rows[1].utility.mean;     // delta = 0.5
    pass = deg_with <= deg_without + 1e-12;
    detail << "mean utility degradation: delta=0.5 " << fmt(deg_with) << " vs delta=0 " << fmt(deg_without)
           << " (baseline " << fmt(world.baseline_utility) << "); final scores " << fmt(rows[1].final_score.mean)
           << " vs " << fmt(rows[0].final_score.mean);
  } else {
    detail << "sweep cell failed: " << rows[0].error << rows[1].error;
  }
  report(7, "KL regularization limits utility degradation (soft, direction on average)", pass, detail.str());
}

void criterion_determinism(const DeskWorld& world, const fs::path& out_dir) {
  if (!world.ready) {
    report(8, "bitwise determinism", false, "skipped: criterion 6 setup failed");
    return;
  }
  // corpus regeneration is byte-identical
  const auto regen = corpus::generate(world.cfg.corpus_spec);
  corpus::save(regen.corpus, (out_dir / "corpus_again.jsonl").string());
  const bool corpus_same =
      slurp((out_dir / "corpus.jsonl").string()) == slurp((out_dir / "corpus_again.jsonl").string());

  // the default unlearning run reproduces the same checkpoint and report
  model::ModelState start = world.memorized;
  model::attach_lora(start, world.cfg.model.lora_rank, world.cfg.model.lora_alpha, world.cfg.model.lora_targets,
                     world.cfg.train.seed);
  const auto run = trainer::unlearn(start, world.corpus, world.tok, world.cfg.loss, world.cfg.train);
  model::save_checkpoint(run.state, (out_dir / "unlearned_epoch20_again").string());
  const bool ckpt_same = world.final_ckpt_bytes == slurp((out_dir / "unlearned_epoch20_again.bin").string());
  const std::string report_again =
      evaluator::report_to_json(evaluator::evaluate(run.state, world.corpus, world.tok));
  const bool report_same = report_again == world.final_report_json;

  report(8, "bitwise determinism of corpus, checkpoints and score reports", corpus_same && ckpt_same && report_same,
         std::string("corpus ") + (corpus_same ? "ok" : "DIFFERS") + ", checkpoint " + (ckpt_same ? "ok" : "DIFFERS") +
             ", report " + (report_same ? "ok" : "DIFFERS"));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out_dir = "acceptance_out";
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--out") out_dir = argv[i + 1];
  }
  fs::create_directories(out_dir);

  criterion_gradients();
  criterion_npo_ga_link();
  criterion_lora_identities();
  criterion_loss_anchors();
  criterion_metric_oracles();

  DeskWorld world;
  run_desk_experiment(world, out_dir);
  criterion_regularization_trend(world, out_dir);
  criterion_determinism(world, out_dir);

  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
