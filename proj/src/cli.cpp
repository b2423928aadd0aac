#include "unlearn/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

namespace unlearn::cli {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out_dir;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON config file");
  cmd->add_option("--seed", flags.seed, "override the run seed");
  cmd->add_option("--out", flags.out_dir, "directory that relative output paths are resolved against");
  cmd->add_option("--jobs", flags.jobs, "parallel workers (sweep only)")->check(CLI::PositiveNumber);
}

std::string resolved(const std::string& out_dir, const std::string& path) {
  if (out_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(out_dir) / path).string();
}

void ensure_parent_dir(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent_dir(path);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("failed while writing " + path);
}

std::map<std::string, std::string> provenance(const RunConfig& cfg, uint64_t seed) {
  return {{"seed", std::to_string(seed)}, {"config_hash", config_hash(cfg)}, {"version", kVersion}};
}

// Every subcommand echoes the effective configuration next to its outputs.
void echo_config(const RunConfig& cfg, const std::string& dir) {
  write_text((fs::path(dir) / "effective_config.json").string(), config_to_json(cfg));
}

RunConfig load_effective_config(const CommonFlags& flags) {
  RunConfig cfg = flags.config_path.empty() ? default_config() : load_config(flags.config_path);
  if (flags.seed) {
    cfg.train.seed = *flags.seed;
    cfg.memorize.train.seed = *flags.seed;
    cfg.corpus_spec.seed = *flags.seed;
  }
  const std::vector<std::string> violations = validate_config(cfg);
  if (!violations.empty()) {
    std::string all = "invalid config:";
    for (const std::string& v : violations) all += "\n  " + v;
    throw ConfigError(all);
  }
  return cfg;
}

std::string target_model_stem(const RunConfig& cfg, const CommonFlags& flags) {
  return (fs::path(resolved(flags.out_dir, cfg.paths.checkpoints)) / "target_model").string();
}

corpus::Corpus load_corpus_for(const RunConfig& cfg, const CommonFlags& flags) {
  return corpus::load(resolved(flags.out_dir, cfg.paths.corpus));
}

int cmd_gen(const CommonFlags& flags) {
  const RunConfig cfg = load_effective_config(flags);
  const std::string corpus_path = resolved(flags.out_dir, cfg.paths.corpus);
  const corpus::GeneratedCorpus gen = corpus::generate(cfg.corpus_spec);
  ensure_parent_dir(corpus_path);
  corpus::save(gen.corpus, corpus_path);

  nlohmann::ordered_json meta;
  for (const auto& [k, v] : provenance(cfg, cfg.corpus_spec.seed)) meta[k] = v;
  meta["samples"] = gen.corpus.samples().size();
  write_text(corpus_path + ".meta.json", meta.dump(2) + "\n");
  echo_config(cfg, fs::path(corpus_path).parent_path().string());
  std::cout << "wrote " << gen.corpus.samples().size() << " samples to " << corpus_path << "\n";
  return 0;
}

int cmd_memorize(const CommonFlags& flags) {
  const RunConfig cfg = load_effective_config(flags);
  const corpus::Corpus corpus = load_corpus_for(cfg, flags);
  const corpus::Tokenizer tok;
  model::ModelState fresh = model::init_model(cfg.model, cfg.memorize.train.seed);
  trainer::MemorizeOptions options = cfg.memorize;
  options.verbose = true;
  trainer::MemorizeResult result = trainer::memorize(fresh, corpus, tok, options);

  const std::string stem = target_model_stem(cfg, flags);
  ensure_parent_dir(stem);
  model::save_checkpoint(result.state, stem, provenance(cfg, options.train.seed));
  result.log.config_hash = config_hash(cfg);
  const std::string reports = resolved(flags.out_dir, cfg.paths.reports);
  write_text((fs::path(reports) / "memorize_runlog.jsonl").string(), trainer::runlog_to_jsonl(result.log));
  echo_config(cfg, reports);
  std::cout << "memorized to accuracy " << format_double(result.final_accuracy) << " in "
            << result.log.records.size() << " epochs; checkpoint at " << stem << "\n";
  return 0;
}

int cmd_unlearn(const CommonFlags& flags, const std::optional<double>& gamma, const std::optional<double>& delta,
                const std::optional<double>& beta, const std::optional<int>& rank, const std::optional<int>& epochs) {
  RunConfig cfg = load_effective_config(flags);
  if (gamma) cfg.loss.gamma = *gamma;
  if (delta) cfg.loss.delta = *delta;
  if (beta) cfg.loss.beta = *beta;
  if (rank) cfg.model.lora_rank = *rank;
  if (epochs) cfg.train.epochs = *epochs;
  const std::vector<std::string> violations = validate_config(cfg);
  if (!violations.empty()) throw ConfigError("invalid config after flag overrides: " + violations.front());

  const corpus::Corpus corpus = load_corpus_for(cfg, flags);
  const corpus::Tokenizer tok;
  model::Checkpoint target = model::load_checkpoint(target_model_stem(cfg, flags));
  model::attach_lora(target.state, cfg.model.lora_rank, cfg.model.lora_alpha, cfg.model.lora_targets, cfg.train.seed);

  const std::string ckpt_dir = resolved(flags.out_dir, cfg.paths.checkpoints);
  const std::string reports = resolved(flags.out_dir, cfg.paths.reports);
  fs::create_directories(ckpt_dir);
  fs::create_directories(reports);
  const auto meta = provenance(cfg, cfg.train.seed);

  trainer::EvalHooks hooks;
  hooks.eval_epochs = cfg.eval_schedule;
  hooks.verbose = true;
  hooks.evaluate = [&](const model::ModelState& s) { return evaluator::evaluate(s, corpus, tok); };
  hooks.on_checkpoint = [&](int epoch, const model::ModelState& s) {
    model::save_checkpoint(s, (fs::path(ckpt_dir) / ("unlearned_epoch" + std::to_string(epoch))).string(), meta);
  };

  trainer::UnlearnResult result = trainer::unlearn(target.state, corpus, tok, cfg.loss, cfg.train, hooks);
  result.log.config_hash = config_hash(cfg);
  write_text((fs::path(reports) / "unlearn_runlog.jsonl").string(), trainer::runlog_to_jsonl(result.log));
  int reports_written = 0;
  for (const trainer::EpochRecord& rec : result.log.records) {
    if (!rec.scores) continue;
    write_text((fs::path(reports) / ("score_epoch" + std::to_string(rec.epoch) + ".json")).string(),
               evaluator::report_to_json(*rec.scores, meta));
    ++reports_written;
  }
  echo_config(cfg, reports);
  std::cout << "unlearned " << cfg.train.epochs << " epochs; " << reports_written << " score reports under "
            << reports << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint) {
  const RunConfig cfg = load_effective_config(flags);
  if (checkpoint.empty()) throw ConfigError("eval requires --checkpoint STEM");
  const corpus::Corpus corpus = load_corpus_for(cfg, flags);
  const corpus::Tokenizer tok;
  model::Checkpoint ckpt = model::load_checkpoint(resolved(flags.out_dir, checkpoint));
  const evaluator::ScoreReport report = evaluator::evaluate(ckpt.state, corpus, tok);
  const std::string reports = resolved(flags.out_dir, cfg.paths.reports);
  const std::string name = fs::path(checkpoint).filename().string();
  const std::string text = evaluator::report_to_json(report, provenance(cfg, cfg.train.seed));
  write_text((fs::path(reports) / ("eval_" + name + ".json")).string(), text);
  echo_config(cfg, reports);
  std::cout << text;
  return 0;
}

int cmd_sweep(const CommonFlags& flags) {
  const RunConfig cfg = load_effective_config(flags);
  const corpus::Corpus corpus = load_corpus_for(cfg, flags);
  const corpus::Tokenizer tok;
  model::Checkpoint target = model::load_checkpoint(target_model_stem(cfg, flags));

  const std::vector<trainer::SweepRow> rows =
      trainer::sweep(target.state, corpus, tok, cfg.sweep_cells, cfg.sweep_seeds, cfg.loss, cfg.train,
                     cfg.model.lora_alpha, cfg.model.lora_targets, flags.jobs);
  const std::string reports = resolved(flags.out_dir, cfg.paths.reports);
  const std::string csv = trainer::sweep_to_csv(rows, provenance(cfg, cfg.train.seed));
  write_text((fs::path(reports) / "sweep_summary.csv").string(), csv);
  echo_config(cfg, reports);
  std::cout << csv;
  for (const trainer::SweepRow& r : rows) {
    if (r.failed) std::cerr << "cell gamma=" << r.cell.gamma << " delta=" << r.cell.delta << " failed: " << r.error << "\n";
  }
  return 0;
}

int cmd_report(const CommonFlags& flags, const std::vector<std::string>& runlogs) {
  const RunConfig cfg = load_effective_config(flags);
  if (runlogs.empty()) throw ConfigError("report needs at least one runlog path");
  std::ostringstream csv;
  csv << "run,epoch,l_npo,l_rt,k_rt,combined,mean_npo_weight,accuracy,task_score,mia_raw,mia_scaled,"
         "utility_score,final_score\n";
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const std::string& path : runlogs) {
    std::ifstream f(resolved(flags.out_dir, path));
    if (!f) throw IoError("cannot open runlog " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    const trainer::RunLog log = trainer::runlog_from_jsonl(buf.str());
    const std::string run = fs::path(path).stem().string();
    for (const trainer::EpochRecord& r : log.records) {
      csv << run << "," << r.epoch << "," << cell(r.l_npo) << "," << cell(r.l_rt) << "," << cell(r.k_rt) << ","
          << format_double(r.combined) << "," << cell(r.mean_npo_weight) << "," << cell(r.accuracy) << ",";
      if (r.scores) {
        csv << format_double(r.scores->task_score) << "," << format_double(r.scores->mia_raw) << ","
            << format_double(r.scores->mia_scaled) << "," << format_double(r.scores->utility_score) << ","
            << format_double(r.scores->final_score);
      } else {
        csv << ",,,,";
      }
      csv << "\n";
    }
  }
  const std::string reports = resolved(flags.out_dir, cfg.paths.reports);
  write_text((fs::path(reports) / "score_series.csv").string(), csv.str());
  std::cout << csv.str();
  return 0;
}

int error_exit(const char* cls, const std::string& message, int code) {
  nlohmann::ordered_json j;
  j["error_class"] = cls;
  j["message"] = message;
  std::cerr << j.dump() << "\n";
  return code;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"desk-scale LLM unlearning workbench"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::optional<double> gamma, delta, beta;
  std::optional<int> rank, epochs;
  std::string checkpoint;
  std::vector<std::string> runlogs;

  CLI::App* gen = app.add_subcommand("gen", "generate the synthetic corpus");
  add_common(gen, flags);
  CLI::App* memorize = app.add_subcommand("memorize", "fine-tune the backbone until the corpus is memorized");
  add_common(memorize, flags);
  CLI::App* unlearn_cmd = app.add_subcommand("unlearn", "run NPO unlearning over fresh LoRA adapters");
  add_common(unlearn_cmd, flags);
  unlearn_cmd->add_option("--gamma", gamma, "retain-loss weight");
  unlearn_cmd->add_option("--delta", delta, "KL-regularizer weight");
  unlearn_cmd->add_option("--beta", beta, "NPO temperature");
  unlearn_cmd->add_option("--rank", rank, "LoRA rank");
  unlearn_cmd->add_option("--epochs", epochs, "unlearning epochs");
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint");
  add_common(eval_cmd, flags);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint stem (without .manifest/.bin)");
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "run the seeded hyper-parameter sweep");
  add_common(sweep_cmd, flags);
  CLI::App* report_cmd = app.add_subcommand("report", "convert runlogs into a score-vs-epoch series");
  add_common(report_cmd, flags);
  report_cmd->add_option("runlogs", runlogs, "runlog .jsonl files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    return error_exit("usage", e.what(), 2);
  }

  try {
    if (gen->parsed()) return cmd_gen(flags);
    if (memorize->parsed()) return cmd_memorize(flags);
    if (unlearn_cmd->parsed()) return cmd_unlearn(flags, gamma, delta, beta, rank, epochs);
    if (eval_cmd->parsed()) return cmd_eval(flags, checkpoint);
    if (sweep_cmd->parsed()) return cmd_sweep(flags);
    if (report_cmd->parsed()) return cmd_report(flags, runlogs);
    return error_exit("usage", "unknown subcommand", 2);
  } catch (const ConfigError& e) {
    return error_exit("config", e.what(), 3);
  } catch (const ParseError& e) {
    return error_exit("parse", e.what(), 4);
  } catch (const ValidationError& e) {
    return error_exit("validation", e.what(), 4);
  } catch (const IoError& e) {
    return error_exit("io", e.what(), 4);
  } catch (const TrainingError& e) {
    return error_exit("training", e.what(), 5);
  } catch (const ScoringError& e) {
    return error_exit("scoring", e.what(), 6);
  } catch (const std::exception& e) {
    return error_exit("internal", e.what(), 1);
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("unlearn-bench");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace unlearn::cli
