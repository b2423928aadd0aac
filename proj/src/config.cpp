#include "unlearn/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace unlearn::cli {

namespace {

using nlohmann::ordered_json;

const char* const kDocTypeKeys[] = {"creative", "biography", "web"};
const char* const kDocSplitKeys[] = {"forget", "retain", "holdout"};

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_train(const nlohmann::json& j, trainer::TrainConfig& t) {
  maybe(j, "learning_rate", t.learning_rate);
  maybe(j, "batch_size", t.batch_size);
  maybe(j, "epochs", t.epochs);
  maybe(j, "beta1", t.beta1);
  maybe(j, "beta2", t.beta2);
  maybe(j, "eps", t.eps);
  maybe(j, "weight_decay", t.weight_decay);
  maybe(j, "seed", t.seed);
  maybe(j, "eval_every", t.eval_every);
}

ordered_json train_json(const trainer::TrainConfig& t) {
  ordered_json j;
  j["learning_rate"] = t.learning_rate;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["eps"] = t.eps;
  j["weight_decay"] = t.weight_decay;
  j["seed"] = t.seed;
  j["eval_every"] = t.eval_every;
  return j;
}

}  // namespace

RunConfig default_config() {
  RunConfig cfg;
  corpus::Tokenizer tok;
  cfg.model.vocab_size = tok.vocab_size();
  cfg.sweep_cells = {{1.0, 0.0, 5}, {1.0, 0.5, 5}, {1.0, 1.0, 5}, {0.0, 1.0, 5}};
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
  RunConfig cfg = default_config();
  try {
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      maybe(p, "corpus", cfg.paths.corpus);
      maybe(p, "checkpoints", cfg.paths.checkpoints);
      maybe(p, "reports", cfg.paths.reports);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      maybe(m, "vocab_size", cfg.model.vocab_size);
      maybe(m, "model_dim", cfg.model.model_dim);
      maybe(m, "n_layers", cfg.model.n_layers);
      maybe(m, "n_heads", cfg.model.n_heads);
      maybe(m, "context_len", cfg.model.context_len);
      maybe(m, "lora_rank", cfg.model.lora_rank);
      maybe(m, "lora_alpha", cfg.model.lora_alpha);
      maybe(m, "lora_targets", cfg.model.lora_targets);
    }
    if (j.contains("train")) parse_train(j["train"], cfg.train);
    if (j.contains("memorize")) {
      parse_train(j["memorize"], cfg.memorize.train);
      maybe(j["memorize"], "target_accuracy", cfg.memorize.target_accuracy);
      maybe(j["memorize"], "min_epochs", cfg.memorize.min_epochs);
      maybe(j["memorize"], "label_smoothing", cfg.memorize.label_smoothing);
      maybe(j["memorize"], "fail_below", cfg.memorize.fail_below);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      maybe(l, "beta", cfg.loss.beta);
      maybe(l, "gamma", cfg.loss.gamma);
      maybe(l, "delta", cfg.loss.delta);
    }
    if (j.contains("corpus")) {
      const auto& c = j["corpus"];
      maybe(c, "seed", cfg.corpus_spec.seed);
      maybe(c, "utility_count", cfg.corpus_spec.utility_count);
      maybe(c, "name_pool", cfg.corpus_spec.name_pool);
      maybe(c, "template_pool", cfg.corpus_spec.template_pool);
      if (c.contains("counts")) {
        for (int d = 0; d < 3; ++d) {
          if (!c["counts"].contains(kDocTypeKeys[d])) continue;
          for (int s = 0; s < 3; ++s) {
            maybe(c["counts"][kDocTypeKeys[d]], kDocSplitKeys[s], cfg.corpus_spec.doc_counts[d][s]);
          }
        }
      }
    }
    if (j.contains("eval_schedule")) cfg.eval_schedule = j["eval_schedule"].get<std::vector<int>>();
    if (j.contains("sweep")) {
      const auto& s = j["sweep"];
      if (s.contains("cells")) {
        cfg.sweep_cells.clear();
        for (const auto& cell : s["cells"]) {
          trainer::SweepCell sc;
          sc.rank = cfg.model.lora_rank;
          maybe(cell, "gamma", sc.gamma);
          maybe(cell, "delta", sc.delta);
          maybe(cell, "rank", sc.rank);
          cfg.sweep_cells.push_back(sc);
        }
      }
      if (s.contains("seeds")) cfg.sweep_seeds = s["seeds"].get<std::vector<uint64_t>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
  return cfg;
}

std::vector<std::string> validate_config(const RunConfig& cfg) {
  std::vector<std::string> v;
  auto expect = [&v](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
  };

  expect(!cfg.paths.corpus.empty(), "paths.corpus must be set");
  expect(!cfg.paths.checkpoints.empty(), "paths.checkpoints must be set");
  expect(!cfg.paths.reports.empty(), "paths.reports must be set");

  try {
    model::validate(cfg.model);
  } catch (const ConfigError& e) {
    std::string field = "model";
    const std::string what = e.what();
    if (what.find("lora_rank") != std::string::npos) field = "model.lora_rank";
    else if (what.find("lora_alpha") != std::string::npos) field = "model.lora_alpha";
    else if (what.find("lora_targets") != std::string::npos || what.find("lora target") != std::string::npos)
      field = "model.lora_targets";
    else if (what.find("n_heads") != std::string::npos) field = "model.n_heads";
    else if (what.find("vocab") != std::string::npos) field = "model.vocab_size";
    v.push_back(field + ": " + what);
  }
  {
    corpus::Tokenizer tok;
    expect(cfg.model.vocab_size >= tok.vocab_size(),
           "model.vocab_size must cover the tokenizer vocabulary (" + std::to_string(tok.vocab_size()) + ")");
  }

  expect(cfg.train.learning_rate > 0.0, "train.learning_rate must be > 0");
  expect(cfg.train.batch_size >= 1, "train.batch_size must be >= 1");
  expect(cfg.train.epochs >= 1, "train.epochs must be >= 1");
  expect(cfg.train.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  expect(cfg.memorize.train.learning_rate > 0.0, "memorize.learning_rate must be > 0");
  expect(cfg.memorize.train.batch_size >= 1, "memorize.batch_size must be >= 1");
  expect(cfg.memorize.train.epochs >= 1, "memorize.epochs must be >= 1");
  expect(cfg.memorize.target_accuracy > 0.0 && cfg.memorize.target_accuracy <= 1.0,
         "memorize.target_accuracy must be in (0, 1]");
  expect(cfg.memorize.label_smoothing >= 0.0 && cfg.memorize.label_smoothing < 1.0,
         "memorize.label_smoothing must be in [0, 1)");

  expect(cfg.loss.beta > 0.0, "loss.beta must be > 0");
  expect(cfg.loss.gamma >= 0.0, "loss.gamma must be >= 0");
  expect(cfg.loss.delta >= 0.0, "loss.delta must be >= 0");

  for (int d = 0; d < 3; ++d) {
    for (int s = 0; s < 3; ++s) {
      if (cfg.corpus_spec.doc_counts[d][s] < 1) {
        v.push_back(std::string("corpus.counts.") + kDocTypeKeys[d] + "." + kDocSplitKeys[s] +
                    " must be >= 1 so every evaluation cell is covered");
      }
    }
  }
  expect(cfg.corpus_spec.utility_count >= 10, "corpus.utility_count must be >= 10 for a meaningful utility score");
  expect(cfg.corpus_spec.template_pool >= 1 && cfg.corpus_spec.template_pool <= 5,
         "corpus.template_pool must be in [1, 5]");
  expect(cfg.corpus_spec.name_pool >= 1, "corpus.name_pool must be >= 1");

  expect(!cfg.eval_schedule.empty(), "eval_schedule must list at least one epoch");
  for (int e : cfg.eval_schedule) expect(e >= 1, "eval_schedule entries must be >= 1");
  for (const trainer::SweepCell& c : cfg.sweep_cells) {
    expect(c.gamma >= 0.0, "sweep.cells gamma must be >= 0");
    expect(c.delta >= 0.0, "sweep.cells delta must be >= 0");
    expect(c.rank >= 1 && c.rank <= cfg.model.model_dim, "sweep.cells rank must be in [1, model_dim]");
  }
  expect(!cfg.sweep_seeds.empty(), "sweep.seeds must list at least one seed");
  return v;
}

std::string config_to_json(const RunConfig& cfg) {
  ordered_json j;
  j["paths"] = {{"corpus", cfg.paths.corpus}, {"checkpoints", cfg.paths.checkpoints}, {"reports", cfg.paths.reports}};
  ordered_json m;
  m["vocab_size"] = cfg.model.vocab_size;
  m["model_dim"] = cfg.model.model_dim;
  m["n_layers"] = cfg.model.n_layers;
  m["n_heads"] = cfg.model.n_heads;
  m["context_len"] = cfg.model.context_len;
  m["lora_rank"] = cfg.model.lora_rank;
  m["lora_alpha"] = cfg.model.lora_alpha;
  m["lora_targets"] = cfg.model.lora_targets;
  j["model"] = m;
  j["train"] = train_json(cfg.train);
  ordered_json mem = train_json(cfg.memorize.train);
  mem["target_accuracy"] = cfg.memorize.target_accuracy;
  mem["min_epochs"] = cfg.memorize.min_epochs;
  mem["label_smoothing"] = cfg.memorize.label_smoothing;
  mem["fail_below"] = cfg.memorize.fail_below;
  j["memorize"] = mem;
  j["loss"] = {{"beta", cfg.loss.beta}, {"gamma", cfg.loss.gamma}, {"delta", cfg.loss.delta}};
  ordered_json counts;
  for (int d = 0; d < 3; ++d) {
    ordered_json row;
    for (int s = 0; s < 3; ++s) row[kDocSplitKeys[s]] = cfg.corpus_spec.doc_counts[d][s];
    counts[kDocTypeKeys[d]] = row;
  }
  j["corpus"] = {{"seed", cfg.corpus_spec.seed},
                 {"counts", counts},
                 {"utility_count", cfg.corpus_spec.utility_count},
                 {"name_pool", cfg.corpus_spec.name_pool},
                 {"template_pool", cfg.corpus_spec.template_pool}};
  j["eval_schedule"] = cfg.eval_schedule;
  ordered_json cells = ordered_json::array();
  for (const trainer::SweepCell& c : cfg.sweep_cells) {
    cells.push_back({{"gamma", c.gamma}, {"delta", c.delta}, {"rank", c.rank}});
  }
  j["sweep"] = {{"cells", cells}, {"seeds", cfg.sweep_seeds}};
  return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(config_to_json(cfg))); }

}  // namespace unlearn::cli
