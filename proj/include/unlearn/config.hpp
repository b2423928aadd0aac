#pragma once

#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/losses.hpp"
#include "unlearn/model.hpp"
#include "unlearn/trainer.hpp"

namespace unlearn::cli {

struct Paths {
  std::string corpus = "out/corpus.jsonl";
  std::string checkpoints = "out/checkpoints";
  std::string reports = "out/reports";
};

struct RunConfig {
  Paths paths;
  model::ModelConfig model;
  trainer::TrainConfig train;           // unlearning stage
  trainer::MemorizeOptions memorize;    // memorization stage
  losses::LossConfig loss;
  corpus::CorpusSpec corpus_spec;
  std::vector<int> eval_schedule = {10, 20};
  std::vector<trainer::SweepCell> sweep_cells;
  std::vector<uint64_t> sweep_seeds = {1, 2, 3, 4, 5};
};

RunConfig default_config();
// Parses a JSON config file; absent keys keep their defaults.
RunConfig load_config(const std::string& path);
// All invariant checks; each violation names the offending field path.
std::vector<std::string> validate_config(const RunConfig& cfg);
// Canonical serialization used for provenance hashing and artifact echoes.
std::string config_to_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

}  // namespace unlearn::cli
