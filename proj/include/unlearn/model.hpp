#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unlearn/graph.hpp"

namespace unlearn::model {

enum class Proj : uint8_t { kQ = 0, kK = 1, kV = 2, kO = 3 };
constexpr int kNumProj = 4;
char proj_letter(Proj p);
std::vector<Proj> parse_targets(const std::string& targets);

struct ModelConfig {
  int vocab_size = 100;
  int model_dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int context_len = 128;
  int lora_rank = 5;
  double lora_alpha = 5.0;
  std::string lora_targets = "qkvo";
};

void validate(const ModelConfig& config);

struct LoraPair {
  diff::Tensor a;  // rank x dim
  diff::Tensor b;  // dim x rank
};

struct LayerWeights {
  diff::Tensor ln1_gain, ln1_bias;
  diff::Tensor w_q, w_k, w_v, w_o;  // each dim x dim
  diff::Tensor ln2_gain, ln2_bias;
  diff::Tensor w_fc1, b_fc1;  // 4*dim x dim, 4*dim
  diff::Tensor w_fc2, b_fc2;  // dim x 4*dim, dim
  std::array<std::optional<LoraPair>, kNumProj> lora;
};

// Decoder-only transformer weights plus optional LoRA pairs on the attention
// projections. Disabling LoRA recovers the reference model: the backbone is
// the pre-unlearning model and is never touched by the unlearning trainer.
struct ModelState {
  ModelConfig config;
  diff::Tensor tok_embed;  // vocab x dim
  diff::Tensor pos_embed;  // context x dim
  std::vector<LayerWeights> layers;
  diff::Tensor ln_f_gain, ln_f_bias;
  diff::Tensor w_out, b_out;  // vocab x dim, vocab
  bool has_lora = false;
  bool lora_enabled = true;
};

// y = x W^T + (alpha/rank) x A^T B^T for a row batch x[t x d]: the augmented
// projection applied to every row.
diff::Tensor lora_forward(const diff::Tensor& w, const diff::Tensor& a, const diff::Tensor& b, double alpha, int rank,
                          const diff::Tensor& x);

ModelState init_model(const ModelConfig& config, uint64_t seed);
// Replaces any existing pairs with a freshly seeded set (A gaussian with
// variance 1/rank, B zero) and updates the LoRA fields of the config.
void attach_lora(ModelState& state, int rank, double alpha, const std::string& targets, uint64_t seed);
void strip_lora(ModelState& state);

struct NamedParam {
  std::string name;
  diff::Tensor* tensor;
};
// The LoRA pairs of the targeted projections, in forward order. Throws if the
// state has been merged (no LoRA attached).
std::vector<NamedParam> trainable_parameters(ModelState& state);
std::vector<NamedParam> backbone_parameters(ModelState& state);
int64_t trainable_scalar_count(const ModelState& state);

enum class Trainable : uint8_t { kNone, kBackbone, kLora };

// Records one forward pass per call on a shared graph; weight leaves are
// created once and reused across sequences of the same batch.
class ForwardBuilder {
 public:
  ForwardBuilder(diff::Graph& graph, const ModelState& state, bool use_lora, Trainable trainable);
  diff::NodeId log_probs(std::span<const int> tokens);
  const std::vector<std::pair<std::string, diff::NodeId>>& param_nodes() const { return param_nodes_; }

 private:
  diff::NodeId leaf(const diff::Tensor& t, const std::string& name, bool trainable);
  diff::NodeId projection(diff::NodeId x, int layer, Proj p);

  diff::Graph& graph_;
  const ModelState& state_;
  bool use_lora_;
  Trainable trainable_;
  std::map<std::string, diff::NodeId> leaves_;
  std::vector<std::pair<std::string, diff::NodeId>> param_nodes_;
};

// Pure inference pass: builds no gradient bookkeeping. With use_lora=false
// the output is computed from the backbone alone.
diff::Tensor log_probs(const ModelState& state, std::span<const int> tokens, bool use_lora);

// Greedy continuation after the prompt until EOS or max_total tokens.
std::vector<int> greedy_complete(const ModelState& state, std::vector<int> prompt, int max_total, int eos_id,
                                 bool use_lora);

struct MergeResult {
  ModelState state;
  bool already_merged = false;
};
// Folds the LoRA deltas into the backbone: W' = W + (alpha/rank) * B * A.
MergeResult merge_lora(const ModelState& state);

void save_checkpoint(const ModelState& state, const std::string& stem,
                     const std::map<std::string, std::string>& meta = {});
struct Checkpoint {
  ModelState state;
  std::map<std::string, std::string> meta;
};
Checkpoint load_checkpoint(const std::string& stem);

}  // namespace unlearn::model
