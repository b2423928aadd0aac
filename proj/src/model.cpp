#include "unlearn/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "kernels.hpp"

namespace unlearn::model {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

diff::Tensor gaussian(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  diff::Tensor t = diff::Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }

// Canonical (name, tensor) walk used by the checkpoint format, parameter
// listings and initialization, so all three agree on ordering.
template <typename State, typename Fn>
void for_each_tensor(State& state, Fn&& fn) {
  fn("tok_embed", state.tok_embed);
  fn("pos_embed", state.pos_embed);
  for (size_t l = 0; l < state.layers.size(); ++l) {
    auto& lw = state.layers[l];
    const std::string p = layer_prefix(static_cast<int>(l));
    fn(p + "ln1_gain", lw.ln1_gain);
    fn(p + "ln1_bias", lw.ln1_bias);
    fn(p + "w_q", lw.w_q);
    fn(p + "w_k", lw.w_k);
    fn(p + "w_v", lw.w_v);
    fn(p + "w_o", lw.w_o);
    fn(p + "ln2_gain", lw.ln2_gain);
    fn(p + "ln2_bias", lw.ln2_bias);
    fn(p + "w_fc1", lw.w_fc1);
    fn(p + "b_fc1", lw.b_fc1);
    fn(p + "w_fc2", lw.w_fc2);
    fn(p + "b_fc2", lw.b_fc2);
  }
  fn("ln_f_gain", state.ln_f_gain);
  fn("ln_f_bias", state.ln_f_bias);
  fn("w_out", state.w_out);
  fn("b_out", state.b_out);
}

template <typename State, typename Fn>
void for_each_lora_tensor(State& state, Fn&& fn) {
  for (size_t l = 0; l < state.layers.size(); ++l) {
    auto& lw = state.layers[l];
    for (int p = 0; p < kNumProj; ++p) {
      if (!lw.lora[p]) continue;
      const std::string prefix = layer_prefix(static_cast<int>(l)) + "lora." + proj_letter(static_cast<Proj>(p));
      fn(prefix + ".a", lw.lora[p]->a);
      fn(prefix + ".b", lw.lora[p]->b);
    }
  }
}

diff::Tensor& layer_weight(LayerWeights& lw, Proj p) {
  switch (p) {
    case Proj::kQ: return lw.w_q;
    case Proj::kK: return lw.w_k;
    case Proj::kV: return lw.w_v;
    case Proj::kO: return lw.w_o;
  }
  throw ContractError("bad projection");
}

const diff::Tensor& layer_weight(const LayerWeights& lw, Proj p) {
  return layer_weight(const_cast<LayerWeights&>(lw), p);
}

}  // namespace

char proj_letter(Proj p) {
  switch (p) {
    case Proj::kQ: return 'q';
    case Proj::kK: return 'k';
    case Proj::kV: return 'v';
    case Proj::kO: return 'o';
  }
  throw ContractError("bad projection");
}

std::vector<Proj> parse_targets(const std::string& targets) {
  std::vector<Proj> out;
  for (char c : targets) {
    Proj p;
    switch (c) {
      case 'q': p = Proj::kQ; break;
      case 'k': p = Proj::kK; break;
      case 'v': p = Proj::kV; break;
      case 'o': p = Proj::kO; break;
      default: throw ConfigError(std::string("lora_targets may only contain qkvo, got '") + c + "'");
    }
    if (std::find(out.begin(), out.end(), p) != out.end()) {
      throw ConfigError(std::string("duplicate lora target '") + c + "'");
    }
    out.push_back(p);
  }
  return out;
}

diff::Tensor lora_forward(const diff::Tensor& w, const diff::Tensor& a, const diff::Tensor& b, double alpha, int rank,
                          const diff::Tensor& x) {
  if (rank < 1 || !(alpha > 0.0)) throw ContractError("lora_forward needs rank >= 1 and alpha > 0");
  const int d_out = w.rows();
  const int d_in = w.cols();
  if (x.rank() != 2 || x.cols() != d_in || a.rank() != 2 || a.rows() != rank || a.cols() != d_in || b.rank() != 2 ||
      b.rows() != d_out || b.cols() != rank) {
    throw DimensionError("lora_forward shape mismatch: w " + w.shape_str() + " a " + a.shape_str() + " b " +
                         b.shape_str() + " x " + x.shape_str());
  }
  const int t = x.rows();
  diff::Tensor y = diff::Tensor::zeros({t, d_out});
  diff::kern::mm_nt(x.data.data(), w.data.data(), y.data.data(), t, d_in, d_out);
  diff::Tensor xa = diff::Tensor::zeros({t, rank});
  diff::kern::mm_nt(x.data.data(), a.data.data(), xa.data.data(), t, d_in, rank);
  diff::Tensor delta = diff::Tensor::zeros({t, d_out});
  diff::kern::mm_nt(xa.data.data(), b.data.data(), delta.data.data(), t, rank, d_out);
  const double factor = alpha / rank;
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += factor * delta.data[i];
  return y;
}

void validate(const ModelConfig& c) {
  if (c.vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (c.model_dim < 1 || c.n_layers < 1 || c.n_heads < 1 || c.context_len < 4) {
    throw ConfigError("model dimensions must be positive (context_len >= 4)");
  }
  if (c.model_dim % c.n_heads != 0) throw ConfigError("model_dim must be divisible by n_heads");
  if (c.lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
  if (c.lora_rank > c.model_dim) throw ConfigError("lora_rank must be <= model_dim");
  if (!(c.lora_alpha > 0.0)) throw ConfigError("lora_alpha must be > 0");
  parse_targets(c.lora_targets);
}

ModelState init_model(const ModelConfig& config, uint64_t seed) {
  validate(config);
  ModelState s;
  s.config = config;
  const int d = config.model_dim;
  const int hidden = 4 * d;
  std::mt19937_64 rng(seed);
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));

  s.tok_embed = gaussian({config.vocab_size, d}, 0.1, rng);
  s.pos_embed = gaussian({config.context_len, d}, 0.05, rng);
  s.layers.resize(static_cast<size_t>(config.n_layers));
  for (LayerWeights& lw : s.layers) {
    lw.ln1_gain = diff::Tensor::full({d}, 1.0);
    lw.ln1_bias = diff::Tensor::zeros({d});
    lw.w_q = gaussian({d, d}, w_std, rng);
    lw.w_k = gaussian({d, d}, w_std, rng);
    lw.w_v = gaussian({d, d}, w_std, rng);
    lw.w_o = gaussian({d, d}, w_std, rng);
    lw.ln2_gain = diff::Tensor::full({d}, 1.0);
    lw.ln2_bias = diff::Tensor::zeros({d});
    lw.w_fc1 = gaussian({hidden, d}, w_std, rng);
    lw.b_fc1 = diff::Tensor::zeros({hidden});
    lw.w_fc2 = gaussian({d, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    lw.b_fc2 = diff::Tensor::zeros({d});
  }
  s.ln_f_gain = diff::Tensor::full({d}, 1.0);
  s.ln_f_bias = diff::Tensor::zeros({d});
  s.w_out = gaussian({config.vocab_size, d}, w_std, rng);
  s.b_out = diff::Tensor::zeros({config.vocab_size});

  attach_lora(s, config.lora_rank, config.lora_alpha, config.lora_targets, seed ^ 0x517cc1b727220a95ull);
  return s;
}

void attach_lora(ModelState& state, int rank, double alpha, const std::string& targets, uint64_t seed) {
  ModelConfig updated = state.config;
  updated.lora_rank = rank;
  updated.lora_alpha = alpha;
  updated.lora_targets = targets;
  validate(updated);
  state.config = updated;

  const int d = state.config.model_dim;
  std::mt19937_64 rng(seed);
  const std::vector<Proj> target_list = parse_targets(targets);
  const double a_std = 1.0 / std::sqrt(static_cast<double>(rank));
  for (LayerWeights& lw : state.layers) {
    lw.lora = {};
    for (Proj p : target_list) {
      LoraPair pair;
      pair.a = gaussian({rank, d}, a_std, rng);
      pair.b = diff::Tensor::zeros({d, rank});
      lw.lora[static_cast<int>(p)] = std::move(pair);
    }
  }
  state.has_lora = true;
  state.lora_enabled = true;
}

void strip_lora(ModelState& state) {
  for (LayerWeights& lw : state.layers) lw.lora = {};
  state.has_lora = false;
}

std::vector<NamedParam> trainable_parameters(ModelState& state) {
  if (!state.has_lora) {
    throw ContractError("state has no LoRA attached (merged or stripped); nothing is trainable");
  }
  std::vector<NamedParam> out;
  for_each_lora_tensor(state, [&](const std::string& name, diff::Tensor& t) { out.push_back({name, &t}); });
  return out;
}

std::vector<NamedParam> backbone_parameters(ModelState& state) {
  std::vector<NamedParam> out;
  for_each_tensor(state, [&](const std::string& name, diff::Tensor& t) { out.push_back({name, &t}); });
  return out;
}

int64_t trainable_scalar_count(const ModelState& state) {
  int64_t n = 0;
  for_each_lora_tensor(const_cast<ModelState&>(state),
                       [&](const std::string&, diff::Tensor& t) { n += t.numel(); });
  return n;
}

ForwardBuilder::ForwardBuilder(diff::Graph& graph, const ModelState& state, bool use_lora, Trainable trainable)
    : graph_(graph), state_(state), use_lora_(use_lora), trainable_(trainable) {}

diff::NodeId ForwardBuilder::leaf(const diff::Tensor& t, const std::string& name, bool trainable) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  const diff::NodeId id = trainable ? graph_.param(t) : graph_.input(t);
  leaves_.emplace(name, id);
  if (trainable) param_nodes_.emplace_back(name, id);
  return id;
}

diff::NodeId ForwardBuilder::projection(diff::NodeId x, int layer, Proj p) {
  const LayerWeights& lw = state_.layers[static_cast<size_t>(layer)];
  const std::string prefix = layer_prefix(layer);
  const std::string wname = prefix + "w_" + proj_letter(p);
  diff::NodeId y = graph_.linear(x, leaf(layer_weight(lw, p), wname, trainable_ == Trainable::kBackbone));
  const auto& pair = lw.lora[static_cast<int>(p)];
  if (use_lora_ && state_.has_lora && pair) {
    const std::string lname = prefix + "lora." + proj_letter(p);
    const bool lora_trainable = trainable_ == Trainable::kLora;
    const diff::NodeId a = leaf(pair->a, lname + ".a", lora_trainable);
    const diff::NodeId b = leaf(pair->b, lname + ".b", lora_trainable);
    diff::NodeId delta = graph_.linear(graph_.linear(x, a), b);
    y = graph_.add(y, graph_.scale(delta, state_.config.lora_alpha / state_.config.lora_rank));
  }
  return y;
}

diff::NodeId ForwardBuilder::log_probs(std::span<const int> tokens) {
  const ModelConfig& cfg = state_.config;
  const int t = static_cast<int>(tokens.size());
  if (t < 1) throw ContractError("log_probs needs at least one token");
  if (t > cfg.context_len) {
    throw DimensionError("sequence of " + std::to_string(t) + " tokens exceeds context length " +
                         std::to_string(cfg.context_len));
  }
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
  }
  const bool backbone_trainable = trainable_ == Trainable::kBackbone;
  std::vector<int> ids(tokens.begin(), tokens.end());
  std::vector<int> positions(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;

  diff::NodeId x = graph_.add(graph_.embedding(leaf(state_.tok_embed, "tok_embed", backbone_trainable), ids),
                              graph_.embedding(leaf(state_.pos_embed, "pos_embed", backbone_trainable), positions));

  const int dh = cfg.model_dim / cfg.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = state_.layers[static_cast<size_t>(l)];
    const std::string p = layer_prefix(l);
    diff::NodeId h = graph_.layer_norm(x, leaf(lw.ln1_gain, p + "ln1_gain", backbone_trainable),
                                       leaf(lw.ln1_bias, p + "ln1_bias", backbone_trainable));
    const diff::NodeId q = projection(h, l, Proj::kQ);
    const diff::NodeId k = projection(h, l, Proj::kK);
    const diff::NodeId v = projection(h, l, Proj::kV);
    std::vector<diff::NodeId> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const diff::NodeId qh = graph_.slice_cols(q, hd * dh, dh);
      const diff::NodeId kh = graph_.slice_cols(k, hd * dh, dh);
      const diff::NodeId vh = graph_.slice_cols(v, hd * dh, dh);
      const diff::NodeId scores = graph_.scale(graph_.matmul(qh, graph_.transpose(kh)), inv_sqrt_dh);
      heads.push_back(graph_.matmul(graph_.causal_softmax(scores), vh));
    }
    const diff::NodeId ctx = graph_.concat_cols(heads);
    x = graph_.add(x, projection(ctx, l, Proj::kO));

    diff::NodeId h2 = graph_.layer_norm(x, leaf(lw.ln2_gain, p + "ln2_gain", backbone_trainable),
                                        leaf(lw.ln2_bias, p + "ln2_bias", backbone_trainable));
    diff::NodeId m = graph_.add_row_bias(graph_.linear(h2, leaf(lw.w_fc1, p + "w_fc1", backbone_trainable)),
                                         leaf(lw.b_fc1, p + "b_fc1", backbone_trainable));
    m = graph_.gelu(m);
    m = graph_.add_row_bias(graph_.linear(m, leaf(lw.w_fc2, p + "w_fc2", backbone_trainable)),
                            leaf(lw.b_fc2, p + "b_fc2", backbone_trainable));
    x = graph_.add(x, m);
  }
  x = graph_.layer_norm(x, leaf(state_.ln_f_gain, "ln_f_gain", backbone_trainable),
                        leaf(state_.ln_f_bias, "ln_f_bias", backbone_trainable));
  const diff::NodeId logits = graph_.add_row_bias(graph_.linear(x, leaf(state_.w_out, "w_out", backbone_trainable)),
                                                  leaf(state_.b_out, "b_out", backbone_trainable));
  return graph_.log_softmax(logits);
}

diff::Tensor log_probs(const ModelState& state, std::span<const int> tokens, bool use_lora) {
  diff::Graph g;
  ForwardBuilder fb(g, state, use_lora, Trainable::kNone);
  return g.value(fb.log_probs(tokens));
}

std::vector<int> greedy_complete(const ModelState& state, std::vector<int> prompt, int max_total, int eos_id,
                                 bool use_lora) {
  if (prompt.empty()) throw ContractError("greedy_complete needs a nonempty prompt");
  max_total = std::min(max_total, state.config.context_len);
  std::vector<int> generated;
  while (static_cast<int>(prompt.size()) < max_total) {
    const diff::Tensor lp = log_probs(state, prompt, use_lora);
    const int v = lp.cols();
    const int last = lp.rows() - 1;
    int best = 0;
    double best_lp = lp.at(last, 0);
    for (int j = 1; j < v; ++j) {
      if (lp.at(last, j) > best_lp) {
        best_lp = lp.at(last, j);
        best = j;
      }
    }
    if (best == eos_id) break;
    generated.push_back(best);
    prompt.push_back(best);
  }
  return generated;
}

MergeResult merge_lora(const ModelState& state) {
  MergeResult res;
  res.state = state;
  if (!state.has_lora) {
    res.already_merged = true;
    return res;
  }
  const int d = state.config.model_dim;
  const int r = state.config.lora_rank;
  const double factor = state.config.lora_alpha / state.config.lora_rank;
  for (LayerWeights& lw : res.state.layers) {
    for (int p = 0; p < kNumProj; ++p) {
      if (!lw.lora[p]) continue;
      const LoraPair& pair = *lw.lora[p];
      // delta = B[d x r] . A[r x d]
      std::vector<double> delta(static_cast<size_t>(d) * d, 0.0);
      diff::kern::mm_nn(pair.b.data.data(), pair.a.data.data(), delta.data(), d, r, d);
      diff::Tensor& w = layer_weight(lw, static_cast<Proj>(p));
      for (size_t i = 0; i < delta.size(); ++i) w.data[i] += factor * delta[i];
    }
  }
  strip_lora(res.state);
  return res;
}

namespace {

struct TensorEntry {
  std::string name;
  const diff::Tensor* tensor;
};

std::vector<TensorEntry> checkpoint_tensors(const ModelState& state) {
  std::vector<TensorEntry> entries;
  auto& mutable_state = const_cast<ModelState&>(state);
  for_each_tensor(mutable_state, [&](const std::string& name, diff::Tensor& t) { entries.push_back({name, &t}); });
  for_each_lora_tensor(mutable_state, [&](const std::string& name, diff::Tensor& t) { entries.push_back({name, &t}); });
  return entries;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& stem,
                     const std::map<std::string, std::string>& meta) {
  const ModelConfig& c = state.config;
  std::ostringstream manifest;
  manifest << "unlearn-checkpoint v1\n";
  manifest << "key vocab_size " << c.vocab_size << "\n";
  manifest << "key model_dim " << c.model_dim << "\n";
  manifest << "key n_layers " << c.n_layers << "\n";
  manifest << "key n_heads " << c.n_heads << "\n";
  manifest << "key context_len " << c.context_len << "\n";
  manifest << "key lora_rank " << c.lora_rank << "\n";
  manifest << "key lora_alpha " << format_double(c.lora_alpha) << "\n";
  manifest << "key lora_targets " << (c.lora_targets.empty() ? "-" : c.lora_targets) << "\n";
  manifest << "key has_lora " << (state.has_lora ? 1 : 0) << "\n";
  manifest << "key lora_enabled " << (state.lora_enabled ? 1 : 0) << "\n";
  for (const auto& [k, v] : meta) manifest << "meta " << k << " " << v << "\n";

  std::ofstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + stem + ".bin for writing");
  uint64_t offset = 0;
  for (const TensorEntry& e : checkpoint_tensors(state)) {
    manifest << "tensor " << e.name << " " << e.tensor->shape[0];
    for (size_t i = 1; i < e.tensor->shape.size(); ++i) manifest << "x" << e.tensor->shape[i];
    manifest << " " << offset << "\n";
    bin.write(reinterpret_cast<const char*>(e.tensor->data.data()),
              static_cast<std::streamsize>(e.tensor->data.size() * sizeof(double)));
    offset += e.tensor->data.size() * sizeof(double);
  }
  if (!bin) throw IoError("failed while writing " + stem + ".bin");
  bin.close();

  std::ofstream mf(stem + ".manifest", std::ios::binary);
  if (!mf) throw IoError("cannot open " + stem + ".manifest for writing");
  mf << manifest.str();
  if (!mf) throw IoError("failed while writing " + stem + ".manifest");
}

Checkpoint load_checkpoint(const std::string& stem) {
  std::ifstream mf(stem + ".manifest", std::ios::binary);
  if (!mf) throw IoError("cannot open " + stem + ".manifest");
  std::string line;
  if (!std::getline(mf, line) || line != "unlearn-checkpoint v1") {
    throw ParseError(stem + ".manifest: bad or missing format header");
  }

  std::map<std::string, std::string> keys;
  Checkpoint out;
  struct PendingTensor {
    std::string name;
    std::vector<int> shape;
    uint64_t offset;
  };
  std::vector<PendingTensor> tensors;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "key") {
      std::string k, v;
      ls >> k >> v;
      keys[k] = v;
    } else if (kind == "meta") {
      std::string k;
      ls >> k;
      std::string v;
      std::getline(ls, v);
      if (!v.empty() && v.front() == ' ') v.erase(v.begin());
      out.meta[k] = v;
    } else if (kind == "tensor") {
      PendingTensor pt;
      std::string shape_str;
      ls >> pt.name >> shape_str >> pt.offset;
      std::istringstream ss(shape_str);
      std::string dim;
      while (std::getline(ss, dim, 'x')) pt.shape.push_back(std::stoi(dim));
      tensors.push_back(std::move(pt));
    } else {
      throw ParseError(stem + ".manifest: unknown record '" + kind + "'");
    }
  }
  auto need = [&](const char* k) -> const std::string& {
    auto it = keys.find(k);
    if (it == keys.end()) throw ParseError(stem + ".manifest: missing key " + std::string(k));
    return it->second;
  };

  ModelConfig cfg;
  cfg.vocab_size = std::stoi(need("vocab_size"));
  cfg.model_dim = std::stoi(need("model_dim"));
  cfg.n_layers = std::stoi(need("n_layers"));
  cfg.n_heads = std::stoi(need("n_heads"));
  cfg.context_len = std::stoi(need("context_len"));
  cfg.lora_rank = std::stoi(need("lora_rank"));
  cfg.lora_alpha = std::stod(need("lora_alpha"));
  cfg.lora_targets = need("lora_targets");
  if (cfg.lora_targets == "-") cfg.lora_targets.clear();

  ModelState state;
  state.config = cfg;
  state.has_lora = need("has_lora") == "1";
  state.lora_enabled = need("lora_enabled") == "1";
  state.layers.resize(static_cast<size_t>(cfg.n_layers));
  if (state.has_lora) {
    // Shape the optional pairs so the canonical walk visits them.
    for (LayerWeights& lw : state.layers) {
      for (Proj p : parse_targets(cfg.lora_targets)) {
        lw.lora[static_cast<int>(p)] = LoraPair{diff::Tensor::zeros({cfg.lora_rank, cfg.model_dim}),
                                                diff::Tensor::zeros({cfg.model_dim, cfg.lora_rank})};
      }
    }
  }

  std::ifstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + stem + ".bin");
  std::map<std::string, PendingTensor*> by_name;
  for (PendingTensor& pt : tensors) by_name[pt.name] = &pt;

  auto load_tensor = [&](const std::string& name, diff::Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError(stem + ".manifest: missing tensor " + name);
    const PendingTensor& pt = *it->second;
    t = diff::Tensor::zeros(pt.shape);
    bin.seekg(static_cast<std::streamoff>(pt.offset));
    bin.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!bin) throw IoError(stem + ".bin: truncated while reading tensor " + name);
  };
  for_each_tensor(state, load_tensor);
  for_each_lora_tensor(state, load_tensor);

  size_t expected = checkpoint_tensors(state).size();
  if (expected != tensors.size()) {
    throw ParseError(stem + ".manifest: tensor count mismatch (" + std::to_string(tensors.size()) + " listed, " +
                     std::to_string(expected) + " expected)");
  }
  out.state = std::move(state);
  return out;
}

}  // namespace unlearn::model
