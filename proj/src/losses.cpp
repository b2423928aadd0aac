#include "unlearn/losses.hpp"

#include <cmath>

namespace unlearn::losses {

namespace {

using corpus::Encoded;
using diff::Graph;
using diff::NodeId;
using diff::Tensor;

double stable_sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

int64_t masked_count(const Encoded& e) {
  int64_t n = 0;
  for (uint8_t m : e.mask) n += (m != 0);
  return n;
}

// Weighted combination of per-sequence means into one per-token mean:
// sum_i(mean_i * n_i) / sum_i(n_i), composed on the graph.
NodeId token_mean(Graph& g, std::span<const NodeId> per_seq_means, std::span<const int64_t> counts) {
  NodeId acc = -1;
  int64_t total = 0;
  for (size_t i = 0; i < per_seq_means.size(); ++i) {
    const NodeId weighted = g.scale(per_seq_means[i], static_cast<double>(counts[i]));
    acc = (acc < 0) ? weighted : g.add(acc, weighted);
    total += counts[i];
  }
  return g.scale(acc, 1.0 / static_cast<double>(total));
}

struct NpoParts {
  NodeId loss;          // per-token mean over the batch
  double mean_weight;   // mean 2*sigma(beta*z) over completion tokens
};

// NPO term for one batch: z = log pi_theta(y) - log pi_ref(y) per completion
// token, term = (2/beta) log(1 + exp(beta z)).
NpoParts build_npo(Graph& g, model::ForwardBuilder& fb, const model::ModelState& state, Batch forget, double beta) {
  std::vector<NodeId> means;
  std::vector<int64_t> counts;
  double weight_sum = 0.0;
  int64_t weight_n = 0;
  for (const Encoded& e : forget) {
    const NodeId lp = fb.log_probs(e.tokens);
    const NodeId pred = g.slice_rows(lp, 0, static_cast<int>(e.targets.size()));
    const NodeId picked = g.gather_targets(pred, e.targets);
    Tensor ref = model::log_probs(state, e.tokens, /*use_lora=*/false);
    Tensor ref_picked = Tensor::zeros({static_cast<int>(e.targets.size())});
    for (size_t t = 0; t < e.targets.size(); ++t) {
      ref_picked.data[t] = ref.at(static_cast<int>(t), e.targets[t]);
    }
    const NodeId z = g.sub(picked, g.input(std::move(ref_picked)));
    for (size_t t = 0; t < e.mask.size(); ++t) {
      if (!e.mask[t]) continue;
      weight_sum += 2.0 * stable_sigmoid(beta * g.value(z).data[t]);
      ++weight_n;
    }
    means.push_back(g.masked_mean(g.scaled_log1p_exp(z, beta), e.mask));
    counts.push_back(masked_count(e));
  }
  NpoParts parts;
  parts.loss = token_mean(g, means, counts);
  parts.mean_weight = weight_n > 0 ? weight_sum / static_cast<double>(weight_n) : 0.0;
  return parts;
}

// Mean completion-token NLL of a batch under the LoRA-enabled model.
NodeId build_nll(Graph& g, model::ForwardBuilder& fb, Batch batch) {
  std::vector<NodeId> means;
  std::vector<int64_t> counts;
  for (const Encoded& e : batch) {
    const NodeId lp = fb.log_probs(e.tokens);
    const NodeId pred = g.slice_rows(lp, 0, static_cast<int>(e.targets.size()));
    means.push_back(g.cross_entropy(pred, e.targets, e.mask));
    counts.push_back(masked_count(e));
  }
  return token_mean(g, means, counts);
}

NodeId build_kl(Graph& g, model::ForwardBuilder& fb, const model::ModelState& state, Batch retain) {
  std::vector<NodeId> means;
  std::vector<int64_t> counts;
  for (const Encoded& e : retain) {
    const int rows = static_cast<int>(e.targets.size());
    const NodeId lp = fb.log_probs(e.tokens);
    const NodeId pred = g.slice_rows(lp, 0, rows);
    Tensor ref = model::log_probs(state, e.tokens, /*use_lora=*/false);
    Tensor ref_pred = Tensor::zeros({rows, ref.cols()});
    std::copy(ref.data.begin(), ref.data.begin() + static_cast<int64_t>(rows) * ref.cols(), ref_pred.data.begin());
    means.push_back(g.kl_to_ref(pred, g.input(std::move(ref_pred)), e.mask));
    counts.push_back(masked_count(e));
  }
  return token_mean(g, means, counts);
}

std::vector<GradVec> collect_grads(Graph& g, const model::ForwardBuilder& fb) {
  std::vector<GradVec> out;
  out.reserve(fb.param_nodes().size());
  for (const auto& [name, id] : fb.param_nodes()) {
    out.push_back({name, g.grad_or_zeros(id)});
  }
  return out;
}

void check_nonempty(Batch batch, const char* which) {
  if (batch.empty()) throw ContractError(std::string(which) + " batch must be nonempty");
}

}  // namespace

BatchResult combined_loss(const model::ModelState& state, Batch forget, Batch retain, const LossConfig& cfg,
                          bool with_grads) {
  check_nonempty(forget, "forget");
  check_nonempty(retain, "retain");
  if (!(cfg.beta > 0.0)) throw ContractError("loss beta must be > 0");
  if (cfg.gamma < 0.0 || cfg.delta < 0.0) throw ContractError("loss gamma/delta must be >= 0");

  Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, with_grads ? model::Trainable::kLora : model::Trainable::kNone);

  const NpoParts npo = build_npo(g, fb, state, forget, cfg.beta);
  const NodeId l_rt = build_nll(g, fb, retain);
  const NodeId k_rt = build_kl(g, fb, state, retain);
  const NodeId combined = g.add(g.add(npo.loss, g.scale(l_rt, cfg.gamma)), g.scale(k_rt, cfg.delta));

  BatchResult res;
  res.breakdown.l_npo = g.value(npo.loss).data[0];
  res.breakdown.l_rt = g.value(l_rt).data[0];
  res.breakdown.k_rt = g.value(k_rt).data[0];
  res.breakdown.combined = g.value(combined).data[0];
  for (const Encoded& e : forget) res.breakdown.n_forget_tokens += masked_count(e);
  for (const Encoded& e : retain) res.breakdown.n_retain_tokens += masked_count(e);
  res.mean_npo_weight = npo.mean_weight;
  if (with_grads) {
    g.backward(combined);
    res.grads = collect_grads(g, fb);
  }
  return res;
}

double ga_loss(const model::ModelState& state, Batch forget) {
  check_nonempty(forget, "forget");
  Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kNone);
  return g.value(g.scale(build_nll(g, fb, forget), -1.0)).data[0];
}

double npo_loss(const model::ModelState& state, Batch forget, double beta) {
  check_nonempty(forget, "forget");
  if (!(beta > 0.0)) throw ContractError("npo beta must be > 0");
  Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kNone);
  return g.value(build_npo(g, fb, state, forget, beta).loss).data[0];
}

double retain_loss(const model::ModelState& state, Batch retain) {
  check_nonempty(retain, "retain");
  Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kNone);
  return g.value(build_nll(g, fb, retain)).data[0];
}

double kl_retain(const model::ModelState& state, Batch retain) {
  check_nonempty(retain, "retain");
  Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kNone);
  return g.value(build_kl(g, fb, state, retain)).data[0];
}

LossGrads ga_loss_with_grads(const model::ModelState& state, Batch forget) {
  check_nonempty(forget, "forget");
  Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kLora);
  const NodeId loss = g.scale(build_nll(g, fb, forget), -1.0);
  g.backward(loss);
  return {g.value(loss).data[0], collect_grads(g, fb)};
}

LossGrads npo_loss_with_grads(const model::ModelState& state, Batch forget, double beta) {
  check_nonempty(forget, "forget");
  if (!(beta > 0.0)) throw ContractError("npo beta must be > 0");
  Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kLora);
  const NodeId loss = build_npo(g, fb, state, forget, beta).loss;
  g.backward(loss);
  return {g.value(loss).data[0], collect_grads(g, fb)};
}

}  // namespace unlearn::losses
