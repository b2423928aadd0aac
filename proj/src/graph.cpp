#include "unlearn/graph.hpp"

#include <cmath>
#include <cstring>

#include "kernels.hpp"

namespace unlearn::diff {

namespace {

constexpr double kLayerNormEps = 1e-5;

double stable_sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

// log(1 + exp(u)) without overflow on either side.
double stable_log1p_exp(double u) {
  if (u > 0.0) return u + std::log1p(std::exp(-u));
  return std::log1p(std::exp(u));
}

int64_t masked_count(const std::vector<uint8_t>& mask) {
  int64_t n = 0;
  for (uint8_t m : mask) n += (m != 0);
  return n;
}

#ifndef NDEBUG
void debug_check_finite(const Tensor& t, const char* op_name) {
  for (double v : t.data) {
    if (!std::isfinite(v)) throw ContractError(std::string("non-finite value produced by ") + op_name);
  }
}
#define UNLEARN_CHECK_FINITE(t, name) debug_check_finite((t), (name))
#else
#define UNLEARN_CHECK_FINITE(t, name) ((void)0)
#endif

}  // namespace

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::check(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw ContractError("node id out of range");
  return id;
}

std::vector<double>& Graph::ensure_grad(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.val.numel()), 0.0);
  return n.grad;
}

std::vector<double> Graph::grad_or_zeros(NodeId id) const {
  const Node& n = nodes_[check(id)];
  if (!n.grad.empty()) return n.grad;
  return std::vector<double>(static_cast<size_t>(n.val.numel()), 0.0);
}

NodeId Graph::input(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.val = std::move(t);
  n.needs_grad = false;
  return push(std::move(n));
}

NodeId Graph::param(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.val = std::move(t);
  n.needs_grad = true;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows()) {
    throw DimensionError("matmul shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Node n;
  n.op = Op::kMatMul;
  n.in = {a, b};
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.val = Tensor::zeros({ta.rows(), tb.cols()});
  kern::mm_nn(ta.data.data(), tb.data.data(), n.val.data.data(), ta.rows(), ta.cols(), tb.cols());
  UNLEARN_CHECK_FINITE(n.val, "matmul");
  return push(std::move(n));
}

NodeId Graph::linear(NodeId x, NodeId w) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  if (tx.rank() != 2 || tw.rank() != 2 || tx.cols() != tw.cols()) {
    throw DimensionError("linear shape mismatch: x " + tx.shape_str() + " vs w " + tw.shape_str());
  }
  Node n;
  n.op = Op::kLinear;
  n.in = {x, w};
  n.needs_grad = nodes_[x].needs_grad || nodes_[w].needs_grad;
  n.val = Tensor::zeros({tx.rows(), tw.rows()});
  kern::mm_nt(tx.data.data(), tw.data.data(), n.val.data.data(), tx.rows(), tx.cols(), tw.rows());
  UNLEARN_CHECK_FINITE(n.val, "linear");
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2) throw DimensionError("transpose expects a 2-D tensor, got " + ta.shape_str());
  Node n;
  n.op = Op::kTranspose;
  n.in = {a};
  n.needs_grad = nodes_[a].needs_grad;
  n.val = Tensor::zeros({ta.cols(), ta.rows()});
  for (int i = 0; i < ta.rows(); ++i)
    for (int j = 0; j < ta.cols(); ++j) n.val.at(j, i) = ta.at(i, j);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw DimensionError("add shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  Node n;
  n.op = Op::kAdd;
  n.in = {a, b};
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.val = ta;
  for (size_t i = 0; i < n.val.data.size(); ++i) n.val.data[i] += tb.data[i];
  UNLEARN_CHECK_FINITE(n.val, "add");
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw DimensionError("sub shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  Node n;
  n.op = Op::kSub;
  n.in = {a, b};
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.val = ta;
  for (size_t i = 0; i < n.val.data.size(); ++i) n.val.data[i] -= tb.data[i];
  UNLEARN_CHECK_FINITE(n.val, "sub");
  return push(std::move(n));
}

NodeId Graph::add_row_bias(NodeId x, NodeId bias) {
  const Tensor& tx = val(x);
  const Tensor& tb = val(bias);
  if (tx.rank() != 2 || tb.rank() != 1 || tb.shape[0] != tx.cols()) {
    throw DimensionError("add_row_bias shape mismatch: " + tx.shape_str() + " vs " + tb.shape_str());
  }
  Node n;
  n.op = Op::kAddRowBias;
  n.in = {x, bias};
  n.needs_grad = nodes_[x].needs_grad || nodes_[bias].needs_grad;
  n.val = tx;
  for (int i = 0; i < tx.rows(); ++i)
    for (int j = 0; j < tx.cols(); ++j) n.val.at(i, j) += tb.data[static_cast<size_t>(j)];
  UNLEARN_CHECK_FINITE(n.val, "add_row_bias");
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
  Node n;
  n.op = Op::kScale;
  n.in = {a};
  n.attr = c;
  n.needs_grad = nodes_[a].needs_grad;
  n.val = val(a);
  for (double& v : n.val.data) v *= c;
  UNLEARN_CHECK_FINITE(n.val, "scale");
  return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
  Node n;
  n.op = Op::kGelu;
  n.in = {a};
  n.needs_grad = nodes_[a].needs_grad;
  n.val = val(a);
  for (double& v : n.val.data) {
    const double phi = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
    v = v * phi;
  }
  UNLEARN_CHECK_FINITE(n.val, "gelu");
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gain);
  const Tensor& tb = val(bias);
  if (tx.rank() != 2 || tg.rank() != 1 || tb.rank() != 1 || tg.shape[0] != tx.cols() || tb.shape[0] != tx.cols()) {
    throw DimensionError("layer_norm shape mismatch: x " + tx.shape_str() + " gain " + tg.shape_str() + " bias " +
                         tb.shape_str());
  }
  Node n;
  n.op = Op::kLayerNorm;
  n.in = {x, gain, bias};
  n.needs_grad = nodes_[x].needs_grad || nodes_[gain].needs_grad || nodes_[bias].needs_grad;
  n.val = Tensor::zeros(tx.shape);
  const int d = tx.cols();
  for (int i = 0; i < tx.rows(); ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += tx.at(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = tx.at(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double inv_sd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < d; ++j) {
      n.val.at(i, j) = (tx.at(i, j) - mean) * inv_sd * tg.data[static_cast<size_t>(j)] + tb.data[static_cast<size_t>(j)];
    }
  }
  UNLEARN_CHECK_FINITE(n.val, "layer_norm");
  return push(std::move(n));
}

NodeId Graph::embedding(NodeId table, std::vector<int> ids) {
  const Tensor& tt = val(table);
  if (tt.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + tt.shape_str());
  for (int id : ids) {
    if (id < 0 || id >= tt.rows()) throw ContractError("embedding id " + std::to_string(id) + " out of range");
  }
  Node n;
  n.op = Op::kEmbedding;
  n.in = {table};
  n.needs_grad = nodes_[table].needs_grad;
  n.val = Tensor::zeros({static_cast<int>(ids.size()), tt.cols()});
  for (size_t t = 0; t < ids.size(); ++t) {
    std::memcpy(&n.val.data[t * static_cast<size_t>(tt.cols())],
                &tt.data[static_cast<size_t>(ids[t]) * tt.cols()], sizeof(double) * static_cast<size_t>(tt.cols()));
  }
  n.ints = std::move(ids);
  return push(std::move(n));
}

NodeId Graph::causal_softmax(NodeId scores) {
  const Tensor& ts = val(scores);
  if (ts.rank() != 2 || ts.rows() != ts.cols()) {
    throw DimensionError("causal_softmax expects a square matrix, got " + ts.shape_str());
  }
  Node n;
  n.op = Op::kCausalSoftmax;
  n.in = {scores};
  n.needs_grad = nodes_[scores].needs_grad;
  n.val = Tensor::zeros(ts.shape);
  const int t = ts.rows();
  for (int i = 0; i < t; ++i) {
    double mx = ts.at(i, 0);
    for (int j = 1; j <= i; ++j) mx = std::max(mx, ts.at(i, j));
    double sum = 0.0;
    for (int j = 0; j <= i; ++j) {
      const double e = std::exp(ts.at(i, j) - mx);
      n.val.at(i, j) = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j <= i; ++j) n.val.at(i, j) *= inv;
  }
  UNLEARN_CHECK_FINITE(n.val, "causal_softmax");
  return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId logits) {
  const Tensor& tl = val(logits);
  if (tl.rank() != 2) throw DimensionError("log_softmax expects a 2-D tensor, got " + tl.shape_str());
  Node n;
  n.op = Op::kLogSoftmax;
  n.in = {logits};
  n.needs_grad = nodes_[logits].needs_grad;
  n.val = Tensor::zeros(tl.shape);
  const int v = tl.cols();
  for (int i = 0; i < tl.rows(); ++i) {
    double mx = tl.at(i, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, tl.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(tl.at(i, j) - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < v; ++j) n.val.at(i, j) = tl.at(i, j) - lse;
  }
  UNLEARN_CHECK_FINITE(n.val, "log_softmax");
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId a, int start, int len) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2 || start < 0 || len < 1 || start + len > ta.rows()) {
    throw DimensionError("slice_rows out of bounds for " + ta.shape_str());
  }
  Node n;
  n.op = Op::kSliceRows;
  n.in = {a};
  n.ints = {start, len};
  n.needs_grad = nodes_[a].needs_grad;
  n.val = Tensor::zeros({len, ta.cols()});
  std::memcpy(n.val.data.data(), &ta.data[static_cast<size_t>(start) * ta.cols()],
              sizeof(double) * static_cast<size_t>(len) * ta.cols());
  return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId a, int start, int len) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2 || start < 0 || len < 1 || start + len > ta.cols()) {
    throw DimensionError("slice_cols out of bounds for " + ta.shape_str());
  }
  Node n;
  n.op = Op::kSliceCols;
  n.in = {a};
  n.ints = {start, len};
  n.needs_grad = nodes_[a].needs_grad;
  n.val = Tensor::zeros({ta.rows(), len});
  for (int i = 0; i < ta.rows(); ++i)
    std::memcpy(&n.val.data[static_cast<size_t>(i) * len], &ta.data[static_cast<size_t>(i) * ta.cols() + start],
                sizeof(double) * static_cast<size_t>(len));
  return push(std::move(n));
}

NodeId Graph::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) throw ContractError("concat_cols needs at least one input");
  const int rows = val(parts[0]).rows();
  int total = 0;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    if (tp.rank() != 2 || tp.rows() != rows) throw DimensionError("concat_cols row mismatch");
    total += tp.cols();
  }
  Node n;
  n.op = Op::kConcatCols;
  n.in.assign(parts.begin(), parts.end());
  n.needs_grad = false;
  for (NodeId p : parts) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  n.val = Tensor::zeros({rows, total});
  int off = 0;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    for (int i = 0; i < rows; ++i)
      std::memcpy(&n.val.data[static_cast<size_t>(i) * total + off], &tp.data[static_cast<size_t>(i) * tp.cols()],
                  sizeof(double) * static_cast<size_t>(tp.cols()));
    off += tp.cols();
  }
  return push(std::move(n));
}

NodeId Graph::gather_targets(NodeId logp, std::vector<int> targets) {
  const Tensor& tl = val(logp);
  if (tl.rank() != 2 || static_cast<int>(targets.size()) != tl.rows()) {
    throw DimensionError("gather_targets expects one target per row of " + tl.shape_str());
  }
  for (int t : targets) {
    if (t < 0 || t >= tl.cols()) throw ContractError("target id " + std::to_string(t) + " outside vocabulary");
  }
  Node n;
  n.op = Op::kGatherTargets;
  n.in = {logp};
  n.needs_grad = nodes_[logp].needs_grad;
  n.val = Tensor::zeros({tl.rows()});
  for (int i = 0; i < tl.rows(); ++i) n.val.data[static_cast<size_t>(i)] = tl.at(i, targets[static_cast<size_t>(i)]);
  n.ints = std::move(targets);
  return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logp, std::vector<int> targets, std::vector<uint8_t> mask,
                            double label_smoothing) {
  const Tensor& tl = val(logp);
  if (tl.rank() != 2 || static_cast<int>(targets.size()) != tl.rows() || mask.size() != targets.size()) {
    throw DimensionError("cross_entropy expects one target and mask bit per row of " + tl.shape_str());
  }
  for (int t : targets) {
    if (t < 0 || t >= tl.cols()) throw ContractError("target id " + std::to_string(t) + " outside vocabulary");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ContractError("label_smoothing must be in [0, 1)");
  const int64_t count = masked_count(mask);
  if (count == 0) throw ContractError("cross_entropy over an all-masked sequence");
  Node n;
  n.op = Op::kCrossEntropyMean;
  n.in = {logp};
  n.needs_grad = nodes_[logp].needs_grad;
  n.attr = label_smoothing;
  const double uniform = label_smoothing / tl.cols();
  double sum = 0.0;
  for (int i = 0; i < tl.rows(); ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    sum -= (1.0 - label_smoothing) * tl.at(i, targets[static_cast<size_t>(i)]);
    if (label_smoothing > 0.0) {
      for (int j = 0; j < tl.cols(); ++j) sum -= uniform * tl.at(i, j);
    }
  }
  n.val = Tensor::scalar(sum / static_cast<double>(count));
  n.ints = std::move(targets);
  n.mask = std::move(mask);
  return push(std::move(n));
}

NodeId Graph::masked_mean(NodeId v, std::vector<uint8_t> mask) {
  const Tensor& tv = val(v);
  if (tv.rank() != 1 || mask.size() != tv.data.size()) {
    throw DimensionError("masked_mean expects a vector with one mask bit per entry");
  }
  const int64_t count = masked_count(mask);
  if (count == 0) throw ContractError("masked_mean over an all-masked vector");
  Node n;
  n.op = Op::kMaskedMean;
  n.in = {v};
  n.needs_grad = nodes_[v].needs_grad;
  double sum = 0.0;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) sum += tv.data[i];
  }
  n.val = Tensor::scalar(sum / static_cast<double>(count));
  n.mask = std::move(mask);
  return push(std::move(n));
}

NodeId Graph::scaled_log1p_exp(NodeId z, double beta) {
  if (beta <= 0.0) throw ContractError("scaled_log1p_exp needs beta > 0");
  Node n;
  n.op = Op::kScaledLog1pExp;
  n.in = {z};
  n.attr = beta;
  n.needs_grad = nodes_[z].needs_grad;
  n.val = val(z);
  const double two_over_beta = 2.0 / beta;
  for (double& x : n.val.data) x = two_over_beta * stable_log1p_exp(beta * x);
  UNLEARN_CHECK_FINITE(n.val, "scaled_log1p_exp");
  return push(std::move(n));
}

NodeId Graph::kl_to_ref(NodeId logp, NodeId ref_logp, std::vector<uint8_t> mask) {
  const Tensor& tl = val(logp);
  const Tensor& tr = val(ref_logp);
  if (!tl.same_shape(tr) || tl.rank() != 2 || mask.size() != static_cast<size_t>(tl.rows())) {
    throw DimensionError("kl_to_ref expects matching 2-D log-prob tensors and one mask bit per row");
  }
  if (nodes_[ref_logp].needs_grad) throw ContractError("kl_to_ref reference distribution must be gradient-free");
  const int64_t count = masked_count(mask);
  if (count == 0) throw ContractError("kl_to_ref over an all-masked sequence");
  Node n;
  n.op = Op::kKlToRef;
  n.in = {logp, ref_logp};
  n.needs_grad = nodes_[logp].needs_grad;
  double sum = 0.0;
  for (int i = 0; i < tl.rows(); ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    for (int j = 0; j < tl.cols(); ++j) {
      const double lp = tl.at(i, j);
      sum += std::exp(lp) * (lp - tr.at(i, j));
    }
  }
  n.val = Tensor::scalar(sum / static_cast<double>(count));
  n.mask = std::move(mask);
  return push(std::move(n));
}

NodeId Graph::weighted_sum(NodeId a, std::vector<double> weights) {
  const Tensor& ta = val(a);
  if (static_cast<int64_t>(weights.size()) != ta.numel()) {
    throw DimensionError("weighted_sum needs one weight per element of " + ta.shape_str());
  }
  Node n;
  n.op = Op::kWeightedSum;
  n.in = {a};
  n.needs_grad = nodes_[a].needs_grad;
  double sum = 0.0;
  for (size_t i = 0; i < weights.size(); ++i) sum += weights[i] * ta.data[i];
  n.val = Tensor::scalar(sum);
  n.weights = std::move(weights);
  return push(std::move(n));
}

void Graph::backward(NodeId root) {
  check(root);
  if (!nodes_[root].val.is_scalar()) {
    throw ContractError("backward root must be scalar, got " + nodes_[root].val.shape_str());
  }
  for (Node& n : nodes_) n.grad.clear();
  ensure_grad(root)[0] = 1.0;
  for (NodeId id = root; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (n.op == Op::kLeaf || !n.needs_grad || n.grad.empty()) continue;
    backward_node(id);
  }
}

void Graph::backward_node(NodeId id) {
  Node& n = nodes_[id];
  const std::vector<double>& g = n.grad;
  auto wants = [&](size_t slot) { return nodes_[n.in[slot]].needs_grad; };

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kMatMul: {
      const Tensor& a = val(n.in[0]);
      const Tensor& b = val(n.in[1]);
      const int m = a.rows(), k = a.cols(), c = b.cols();
      if (wants(0)) kern::mm_nt_acc(g.data(), b.data.data(), ensure_grad(n.in[0]).data(), m, c, k);
      if (wants(1)) kern::mm_tn_acc(a.data.data(), g.data(), ensure_grad(n.in[1]).data(), k, m, c);
      break;
    }
    case Op::kLinear: {
      const Tensor& x = val(n.in[0]);
      const Tensor& w = val(n.in[1]);
      const int t = x.rows(), in = x.cols(), out = w.rows();
      if (wants(0)) kern::mm_nn_acc(g.data(), w.data.data(), ensure_grad(n.in[0]).data(), t, out, in);
      if (wants(1)) kern::mm_tn_acc(g.data(), x.data.data(), ensure_grad(n.in[1]).data(), out, t, in);
      break;
    }
    case Op::kTranspose: {
      if (!wants(0)) break;
      const Tensor& a = val(n.in[0]);
      std::vector<double>& da = ensure_grad(n.in[0]);
      const int r = a.rows(), c = a.cols();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) da[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
      break;
    }
    case Op::kAdd: {
      for (size_t slot = 0; slot < 2; ++slot) {
        if (!wants(slot)) continue;
        std::vector<double>& d = ensure_grad(n.in[slot]);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      break;
    }
    case Op::kSub: {
      if (wants(0)) {
        std::vector<double>& d = ensure_grad(n.in[0]);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (wants(1)) {
        std::vector<double>& d = ensure_grad(n.in[1]);
        for (size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
      break;
    }
    case Op::kAddRowBias: {
      const Tensor& x = val(n.in[0]);
      const int r = x.rows(), c = x.cols();
      if (wants(0)) {
        std::vector<double>& d = ensure_grad(n.in[0]);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (wants(1)) {
        std::vector<double>& d = ensure_grad(n.in[1]);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) d[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j];
      }
      break;
    }
    case Op::kScale: {
      if (!wants(0)) break;
      std::vector<double>& d = ensure_grad(n.in[0]);
      for (size_t i = 0; i < g.size(); ++i) d[i] += n.attr * g[i];
      break;
    }
    case Op::kGelu: {
      if (!wants(0)) break;
      const Tensor& x = val(n.in[0]);
      std::vector<double>& d = ensure_grad(n.in[0]);
      constexpr double kInvSqrt2Pi = 0.3989422804014327;
      for (size_t i = 0; i < g.size(); ++i) {
        const double v = x.data[i];
        const double phi = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        d[i] += g[i] * (phi + v * pdf);
      }
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& x = val(n.in[0]);
      const Tensor& gain = val(n.in[1]);
      const int r = x.rows(), c = x.cols();
      for (int i = 0; i < r; ++i) {
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += x.at(i, j);
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
          const double dv = x.at(i, j) - mean;
          var += dv * dv;
        }
        var /= c;
        const double inv_sd = 1.0 / std::sqrt(var + kLayerNormEps);
        // dxhat, plus the two row means needed for the input gradient
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int j = 0; j < c; ++j) {
          const double xhat = (x.at(i, j) - mean) * inv_sd;
          const double go = g[static_cast<size_t>(i) * c + j];
          const double dxhat = go * gain.data[static_cast<size_t>(j)];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= c;
        mean_dxhat_xhat /= c;
        if (wants(0)) {
          std::vector<double>& dx = ensure_grad(n.in[0]);
          for (int j = 0; j < c; ++j) {
            const double xhat = (x.at(i, j) - mean) * inv_sd;
            const double go = g[static_cast<size_t>(i) * c + j];
            const double dxhat = go * gain.data[static_cast<size_t>(j)];
            dx[static_cast<size_t>(i) * c + j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_sd;
          }
        }
        if (wants(1)) {
          std::vector<double>& dg = ensure_grad(n.in[1]);
          for (int j = 0; j < c; ++j) {
            const double xhat = (x.at(i, j) - mean) * inv_sd;
            dg[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j] * xhat;
          }
        }
        if (wants(2)) {
          std::vector<double>& db = ensure_grad(n.in[2]);
          for (int j = 0; j < c; ++j) db[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j];
        }
      }
      break;
    }
    case Op::kEmbedding: {
      if (!wants(0)) break;
      const Tensor& table = val(n.in[0]);
      std::vector<double>& dt = ensure_grad(n.in[0]);
      const int c = table.cols();
      for (size_t t = 0; t < n.ints.size(); ++t) {
        double* row = &dt[static_cast<size_t>(n.ints[t]) * c];
        const double* grow = &g[t * static_cast<size_t>(c)];
        for (int j = 0; j < c; ++j) row[j] += grow[j];
      }
      break;
    }
    case Op::kCausalSoftmax: {
      if (!wants(0)) break;
      const Tensor& p = n.val;
      std::vector<double>& ds = ensure_grad(n.in[0]);
      const int t = p.rows();
      for (int i = 0; i < t; ++i) {
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += g[static_cast<size_t>(i) * t + j] * p.at(i, j);
        for (int j = 0; j <= i; ++j) {
          ds[static_cast<size_t>(i) * t + j] += p.at(i, j) * (g[static_cast<size_t>(i) * t + j] - dot);
        }
      }
      break;
    }
    case Op::kLogSoftmax: {
      if (!wants(0)) break;
      const Tensor& y = n.val;
      std::vector<double>& dx = ensure_grad(n.in[0]);
      const int r = y.rows(), c = y.cols();
      for (int i = 0; i < r; ++i) {
        double gsum = 0.0;
        for (int j = 0; j < c; ++j) gsum += g[static_cast<size_t>(i) * c + j];
        for (int j = 0; j < c; ++j) {
          dx[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(i) * c + j] - std::exp(y.at(i, j)) * gsum;
        }
      }
      break;
    }
    case Op::kSliceRows: {
      if (!wants(0)) break;
      const Tensor& a = val(n.in[0]);
      std::vector<double>& da = ensure_grad(n.in[0]);
      const int start = n.ints[0], len = n.ints[1], c = a.cols();
      for (int i = 0; i < len; ++i)
        for (int j = 0; j < c; ++j)
          da[static_cast<size_t>(start + i) * c + j] += g[static_cast<size_t>(i) * c + j];
      break;
    }
    case Op::kSliceCols: {
      if (!wants(0)) break;
      const Tensor& a = val(n.in[0]);
      std::vector<double>& da = ensure_grad(n.in[0]);
      const int start = n.ints[0], len = n.ints[1], c = a.cols();
      for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < len; ++j)
          da[static_cast<size_t>(i) * c + start + j] += g[static_cast<size_t>(i) * len + j];
      break;
    }
    case Op::kConcatCols: {
      const int total = n.val.cols();
      int off = 0;
      for (size_t slot = 0; slot < n.in.size(); ++slot) {
        const Tensor& part = val(n.in[slot]);
        if (wants(slot)) {
          std::vector<double>& dp = ensure_grad(n.in[slot]);
          for (int i = 0; i < part.rows(); ++i)
            for (int j = 0; j < part.cols(); ++j)
              dp[static_cast<size_t>(i) * part.cols() + j] += g[static_cast<size_t>(i) * total + off + j];
        }
        off += part.cols();
      }
      break;
    }
    case Op::kGatherTargets: {
      if (!wants(0)) break;
      const Tensor& lp = val(n.in[0]);
      std::vector<double>& d = ensure_grad(n.in[0]);
      const int c = lp.cols();
      for (size_t i = 0; i < n.ints.size(); ++i) {
        d[i * static_cast<size_t>(c) + n.ints[i]] += g[i];
      }
      break;
    }
    case Op::kCrossEntropyMean: {
      if (!wants(0)) break;
      const Tensor& lp = val(n.in[0]);
      std::vector<double>& d = ensure_grad(n.in[0]);
      const int c = lp.cols();
      const double inv = g[0] / static_cast<double>(masked_count(n.mask));
      const double smooth = n.attr;
      const double uniform = smooth / c;
      for (size_t i = 0; i < n.ints.size(); ++i) {
        if (!n.mask[i]) continue;
        d[i * static_cast<size_t>(c) + n.ints[i]] -= inv * (1.0 - smooth);
        if (smooth > 0.0) {
          for (int j = 0; j < c; ++j) d[i * static_cast<size_t>(c) + j] -= inv * uniform;
        }
      }
      break;
    }
    case Op::kMaskedMean: {
      if (!wants(0)) break;
      std::vector<double>& d = ensure_grad(n.in[0]);
      const double inv = 1.0 / static_cast<double>(masked_count(n.mask));
      for (size_t i = 0; i < n.mask.size(); ++i) {
        if (n.mask[i]) d[i] += g[0] * inv;
      }
      break;
    }
    case Op::kScaledLog1pExp: {
      if (!wants(0)) break;
      const Tensor& z = val(n.in[0]);
      std::vector<double>& d = ensure_grad(n.in[0]);
      for (size_t i = 0; i < g.size(); ++i) {
        d[i] += g[i] * 2.0 * stable_sigmoid(n.attr * z.data[i]);
      }
      break;
    }
    case Op::kKlToRef: {
      if (!wants(0)) break;
      const Tensor& lp = val(n.in[0]);
      const Tensor& ref = val(n.in[1]);
      std::vector<double>& d = ensure_grad(n.in[0]);
      const int c = lp.cols();
      const double inv = g[0] / static_cast<double>(masked_count(n.mask));
      for (int i = 0; i < lp.rows(); ++i) {
        if (!n.mask[static_cast<size_t>(i)]) continue;
        for (int j = 0; j < c; ++j) {
          const double l = lp.at(i, j);
          d[static_cast<size_t>(i) * c + j] += inv * std::exp(l) * (l - ref.at(i, j) + 1.0);
        }
      }
      break;
    }
    case Op::kWeightedSum: {
      if (!wants(0)) break;
      std::vector<double>& d = ensure_grad(n.in[0]);
      for (size_t i = 0; i < n.weights.size(); ++i) d[i] += g[0] * n.weights[i];
      break;
    }
  }
}

}  // namespace unlearn::diff
