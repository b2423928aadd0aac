#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn::diff {

using NodeId = int32_t;

enum class Op : uint8_t {
  kLeaf,
  kMatMul,         // a[m x k] . b[k x n]
  kLinear,         // x[t x in] . w[out x in]^T
  kTranspose,      // 2-D
  kAdd,            // same shape
  kSub,            // same shape
  kAddRowBias,     // x[t x d] + b[d] per row
  kScale,          // x * attr
  kGelu,           // exact erf form
  kLayerNorm,      // over last dim, with gain/bias
  kEmbedding,      // row gather from table by ids
  kCausalSoftmax,  // row-wise softmax over the lower triangle
  kLogSoftmax,     // over last dim of a 2-D tensor
  kSliceRows,
  kSliceCols,
  kConcatCols,
  kGatherTargets,     // v[t] = lp[t, targets[t]]
  kCrossEntropyMean,  // mean over masked rows of -lp[t, targets[t]]
  kMaskedMean,        // mean over masked entries of a vector
  kScaledLog1pExp,    // (2/beta) * log1p(exp(beta * z)), elementwise
  kKlToRef,           // mean over masked rows of sum_v exp(lp)*(lp - ref)
  kWeightedSum,       // scalar = sum_i weights[i] * a[i] over the flat data
};

struct Node {
  Op op = Op::kLeaf;
  std::vector<NodeId> in;
  Tensor val;
  std::vector<double> grad;  // sized lazily during backward
  bool needs_grad = false;
  std::vector<int> ints;         // ids / targets / slice bounds
  std::vector<uint8_t> mask;     // completion-token mask
  std::vector<double> weights;   // weighted_sum coefficients
  double attr = 0.0;             // scale constant or beta
};

// Dynamic tape: rebuilt on every forward pass. Nodes are appended in
// evaluation order, so the list is topological by construction and a single
// reverse sweep visits each node exactly once.
class Graph {
 public:
  Graph() { nodes_.reserve(1024); }

  NodeId input(Tensor t);  // constant leaf, no gradient
  NodeId param(Tensor t);  // differentiable leaf

  NodeId matmul(NodeId a, NodeId b);
  NodeId linear(NodeId x, NodeId w);
  NodeId transpose(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId add_row_bias(NodeId x, NodeId bias);
  NodeId scale(NodeId a, double c);
  NodeId gelu(NodeId a);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
  NodeId embedding(NodeId table, std::vector<int> ids);
  NodeId causal_softmax(NodeId scores);
  NodeId log_softmax(NodeId logits);
  NodeId slice_rows(NodeId a, int start, int len);
  NodeId slice_cols(NodeId a, int start, int len);
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId gather_targets(NodeId logp, std::vector<int> targets);
  // Mean over masked rows of -sum_v q_v * logp_v with q the target one-hot
  // blended toward uniform by label_smoothing (0 = plain cross-entropy).
  NodeId cross_entropy(NodeId logp, std::vector<int> targets, std::vector<uint8_t> mask,
                       double label_smoothing = 0.0);
  NodeId masked_mean(NodeId v, std::vector<uint8_t> mask);
  NodeId scaled_log1p_exp(NodeId z, double beta);
  NodeId kl_to_ref(NodeId logp, NodeId ref_logp, std::vector<uint8_t> mask);
  NodeId weighted_sum(NodeId a, std::vector<double> weights);

  // Clears previous gradients, seeds d(root)/d(root) = 1 and sweeps the tape
  // once in reverse. root must be scalar.
  void backward(NodeId root);

  const Tensor& value(NodeId id) const { return nodes_[check(id)].val; }
  // Gradient of the last backward root w.r.t. node id; empty if the node was
  // not reached.
  const std::vector<double>& grad(NodeId id) const { return nodes_[check(id)].grad; }
  std::vector<double> grad_or_zeros(NodeId id) const;
  bool needs_grad(NodeId id) const { return nodes_[check(id)].needs_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  NodeId push(Node n);
  NodeId check(NodeId id) const;
  const Tensor& val(NodeId id) const { return nodes_[check(id)].val; }
  std::vector<double>& ensure_grad(NodeId id);
  void backward_node(NodeId id);

  std::vector<Node> nodes_;
};

}  // namespace unlearn::diff
