#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "unlearn/graph.hpp"
#include "unlearn/model.hpp"

using namespace unlearn;
using diff::Graph;
using diff::NodeId;
using diff::Tensor;
using testutil::finite_diff;
using testutil::random_tensor;
using testutil::random_weights;
using testutil::worst_rel_violation;

namespace {

constexpr double kRel = 1e-4;
constexpr double kAbsFloor = 1e-8;

// Rebuilds the scalar expression from the leaves' current contents, runs one
// backward pass, and compares every leaf gradient against central finite
// differences.
struct Case {
  std::vector<Tensor> leaves;
  std::function<NodeId(Graph&, const std::vector<NodeId>&)> build;

  void check(double h = 1e-5, double rel = kRel) {
    Graph g;
    std::vector<NodeId> ids;
    for (Tensor& t : leaves) ids.push_back(g.param(t));
    const NodeId root = build(g, ids);
    g.backward(root);

    auto value_now = [&]() {
      Graph g2;
      std::vector<NodeId> ids2;
      for (Tensor& t : leaves) ids2.push_back(g2.param(t));
      return g2.value(build(g2, ids2)).data[0];
    };
    for (size_t li = 0; li < leaves.size(); ++li) {
      const std::vector<double> fd = finite_diff(value_now, leaves[li], h);
      const std::vector<double> an = g.grad_or_zeros(ids[li]);
      CHECK(worst_rel_violation(an, fd, rel, kAbsFloor) <= 1.0);
    }
  }
};

}  // namespace

TEST_CASE("matmul forward hand cases") {
  Graph g;
  const NodeId identity = g.input(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const NodeId v = g.input(Tensor::matrix(2, 1, {3, 4}));
  const NodeId prod = g.matmul(identity, v);
  CHECK(g.value(prod).data == std::vector<double>{3, 4});

  const NodeId two = g.input(Tensor::matrix(1, 1, {2}));
  const NodeId zero = g.input(Tensor::matrix(1, 1, {0}));
  CHECK(g.value(g.matmul(two, zero)).data[0] == 0.0);

  CHECK_THROWS_AS((void)g.matmul(identity, g.input(Tensor::matrix(3, 1, {1, 2, 3}))), DimensionError);
}

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(7);
  Case c;
  c.leaves = {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)};
  std::vector<double> w = random_weights(6, rng);
  c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(g.matmul(ids[0], ids[1]), w); };
  c.check(1e-5, 1e-6);
}

TEST_CASE("log_softmax hand cases") {
  Graph g;
  const NodeId sym = g.log_softmax(g.input(Tensor::matrix(1, 2, {0, 0})));
  CHECK(g.value(sym).data[0] == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(g.value(sym).data[1] == doctest::Approx(std::log(0.5)).epsilon(1e-12));

  const NodeId shifted = g.log_softmax(g.input(Tensor::matrix(1, 2, {1000, 0})));
  CHECK(std::isfinite(g.value(shifted).data[0]));
  CHECK(g.value(shifted).data[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(g.value(shifted).data[1] == doctest::Approx(-1000.0).epsilon(1e-9));
}

TEST_CASE("log_softmax rows exponentiate-sum to one") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const NodeId lp = g.log_softmax(g.input(random_tensor({1, 7}, rng, -5.0, 5.0)));
    double sum = 0.0;
    for (double v : g.value(lp).data) sum += std::exp(v);
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("cross_entropy hand cases and scalar oracle") {
  {
    // log of a one-hot: probability one at the target position
    Graph g;
    Tensor lp = Tensor::matrix(1, 3, {0.0, -745.0, -745.0});
    const NodeId ce = g.cross_entropy(g.input(lp), {0}, {1});
    CHECK(g.value(ce).data[0] == 0.0);
  }
  {
    Graph g;
    const double u = std::log(0.25);
    const NodeId ce = g.cross_entropy(g.input(Tensor::matrix(1, 4, {u, u, u, u})), {2}, {1});
    CHECK(g.value(ce).data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  {
    // random case against an independent scalar loop
    std::mt19937_64 rng(23);
    Tensor lp = random_tensor({6, 5}, rng);
    std::vector<int> targets = {0, 3, 2, 4, 1, 2};
    std::vector<uint8_t> mask = {1, 0, 1, 1, 0, 1};
    double expected = 0.0;
    int n = 0;
    for (int t = 0; t < 6; ++t) {
      if (!mask[static_cast<size_t>(t)]) continue;
      expected -= lp.at(t, targets[static_cast<size_t>(t)]);
      ++n;
    }
    expected /= n;
    Graph g;
    const NodeId ce = g.cross_entropy(g.input(lp), targets, mask);
    CHECK(g.value(ce).data[0] == doctest::Approx(expected).epsilon(1e-12));
  }
  {
    Graph g;
    CHECK_THROWS_AS((void)g.cross_entropy(g.input(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6})), {0, 1}, {0, 0}),
                    ContractError);
  }
}

TEST_CASE("backward trivial roots") {
  std::mt19937_64 rng(31);
  {
    Graph g;
    const NodeId id = g.param(random_tensor({2, 3}, rng));
    const NodeId root = g.weighted_sum(id, std::vector<double>(6, 1.0));
    g.backward(root);
    CHECK(g.grad(id) == std::vector<double>(6, 1.0));
  }
  {
    Graph g;
    const NodeId id = g.param(random_tensor({4}, rng));
    const NodeId root = g.weighted_sum(g.scale(id, 0.0), std::vector<double>(4, 1.0));
    g.backward(root);
    CHECK(g.grad(id) == std::vector<double>(4, 0.0));
  }
  {
    Graph g;
    const NodeId id = g.param(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    CHECK_THROWS_AS(g.backward(id), ContractError);
  }
}

TEST_CASE("two backward passes are bitwise identical") {
  std::mt19937_64 rng(37);
  Graph g;
  const NodeId x = g.param(random_tensor({4, 6}, rng));
  const NodeId w = g.param(random_tensor({3, 6}, rng));
  const NodeId root = g.weighted_sum(g.gelu(g.linear(x, w)), random_weights(12, rng));
  g.backward(root);
  const std::vector<double> gx = g.grad(x);
  const std::vector<double> gw = g.grad(w);
  g.backward(root);
  CHECK(g.grad(x) == gx);
  CHECK(g.grad(w) == gw);
}

TEST_CASE("every differentiable op matches finite differences") {
  std::mt19937_64 rng(41);

  SUBCASE("linear") {
    Case c;
    c.leaves = {random_tensor({5, 4}, rng), random_tensor({3, 4}, rng)};
    auto w = random_weights(15, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(g.linear(ids[0], ids[1]), w); };
    c.check();
  }
  SUBCASE("transpose") {
    Case c;
    c.leaves = {random_tensor({3, 5}, rng)};
    auto w = random_weights(15, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(g.transpose(ids[0]), w); };
    c.check();
  }
  SUBCASE("add and sub") {
    Case c;
    c.leaves = {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)};
    auto w = random_weights(8, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) {
      return g.weighted_sum(g.sub(g.add(ids[0], ids[1]), ids[2]), w);
    };
    c.check();
  }
  SUBCASE("add_row_bias") {
    Case c;
    c.leaves = {random_tensor({4, 3}, rng), random_tensor({3}, rng)};
    auto w = random_weights(12, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) {
      return g.weighted_sum(g.add_row_bias(ids[0], ids[1]), w);
    };
    c.check();
  }
  SUBCASE("scale") {
    Case c;
    c.leaves = {random_tensor({6}, rng)};
    auto w = random_weights(6, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(g.scale(ids[0], -1.7), w); };
    c.check();
  }
  SUBCASE("gelu") {
    Case c;
    c.leaves = {random_tensor({3, 4}, rng)};
    auto w = random_weights(12, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(g.gelu(ids[0]), w); };
    c.check();
  }
  SUBCASE("layer_norm") {
    Case c;
    c.leaves = {random_tensor({4, 6}, rng), random_tensor({6}, rng, 0.5, 1.5), random_tensor({6}, rng)};
    auto w = random_weights(24, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) {
      return g.weighted_sum(g.layer_norm(ids[0], ids[1], ids[2]), w);
    };
    c.check(1e-5, 2e-4);
  }
  SUBCASE("embedding") {
    Case c;
    c.leaves = {random_tensor({5, 3}, rng)};
    auto w = random_weights(12, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) {
      return g.weighted_sum(g.embedding(ids[0], {0, 2, 4, 2}), w);
    };
    c.check();
  }
  SUBCASE("causal_softmax") {
    Case c;
    c.leaves = {random_tensor({5, 5}, rng)};
    auto w = random_weights(25, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(g.causal_softmax(ids[0]), w); };
    c.check();
  }
  SUBCASE("log_softmax") {
    Case c;
    c.leaves = {random_tensor({4, 7}, rng)};
    auto w = random_weights(28, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(g.log_softmax(ids[0]), w); };
    c.check();
  }
  SUBCASE("slices and concat") {
    Case c;
    c.leaves = {random_tensor({6, 8}, rng)};
    auto w = random_weights(16, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) {
      const NodeId left = g.slice_cols(ids[0], 0, 2);
      const NodeId right = g.slice_cols(ids[0], 5, 2);
      const NodeId stacked = g.concat_cols(std::vector<NodeId>{left, right});
      return g.weighted_sum(g.slice_rows(stacked, 1, 4), w);
    };
    c.check();
  }
  SUBCASE("gather_targets") {
    Case c;
    c.leaves = {random_tensor({5, 4}, rng)};
    auto w = random_weights(5, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) {
      return g.weighted_sum(g.gather_targets(ids[0], {1, 0, 3, 2, 2}), w);
    };
    c.check();
  }
  SUBCASE("cross_entropy") {
    Case c;
    c.leaves = {random_tensor({5, 4}, rng)};
    c.build = [](Graph& g, const std::vector<NodeId>& ids) {
      return g.cross_entropy(ids[0], {1, 0, 3, 2, 2}, {1, 1, 0, 1, 1});
    };
    c.check();
  }
  SUBCASE("masked_mean") {
    Case c;
    c.leaves = {random_tensor({7}, rng)};
    c.build = [](Graph& g, const std::vector<NodeId>& ids) {
      return g.masked_mean(ids[0], {1, 0, 1, 1, 0, 1, 1});
    };
    c.check();
  }
  SUBCASE("scaled_log1p_exp") {
    for (double beta : {0.1, 0.5, 2.0}) {
      Case c;
      c.leaves = {random_tensor({6}, rng)};
      auto w = random_weights(6, rng);
      c.build = [w, beta](Graph& g, const std::vector<NodeId>& ids) {
        return g.weighted_sum(g.scaled_log1p_exp(ids[0], beta), w);
      };
      c.check();
    }
  }
  SUBCASE("kl_to_ref") {
    Case c;
    c.leaves = {random_tensor({4, 5}, rng)};
    Tensor ref = random_tensor({4, 5}, rng);
    c.build = [ref](Graph& g, const std::vector<NodeId>& ids) {
      return g.kl_to_ref(ids[0], g.input(ref), {1, 0, 1, 1});
    };
    c.check();
  }
  SUBCASE("weighted_sum") {
    Case c;
    c.leaves = {random_tensor({3, 3}, rng)};
    auto w = random_weights(9, rng);
    c.build = [w](Graph& g, const std::vector<NodeId>& ids) { return g.weighted_sum(ids[0], w); };
    c.check();
  }
}

TEST_CASE("kl_to_ref rejects a gradient-carrying reference") {
  std::mt19937_64 rng(43);
  Graph g;
  const NodeId lp = g.param(random_tensor({2, 3}, rng));
  const NodeId ref = g.param(random_tensor({2, 3}, rng));
  CHECK_THROWS_AS((void)g.kl_to_ref(lp, ref, {1, 1}), ContractError);
}

TEST_CASE("full tiny-transformer loss gradients match finite differences") {
  model::ModelConfig cfg;
  cfg.vocab_size = 13;
  cfg.model_dim = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.context_len = 32;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 2.0;
  model::ModelState state = model::init_model(cfg, 99);

  std::mt19937_64 rng(17);
  std::vector<int> tokens(12);
  for (int& t : tokens) t = static_cast<int>(rng() % 13);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  std::vector<uint8_t> mask(targets.size(), 0);
  for (size_t i = 4; i < mask.size(); ++i) mask[i] = 1;

  auto loss_value = [&]() {
    diff::Graph g;
    model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kNone);
    const NodeId lp = fb.log_probs(tokens);
    const NodeId pred = g.slice_rows(lp, 0, static_cast<int>(targets.size()));
    return g.value(g.cross_entropy(pred, targets, mask)).data[0];
  };

  diff::Graph g;
  model::ForwardBuilder fb(g, state, /*use_lora=*/true, model::Trainable::kBackbone);
  const NodeId lp = fb.log_probs(tokens);
  const NodeId pred = g.slice_rows(lp, 0, static_cast<int>(targets.size()));
  const NodeId loss = g.cross_entropy(pred, targets, mask);
  g.backward(loss);

  std::vector<model::NamedParam> params = model::backbone_parameters(state);
  REQUIRE(fb.param_nodes().size() == params.size());
  for (const auto& [name, id] : fb.param_nodes()) {
    diff::Tensor* t = nullptr;
    for (auto& np : params) {
      if (np.name == name) t = np.tensor;
    }
    REQUIRE(t != nullptr);
    const std::vector<double> fd = finite_diff(loss_value, *t, 1e-5);
    const std::vector<double> an = g.grad_or_zeros(id);
    CHECK(worst_rel_violation(an, fd, kRel, kAbsFloor) <= 1.0);
  }
}
