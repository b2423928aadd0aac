#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "unlearn/graph.hpp"

namespace testutil {

using unlearn::diff::Tensor;

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

inline std::vector<double> random_weights(size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(n);
  for (double& v : w) v = dist(rng);
  return w;
}

// Central differences of f w.r.t. every entry of t. f re-evaluates the full
// computation from the tensor's current contents, so this stays independent
// of the tape's backward rules.
inline std::vector<double> finite_diff(const std::function<double()>& f, Tensor& t, double h) {
  std::vector<double> g(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) {
    const double keep = t.data[i];
    t.data[i] = keep + h;
    const double up = f();
    t.data[i] = keep - h;
    const double down = f();
    t.data[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline bool close_rel(double a, double b, double rel, double abs_floor) {
  return std::abs(a - b) <= std::max(abs_floor, rel * std::max(std::abs(a), std::abs(b)));
}

// Largest violation ratio |a-b| / max(floor, rel*scale); <= 1 means pass.
inline double worst_rel_violation(const std::vector<double>& a, const std::vector<double>& b, double rel,
                                  double abs_floor) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double tol = std::max(abs_floor, rel * std::max(std::abs(a[i]), std::abs(b[i])));
    worst = std::max(worst, std::abs(a[i] - b[i]) / tol);
  }
  return worst;
}

}  // namespace testutil
