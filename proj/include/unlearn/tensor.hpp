#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unlearn/common.hpp"

namespace unlearn::diff {

// Dense row-major tensor of doubles. Everything runs in 64-bit precision so
// finite-difference checks have headroom; shapes stay desk-scale.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<double> data_in);

  static Tensor zeros(std::vector<int> shape_in);
  static Tensor full(std::vector<int> shape_in, double v);
  static Tensor scalar(double v);
  static Tensor matrix(int rows, int cols, std::vector<double> data_in);

  int64_t numel() const;
  bool is_scalar() const { return numel() == 1; }
  int rank() const { return static_cast<int>(shape.size()); }
  // 2-D accessors; contract-checked in debug builds only.
  int rows() const;
  int cols() const;
  double& at(int r, int c);
  double at(int r, int c) const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;
};

int64_t shape_numel(std::span<const int> shape);
std::string shape_to_string(std::span<const int> shape);

}  // namespace unlearn::diff
