#include "unlearn/tensor.hpp"

#include <cassert>
#include <sstream>

namespace unlearn::diff {

int64_t shape_numel(std::span<const int> shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(std::span<const int> shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                         shape_to_string(shape));
  }
}

Tensor Tensor::zeros(std::vector<int> shape_in) {
  int64_t n = shape_numel(shape_in);
  return Tensor(std::move(shape_in), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<int> shape_in, double v) {
  int64_t n = shape_numel(shape_in);
  return Tensor(std::move(shape_in), std::vector<double>(static_cast<size_t>(n), v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::matrix(int r, int c, std::vector<double> data_in) { return Tensor({r, c}, std::move(data_in)); }

int64_t Tensor::numel() const { return static_cast<int64_t>(data.size()); }

int Tensor::rows() const {
  assert(shape.size() == 2);
  return shape[0];
}

int Tensor::cols() const {
  assert(shape.size() == 2);
  return shape[1];
}

double& Tensor::at(int r, int c) {
  assert(shape.size() == 2 && r >= 0 && r < shape[0] && c >= 0 && c < shape[1]);
  return data[static_cast<size_t>(r) * shape[1] + c];
}

double Tensor::at(int r, int c) const {
  assert(shape.size() == 2 && r >= 0 && r < shape[0] && c >= 0 && c < shape[1]);
  return data[static_cast<size_t>(r) * shape[1] + c];
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

}  // namespace unlearn::diff
