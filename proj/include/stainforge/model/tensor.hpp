#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "stainforge/common.hpp"

namespace stainforge::model {

/// Dense row-major double tensor. Shapes are small vectors; layouts are
/// NCHW for images and (N, T, D) for token sequences.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }
  Tensor reshaped(std::vector<int> s) const {
    if (count(s) != numel()) throw Error("reshape changes element count");
    Tensor t = *this;
    t.shape = std::move(s);
    return t;
  }
};

std::string shape_string(const std::vector<int>& shape);

inline void require_shape(const Tensor& t, const std::vector<int>& shape, const char* what) {
  if (t.shape != shape) {
    throw UserError(std::string(what) + ": expected shape " + shape_string(shape) + ", got " + shape_string(t.shape));
  }
}

/// Learnable array with its gradient accumulator. Buffers (running
/// statistics) are serialized but never optimized.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  bool buffer = false;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> shape, double fill = 0.0)
      : name(std::move(n)), value(shape, fill), grad(shape, 0.0) {}
};

using ParameterList = std::vector<Parameter*>;

}  // namespace stainforge::model
