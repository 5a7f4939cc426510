#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stainforge/model/tensor.hpp"

namespace stainforge::model {

// Each layer caches what its backward pass needs during forward; backward
// accumulates into Parameter::grad and returns the gradient w.r.t. the input.
// A layer instance therefore supports one outstanding forward at a time.

struct LoRAConfig {
  int rank = 8;
  double alpha = 1.0;
  double init_std = 0.02;
};

/// y = x W^T + b over the last dimension, with an optional low-rank branch
/// (alpha / rank) * (x A^T) B^T.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

  void attach_lora(const std::string& name, const LoRAConfig& config, Rng& rng);
  bool has_lora() const { return lora_; }
  void collect(ParameterList& out);

  int in_features = 0;
  int out_features = 0;
  Parameter weight;
  Parameter bias;
  Parameter lora_a;  // (rank, in)
  Parameter lora_b;  // (out, rank)
  double lora_scale = 0.0;

 private:
  bool lora_ = false;
  Tensor x_;
  Tensor xa_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, int features, double eps = 1e-6);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  Parameter gamma;
  Parameter beta;

 private:
  int features_ = 0;
  double eps_ = 1e-6;
  Tensor xhat_;
  std::vector<double> rstd_;
};

class Gelu {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

 private:
  Tensor x_;
};

class Relu {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  /// Appends the on/off state of every unit from the last forward.
  void append_pattern(std::vector<std::uint8_t>& out) const;

 private:
  Tensor y_;
};

class TanhAct {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

 private:
  Tensor y_;
};

/// Inverted dropout; identity when not training or p == 0.
class Dropout {
 public:
  explicit Dropout(double p = 0.0) : p_(p) {}
  Tensor forward(const Tensor& x, bool train, Rng& rng);
  Tensor backward(const Tensor& grad_out);

 private:
  double p_;
  bool active_ = false;
  std::vector<double> mask_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int width, int heads, double dropout);

  /// x: (N, T, D).
  Tensor forward(const Tensor& x, bool train, Rng& rng);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  Linear query, key, value, proj;

 private:
  int width_ = 0;
  int heads_ = 1;
  Dropout proj_drop_;
  Tensor q_, k_, v_, attn_;  // q/k/v: (N, T, D); attn: (N, H, T, T)
};

class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int width, int heads, double mlp_ratio, double dropout);

  Tensor forward(const Tensor& x, bool train, Rng& rng);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Linear fc1, fc2;

 private:
  Gelu act_;
  Dropout mlp_drop_;
};

/// 2-D convolution with square kernel, zero padding, im2col + GEMM.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int padding);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  Parameter weight;  // (out, in * k * k)
  Parameter bias;

  int in_channels = 0, out_channels = 0, kernel = 1, stride = 1, padding = 0;

 private:
  std::vector<int> in_shape_;
  std::vector<double> cols_;  // per-sample im2col buffers, concatenated
};

/// Per-channel batch normalization over (N, H, W). Training uses batch
/// statistics and updates running estimates; inference uses the running
/// estimates.
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  Parameter gamma, beta, running_mean, running_var;

 private:
  int channels_ = 0;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  bool trained_forward_ = false;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

enum class Interp { kBilinear, kBicubic };

/// Separable resize (half-pixel centers, border clamp), applied as
/// out = Ry * in * Rx^T on every plane. Linear, so backward is the transpose.
class Resize2d {
 public:
  Resize2d() = default;
  Resize2d(int in_h, int in_w, int out_h, int out_w, Interp mode);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out) const;

  /// Row-major (out, in) interpolation matrix along one axis.
  static std::vector<double> axis_matrix(int in, int out, Interp mode);

  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;

 private:
  std::vector<double> ry_, rx_;
};

/// Channel concatenation of two NCHW tensors with equal N, H, W.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Inverse of concat_channels for gradients: splits at channel `split`.
std::pair<Tensor, Tensor> split_channels(const Tensor& t, int split);

}  // namespace stainforge::model
