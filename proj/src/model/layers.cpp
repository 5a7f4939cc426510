#include "stainforge/model/layers.hpp"

#include <algorithm>
#include <cmath>

#include "eigen_maps.hpp"

namespace stainforge::model {

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, int in, int out)
    : in_features(in), out_features(out), weight(name + ".weight", {out, in}), bias(name + ".bias", {out}) {}

void Linear::attach_lora(const std::string& name, const LoRAConfig& config, Rng& rng) {
  if (lora_) throw UserError("LoRA adapter already attached to " + weight.name);
  if (config.rank < 1) throw UserError("LoRA rank must be >= 1");
  lora_a = Parameter(name + ".lora_a", {config.rank, in_features});
  lora_b = Parameter(name + ".lora_b", {out_features, config.rank});
  for (auto& v : lora_a.value.data) v = rng.normal(0.0, config.init_std);
  lora_scale = config.alpha / static_cast<double>(config.rank);
  lora_ = true;
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
  if (lora_) {
    out.push_back(&lora_a);
    out.push_back(&lora_b);
  }
}

Tensor Linear::forward(const Tensor& x) {
  if (x.shape.empty() || x.shape.back() != in_features) throw UserError("Linear: input feature size mismatch");
  const auto rows = static_cast<Eigen::Index>(x.numel() / in_features);
  x_ = x;
  auto shape = x.shape;
  shape.back() = out_features;
  Tensor y(shape);
  auto X = cmap(x.ptr(), rows, in_features);
  auto W = cmap(weight.value.ptr(), out_features, in_features);
  auto Y = map(y.ptr(), rows, out_features);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += cvec(bias.value.ptr(), out_features).transpose();
  if (lora_) {
    const int r = lora_a.value.dim(0);
    xa_ = Tensor({static_cast<int>(rows), r});
    auto XA = map(xa_.ptr(), rows, r);
    XA.noalias() = X * cmap(lora_a.value.ptr(), r, in_features).transpose();
    Y.noalias() += lora_scale * (XA * cmap(lora_b.value.ptr(), out_features, r).transpose());
  }
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const auto rows = static_cast<Eigen::Index>(grad_out.numel() / out_features);
  auto G = cmap(grad_out.ptr(), rows, out_features);
  auto X = cmap(x_.ptr(), rows, in_features);
  Tensor dx(x_.shape);
  auto DX = map(dx.ptr(), rows, in_features);
  auto W = cmap(weight.value.ptr(), out_features, in_features);
  if (weight.trainable) map(weight.grad.ptr(), out_features, in_features).noalias() += G.transpose() * X;
  if (bias.trainable) vec(bias.grad.ptr(), out_features) += G.colwise().sum().transpose();
  DX.noalias() = G * W;
  if (lora_) {
    const int r = lora_a.value.dim(0);
    auto XA = cmap(xa_.ptr(), rows, r);
    auto B = cmap(lora_b.value.ptr(), out_features, r);
    auto A = cmap(lora_a.value.ptr(), r, in_features);
    RowMat dxa = lora_scale * (G * B);
    if (lora_b.trainable) map(lora_b.grad.ptr(), out_features, r).noalias() += lora_scale * (G.transpose() * XA);
    if (lora_a.trainable) map(lora_a.grad.ptr(), r, in_features).noalias() += dxa.transpose() * X;
    DX.noalias() += dxa * A;
  }
  return dx;
}

// ---------------------------------------------------------------- LayerNorm

LayerNorm::LayerNorm(const std::string& name, int features, double eps)
    : gamma(name + ".gamma", {features}, 1.0), beta(name + ".beta", {features}, 0.0), features_(features), eps_(eps) {}

void LayerNorm::collect(ParameterList& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Tensor LayerNorm::forward(const Tensor& x) {
  if (x.shape.back() != features_) throw UserError("LayerNorm: feature size mismatch");
  const std::size_t rows = x.numel() / features_;
  xhat_ = Tensor(x.shape);
  rstd_.assign(rows, 0.0);
  Tensor y(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * features_;
    double mean = 0;
    for (int i = 0; i < features_; ++i) mean += xr[i];
    mean /= features_;
    double var = 0;
    for (int i = 0; i < features_; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= features_;
    const double rstd = 1.0 / std::sqrt(var + eps_);
    rstd_[r] = rstd;
    for (int i = 0; i < features_; ++i) {
      const double h = (xr[i] - mean) * rstd;
      xhat_[r * features_ + i] = h;
      y[r * features_ + i] = gamma.value[i] * h + beta.value[i];
    }
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& grad_out) {
  const std::size_t rows = grad_out.numel() / features_;
  Tensor dx(grad_out.shape);
  std::vector<double> dxhat(features_);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* g = grad_out.ptr() + r * features_;
    const double* h = xhat_.ptr() + r * features_;
    double sum_d = 0, sum_dh = 0;
    for (int i = 0; i < features_; ++i) {
      if (gamma.trainable) gamma.grad[i] += g[i] * h[i];
      if (beta.trainable) beta.grad[i] += g[i];
      dxhat[i] = g[i] * gamma.value[i];
      sum_d += dxhat[i];
      sum_dh += dxhat[i] * h[i];
    }
    const double inv_n = 1.0 / features_;
    for (int i = 0; i < features_; ++i) {
      dx[r * features_ + i] = rstd_[r] * (dxhat[i] - inv_n * sum_d - h[i] * inv_n * sum_dh);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- pointwise

Tensor Gelu::forward(const Tensor& x) {
  x_ = x;
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
  return y;
}

Tensor Gelu::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.shape);
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  for (std::size_t i = 0; i < dx.numel(); ++i) {
    const double v = x_[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    dx[i] = grad_out[i] * (cdf + v * pdf);
  }
  return dx;
}

Tensor Relu::forward(const Tensor& x) {
  y_ = x;
  for (auto& v : y_.data) v = v > 0 ? v : 0.0;
  return y_;
}

void Relu::append_pattern(std::vector<std::uint8_t>& out) const {
  for (double v : y_.data) out.push_back(v > 0);
}

Tensor Relu::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.shape);
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = y_[i] > 0 ? grad_out[i] : 0.0;
  return dx;
}

Tensor TanhAct::forward(const Tensor& x) {
  y_ = x;
  for (auto& v : y_.data) v = std::tanh(v);
  return y_;
}

Tensor TanhAct::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.shape);
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = grad_out[i] * (1.0 - y_[i] * y_[i]);
  return dx;
}

Tensor Dropout::forward(const Tensor& x, bool train, Rng& rng) {
  active_ = train && p_ > 0;
  if (!active_) return x;
  mask_.resize(x.numel());
  const double keep = 1.0 - p_;
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask_[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    y[i] = x[i] * mask_[i];
  }
  return y;
}

Tensor Dropout::backward(const Tensor& grad_out) {
  if (!active_) return grad_out;
  Tensor dx(grad_out.shape);
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = grad_out[i] * mask_[i];
  return dx;
}

// ---------------------------------------------------------------- attention

MultiHeadAttention::MultiHeadAttention(const std::string& name, int width, int heads, double dropout)
    : query(name + ".query", width, width),
      key(name + ".key", width, width),
      value(name + ".value", width, width),
      proj(name + ".proj", width, width),
      width_(width),
      heads_(heads),
      proj_drop_(dropout) {
  if (heads < 1 || width % heads != 0) throw UserError("attention width must be divisible by heads");
}

void MultiHeadAttention::collect(ParameterList& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  proj.collect(out);
}

Tensor MultiHeadAttention::forward(const Tensor& x, bool train, Rng& rng) {
  const int n = x.dim(0), t = x.dim(1), d = x.dim(2);
  const int dh = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  q_ = query.forward(x);
  k_ = key.forward(x);
  v_ = value.forward(x);
  attn_ = Tensor({n, heads_, t, t});
  Tensor ctx({n, t, d});
  for (int b = 0; b < n; ++b) {
    for (int h = 0; h < heads_; ++h) {
      const std::size_t off = static_cast<std::size_t>(b) * t * d + static_cast<std::size_t>(h) * dh;
      auto Q = cstrided(q_.ptr() + off, t, dh, d);
      auto K = cstrided(k_.ptr() + off, t, dh, d);
      auto V = cstrided(v_.ptr() + off, t, dh, d);
      auto P = map(attn_.ptr() + (static_cast<std::size_t>(b) * heads_ + h) * t * t, t, t);
      P.noalias() = scale * (Q * K.transpose());
      for (int i = 0; i < t; ++i) {
        const double m = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - m).exp().matrix();
        P.row(i) /= P.row(i).sum();
      }
      strided(ctx.ptr() + off, t, dh, d).noalias() = P * V;
    }
  }
  return proj_drop_.forward(proj.forward(ctx), train, rng);
}

Tensor MultiHeadAttention::backward(const Tensor& grad_out) {
  const int n = q_.dim(0), t = q_.dim(1), d = q_.dim(2);
  const int dh = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor dctx = proj.backward(proj_drop_.backward(grad_out));
  Tensor dq({n, t, d}), dk({n, t, d}), dv({n, t, d});
  RowMat dp(t, t), ds(t, t);
  for (int b = 0; b < n; ++b) {
    for (int h = 0; h < heads_; ++h) {
      const std::size_t off = static_cast<std::size_t>(b) * t * d + static_cast<std::size_t>(h) * dh;
      auto Q = cstrided(q_.ptr() + off, t, dh, d);
      auto K = cstrided(k_.ptr() + off, t, dh, d);
      auto V = cstrided(v_.ptr() + off, t, dh, d);
      auto G = cstrided(dctx.ptr() + off, t, dh, d);
      auto P = cmap(attn_.ptr() + (static_cast<std::size_t>(b) * heads_ + h) * t * t, t, t);
      dp.noalias() = G * V.transpose();
      strided(dv.ptr() + off, t, dh, d).noalias() = P.transpose() * G;
      for (int i = 0; i < t; ++i) {
        const double dot = P.row(i).dot(dp.row(i));
        ds.row(i) = (P.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      strided(dq.ptr() + off, t, dh, d).noalias() = scale * (ds * K);
      strided(dk.ptr() + off, t, dh, d).noalias() = scale * (ds.transpose() * Q);
    }
  }
  Tensor dx = query.backward(dq);
  const Tensor dxk = key.backward(dk);
  const Tensor dxv = value.backward(dv);
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dxk[i] + dxv[i];
  return dx;
}

// ---------------------------------------------------------------- block

TransformerBlock::TransformerBlock(const std::string& name, int width, int heads, double mlp_ratio, double dropout)
    : norm1(name + ".norm1", width),
      norm2(name + ".norm2", width),
      attn(name + ".attn", width, heads, dropout),
      fc1(name + ".mlp.fc1", width, static_cast<int>(std::lround(width * mlp_ratio))),
      fc2(name + ".mlp.fc2", static_cast<int>(std::lround(width * mlp_ratio)), width),
      mlp_drop_(dropout) {}

void TransformerBlock::collect(ParameterList& out) {
  norm1.collect(out);
  attn.collect(out);
  norm2.collect(out);
  fc1.collect(out);
  fc2.collect(out);
}

Tensor TransformerBlock::forward(const Tensor& x, bool train, Rng& rng) {
  Tensor h = attn.forward(norm1.forward(x), train, rng);
  for (std::size_t i = 0; i < h.numel(); ++i) h[i] += x[i];
  Tensor y = mlp_drop_.forward(fc2.forward(act_.forward(fc1.forward(norm2.forward(h)))), train, rng);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += h[i];
  return y;
}

Tensor TransformerBlock::backward(const Tensor& grad_out) {
  Tensor gh = norm2.backward(fc1.backward(act_.backward(fc2.backward(mlp_drop_.backward(grad_out)))));
  for (std::size_t i = 0; i < gh.numel(); ++i) gh[i] += grad_out[i];
  Tensor gx = norm1.backward(attn.backward(gh));
  for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gh[i];
  return gx;
}

// ---------------------------------------------------------------- conv

Conv2d::Conv2d(const std::string& name, int cin, int cout, int k, int s, int p)
    : weight(name + ".weight", {cout, cin * k * k}),
      bias(name + ".bias", {cout}),
      in_channels(cin),
      out_channels(cout),
      kernel(k),
      stride(s),
      padding(p) {}

void Conv2d::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != in_channels) throw UserError("Conv2d: expected (N, " + std::to_string(in_channels) +
                                                                ", H, W), got " + shape_string(x.shape));
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 2 * padding - kernel) / stride + 1;
  const int wo = (w + 2 * padding - kernel) / stride + 1;
  const int kk = in_channels * kernel * kernel;
  const int pix = ho * wo;
  in_shape_ = x.shape;
  cols_.assign(static_cast<std::size_t>(n) * kk * pix, 0.0);
  Tensor y({n, out_channels, ho, wo});
  auto W = cmap(weight.value.ptr(), out_channels, kk);
  for (int b = 0; b < n; ++b) {
    double* cols = cols_.data() + static_cast<std::size_t>(b) * kk * pix;
    const double* xb = x.ptr() + static_cast<std::size_t>(b) * in_channels * h * w;
    for (int c = 0; c < in_channels; ++c) {
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          double* row = cols + static_cast<std::size_t>((c * kernel + ky) * kernel + kx) * pix;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            const double* src = xb + (static_cast<std::size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - padding + kx;
              if (ix >= 0 && ix < w) row[oy * wo + ox] = src[ix];
            }
          }
        }
      }
    }
    auto Y = map(y.ptr() + static_cast<std::size_t>(b) * out_channels * pix, out_channels, pix);
    Y.noalias() = W * cmap(cols, kk, pix);
    Y.colwise() += cvec(bias.value.ptr(), out_channels);
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const int n = in_shape_[0], h = in_shape_[2], w = in_shape_[3];
  const int ho = grad_out.dim(2), wo = grad_out.dim(3);
  const int kk = in_channels * kernel * kernel;
  const int pix = ho * wo;
  Tensor dx(in_shape_);
  auto W = cmap(weight.value.ptr(), out_channels, kk);
  RowMat dcols(kk, pix);
  for (int b = 0; b < n; ++b) {
    const double* cols = cols_.data() + static_cast<std::size_t>(b) * kk * pix;
    auto G = cmap(grad_out.ptr() + static_cast<std::size_t>(b) * out_channels * pix, out_channels, pix);
    if (weight.trainable) map(weight.grad.ptr(), out_channels, kk).noalias() += G * cmap(cols, kk, pix).transpose();
    if (bias.trainable) vec(bias.grad.ptr(), out_channels) += G.rowwise().sum();
    dcols.noalias() = W.transpose() * G;
    double* dxb = dx.ptr() + static_cast<std::size_t>(b) * in_channels * h * w;
    for (int c = 0; c < in_channels; ++c) {
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          const double* row = dcols.data() + static_cast<std::size_t>((c * kernel + ky) * kernel + kx) * pix;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            double* dst = dxb + (static_cast<std::size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - padding + kx;
              if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- batch norm

BatchNorm2d::BatchNorm2d(const std::string& name, int channels, double momentum, double eps)
    : gamma(name + ".gamma", {channels}, 1.0),
      beta(name + ".beta", {channels}, 0.0),
      running_mean(name + ".running_mean", {channels}, 0.0),
      running_var(name + ".running_var", {channels}, 1.0),
      channels_(channels),
      momentum_(momentum),
      eps_(eps) {
  running_mean.trainable = running_var.trainable = false;
  running_mean.buffer = running_var.buffer = true;
}

void BatchNorm2d::collect(ParameterList& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
  out.push_back(&running_mean);
  out.push_back(&running_var);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  if (x.rank() != 4 || x.dim(1) != channels_) throw UserError("BatchNorm2d: channel mismatch");
  const int n = x.dim(0), plane = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n) * plane;
  trained_forward_ = train;
  xhat_ = Tensor(x.shape);
  inv_std_.assign(channels_, 0.0);
  Tensor y(x.shape);
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (train) {
      double s = 0;
      for (int b = 0; b < n; ++b) {
        const double* p = x.ptr() + (static_cast<std::size_t>(b) * channels_ + c) * plane;
        for (int i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / m;
      double q = 0;
      for (int b = 0; b < n; ++b) {
        const double* p = x.ptr() + (static_cast<std::size_t>(b) * channels_ + c) * plane;
        for (int i = 0; i < plane; ++i) q += (p[i] - mean) * (p[i] - mean);
      }
      var = q / m;
      const double unbiased = m > 1 ? q / (m - 1) : var;
      running_mean.value[c] = (1 - momentum_) * running_mean.value[c] + momentum_ * mean;
      running_var.value[c] = (1 - momentum_) * running_var.value[c] + momentum_ * unbiased;
    } else {
      mean = running_mean.value[c];
      var = running_var.value[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * plane;
      for (int i = 0; i < plane; ++i) {
        const double hv = (x[off + i] - mean) * inv;
        xhat_[off + i] = hv;
        y[off + i] = gamma.value[c] * hv + beta.value[c];
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const int n = grad_out.dim(0), plane = grad_out.dim(2) * grad_out.dim(3);
  const double m = static_cast<double>(n) * plane;
  Tensor dx(grad_out.shape);
  for (int c = 0; c < channels_; ++c) {
    double sum_g = 0, sum_gh = 0;
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * plane;
      for (int i = 0; i < plane; ++i) {
        sum_g += grad_out[off + i];
        sum_gh += grad_out[off + i] * xhat_[off + i];
      }
    }
    if (gamma.trainable) gamma.grad[c] += sum_gh;
    if (beta.trainable) beta.grad[c] += sum_g;
    const double g = gamma.value[c];
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * plane;
      for (int i = 0; i < plane; ++i) {
        if (trained_forward_) {
          dx[off + i] = g * inv_std_[c] / m * (m * grad_out[off + i] - sum_g - xhat_[off + i] * sum_gh);
        } else {
          dx[off + i] = g * inv_std_[c] * grad_out[off + i];
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- resize

namespace {

double cubic_weight(double x) {
  constexpr double a = -0.75;
  x = std::abs(x);
  if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
  if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
  return 0.0;
}

}  // namespace

std::vector<double> Resize2d::axis_matrix(int in, int out, Interp mode) {
  std::vector<double> m(static_cast<std::size_t>(out) * in, 0.0);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (mode == Interp::kBilinear) {
      src = std::max(src, 0.0);
      const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
      const int i1 = std::min(i0 + 1, in - 1);
      const double l = src - i0;
      m[static_cast<std::size_t>(o) * in + i0] += 1 - l;
      m[static_cast<std::size_t>(o) * in + i1] += l;
    } else {
      const int i = static_cast<int>(std::floor(src));
      const double t = src - i;
      for (int k = -1; k <= 2; ++k) {
        const int idx = std::clamp(i + k, 0, in - 1);
        m[static_cast<std::size_t>(o) * in + idx] += cubic_weight(t - k);
      }
    }
  }
  return m;
}

Resize2d::Resize2d(int ih, int iw, int oh, int ow, Interp mode)
    : in_h(ih), in_w(iw), out_h(oh), out_w(ow), ry_(axis_matrix(ih, oh, mode)), rx_(axis_matrix(iw, ow, mode)) {}

Tensor Resize2d::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(2) != in_h || x.dim(3) != in_w) throw UserError("Resize2d: input size mismatch");
  const int planes = x.dim(0) * x.dim(1);
  Tensor y({x.dim(0), x.dim(1), out_h, out_w});
  auto Ry = cmap(ry_.data(), out_h, in_h);
  auto Rx = cmap(rx_.data(), out_w, in_w);
  RowMat tmp(out_h, in_w);
  for (int p = 0; p < planes; ++p) {
    tmp.noalias() = Ry * cmap(x.ptr() + static_cast<std::size_t>(p) * in_h * in_w, in_h, in_w);
    map(y.ptr() + static_cast<std::size_t>(p) * out_h * out_w, out_h, out_w).noalias() = tmp * Rx.transpose();
  }
  return y;
}

Tensor Resize2d::backward(const Tensor& grad_out) const {
  const int planes = grad_out.dim(0) * grad_out.dim(1);
  Tensor dx({grad_out.dim(0), grad_out.dim(1), in_h, in_w});
  auto Ry = cmap(ry_.data(), out_h, in_h);
  auto Rx = cmap(rx_.data(), out_w, in_w);
  RowMat tmp(in_h, out_w);
  for (int p = 0; p < planes; ++p) {
    tmp.noalias() = Ry.transpose() * cmap(grad_out.ptr() + static_cast<std::size_t>(p) * out_h * out_w, out_h, out_w);
    map(dx.ptr() + static_cast<std::size_t>(p) * in_h * in_w, in_h, in_w).noalias() = tmp * Rx;
  }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw UserError("concat_channels: " + shape_string(a.shape) + " vs " + shape_string(b.shape));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor y({n, ca + cb, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + i * ca * plane, ca * plane, y.ptr() + i * (ca + cb) * plane);
    std::copy_n(b.ptr() + i * cb * plane, cb * plane, y.ptr() + (i * (ca + cb) + ca) * plane);
  }
  return y;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, int split) {
  const int n = t.dim(0), c = t.dim(1);
  const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
  Tensor a({n, split, t.dim(2), t.dim(3)}), b({n, c - split, t.dim(2), t.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(t.ptr() + i * c * plane, split * plane, a.ptr() + i * split * plane);
    std::copy_n(t.ptr() + (i * c + split) * plane, (c - split) * plane, b.ptr() + i * (c - split) * plane);
  }
  return {a, b};
}

}  // namespace stainforge::model
