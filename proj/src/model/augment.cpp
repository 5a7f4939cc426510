#include "stainforge/model/augment.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace stainforge::model {

nlohmann::ordered_json AugmentConfig::to_json() const {
  return {{"enabled", enabled},         {"flip_p", flip_p},       {"dropout_p", dropout_p},
          {"dropout_min", dropout_min}, {"dropout_max", dropout_max}, {"color_p", color_p},
          {"brightness", brightness},   {"contrast", contrast},   {"blur_p", blur_p},
          {"blur_sigma_max", blur_sigma_max}, {"noise_p", noise_p}, {"noise_std", noise_std},
          {"stain_p", stain_p},         {"stain_sigma", stain_sigma}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.enabled = j.value("enabled", c.enabled);
  c.flip_p = j.value("flip_p", c.flip_p);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.dropout_min = j.value("dropout_min", c.dropout_min);
  c.dropout_max = j.value("dropout_max", c.dropout_max);
  c.color_p = j.value("color_p", c.color_p);
  c.brightness = j.value("brightness", c.brightness);
  c.contrast = j.value("contrast", c.contrast);
  c.blur_p = j.value("blur_p", c.blur_p);
  c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
  c.noise_p = j.value("noise_p", c.noise_p);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.stain_p = j.value("stain_p", c.stain_p);
  c.stain_sigma = j.value("stain_sigma", c.stain_sigma);
  return c;
}

void flip_horizontal(Tensor& t) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < h; ++y) {
      double* row = t.ptr() + (static_cast<std::size_t>(k) * h + y) * w;
      std::reverse(row, row + w);
    }
  }
}

void flip_vertical(Tensor& t) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  for (int k = 0; k < c; ++k) {
    double* plane = t.ptr() + static_cast<std::size_t>(k) * h * w;
    for (int y = 0; y < h / 2; ++y) std::swap_ranges(plane + y * w, plane + (y + 1) * w, plane + (h - 1 - y) * w);
  }
}

namespace {

void gaussian_blur(Tensor& t, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(2 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  std::vector<double> tmp(static_cast<std::size_t>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    double* p = t.ptr() + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * p[y * w + std::clamp(x + i, 0, w - 1)];
        tmp[y * w + x] = acc;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
        p[y * w + x] = acc;
      }
    }
  }
}

const Eigen::Matrix3d& rgb_from_hed() {
  static const Eigen::Matrix3d m = [] {
    Eigen::Matrix3d r;
    r << 0.65, 0.70, 0.29, 0.07, 0.99, 0.11, 0.27, 0.57, 0.78;
    for (int i = 0; i < 3; ++i) r.row(i).normalize();
    return r;
  }();
  return m;
}

}  // namespace

void stain_jitter(Tensor& he, const double alpha[3], const double beta[3]) {
  static const Eigen::Matrix3d hed_from_rgb = rgb_from_hed().inverse();
  const std::size_t plane = static_cast<std::size_t>(he.dim(1)) * he.dim(2);
  for (std::size_t i = 0; i < plane; ++i) {
    Eigen::RowVector3d od;
    for (int c = 0; c < 3; ++c) od[c] = -std::log(std::max(he[c * plane + i] / 255.0, 1e-6));
    Eigen::RowVector3d stains = od * hed_from_rgb;
    for (int c = 0; c < 3; ++c) stains[c] = stains[c] * alpha[c] + beta[c];
    const Eigen::RowVector3d back = stains * rgb_from_hed();
    for (int c = 0; c < 3; ++c) he[c * plane + i] = std::clamp(255.0 * std::exp(-back[c]), 0.0, 255.0);
  }
}

Sample augment_pair(const Sample& in, std::uint64_t seed, const AugmentConfig& config, AugmentTrace* trace) {
  Sample out = in;
  AugmentTrace tr;
  if (!config.enabled) {
    if (trace) *trace = tr;
    return out;
  }
  if (in.he.dim(1) != in.target.dim(1) || in.he.dim(2) != in.target.dim(2)) {
    throw UserError("augment_pair: H&E and target sizes differ");
  }
  Rng rng(seed);
  const int h = in.he.dim(1), w = in.he.dim(2);

  tr.hflip = rng.bernoulli(config.flip_p);
  tr.vflip = rng.bernoulli(config.flip_p);
  if (tr.hflip) {
    flip_horizontal(out.he);
    flip_horizontal(out.target);
  }
  if (tr.vflip) {
    flip_vertical(out.he);
    flip_vertical(out.target);
  }

  tr.dropout = rng.bernoulli(config.dropout_p);
  if (tr.dropout) {
    const int bw = std::max(1, static_cast<int>(std::lround(w * rng.uniform(config.dropout_min, config.dropout_max))));
    const int bh = std::max(1, static_cast<int>(std::lround(h * rng.uniform(config.dropout_min, config.dropout_max))));
    tr.box_x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - bw + 1)));
    tr.box_y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - bh + 1)));
    tr.box_x1 = tr.box_x0 + bw;
    tr.box_y1 = tr.box_y0 + bh;
  }

  tr.stain = rng.bernoulli(config.stain_p);
  if (tr.stain) {
    double alpha[3], beta[3];
    for (int c = 0; c < 3; ++c) {
      alpha[c] = rng.uniform(1 - config.stain_sigma, 1 + config.stain_sigma);
      beta[c] = rng.uniform(-config.stain_sigma, config.stain_sigma);
    }
    stain_jitter(out.he, alpha, beta);
  }
  tr.color = rng.bernoulli(config.color_p);
  if (tr.color) {
    const double gain = 1 + rng.uniform(-config.contrast, config.contrast);
    const double shift = 255.0 * rng.uniform(-config.brightness, config.brightness);
    for (auto& v : out.he.data) v = std::clamp((v - 127.5) * gain + 127.5 + shift, 0.0, 255.0);
  }
  tr.blur = rng.bernoulli(config.blur_p);
  if (tr.blur) gaussian_blur(out.he, rng.uniform(0.1, std::max(0.1, config.blur_sigma_max)));
  tr.noise = rng.bernoulli(config.noise_p);
  if (tr.noise) {
    for (auto& v : out.he.data) v = std::clamp(v + rng.normal(0.0, config.noise_std), 0.0, 255.0);
  }
  // The box is zeroed last so colour ops cannot lift it off zero in the H&E.
  if (tr.dropout) {
    for (Tensor* t : {&out.he, &out.target}) {
      for (int c = 0; c < t->dim(0); ++c) {
        for (int y = tr.box_y0; y < tr.box_y1; ++y) {
          for (int x = tr.box_x0; x < tr.box_x1; ++x) (*t)[(static_cast<std::size_t>(c) * h + y) * w + x] = 0.0;
        }
      }
    }
  }
  if (trace) *trace = tr;
  return out;
}

}  // namespace stainforge::model
