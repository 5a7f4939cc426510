#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "stainforge/model/tensor.hpp"

namespace stainforge::model {

/// One paired training example: H&E (3, H, W) RGB in [0, 255] and target
/// (M, H, W) normalized intensity in [0, 255].
struct Sample {
  std::string tile_id;
  Tensor he;
  Tensor target;
};

struct AugmentConfig {
  bool enabled = true;
  // spatial, applied to both tiles
  double flip_p = 0.5;
  double dropout_p = 0.5;
  double dropout_min = 0.125;  // box side as a fraction of the tile side
  double dropout_max = 0.25;
  // colour, H&E only
  double color_p = 0.5;
  double brightness = 0.1;
  double contrast = 0.1;
  double blur_p = 0.2;
  double blur_sigma_max = 1.0;
  double noise_p = 0.2;
  double noise_std = 4.0;
  double stain_p = 0.5;
  double stain_sigma = 0.05;

  nlohmann::ordered_json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

/// What augment_pair did, for inspection.
struct AugmentTrace {
  bool hflip = false;
  bool vflip = false;
  bool dropout = false;
  int box_x0 = 0, box_y0 = 0, box_x1 = 0, box_y1 = 0;  // half-open
  bool color = false, blur = false, noise = false, stain = false;
};

void flip_horizontal(Tensor& chw);
void flip_vertical(Tensor& chw);

/// Deterministic in (sample, seed, config).
Sample augment_pair(const Sample& in, std::uint64_t seed, const AugmentConfig& config, AugmentTrace* trace = nullptr);

/// Ruifrok-Johnston H&E-DAB perturbation of an RGB (3, H, W) tile:
/// each stain concentration c becomes c * alpha + beta.
void stain_jitter(Tensor& he, const double alpha[3], const double beta[3]);

}  // namespace stainforge::model
