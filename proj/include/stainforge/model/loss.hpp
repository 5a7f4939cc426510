#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/model/tensor.hpp"

namespace stainforge::model {

struct LossConfig {
  static constexpr double kSigmaFloor = 1e-3;

  std::vector<double> sigma;  // per-marker stdev of scaled training targets
  double lambda = 1.0;

  nlohmann::ordered_json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> per_marker_mse;
  Tensor grad;  // d loss / d pred
  std::vector<std::string> warnings;
};

/// (lambda / M) * sum_j MSE_j / sigma_j, MSE_j over every pixel of marker j
/// in the batch. pred/target: (N, M, H, W). Sigmas below the floor are
/// raised to it and reported in `warnings`.
LossResult weighted_mse(const Tensor& pred, const Tensor& target, const LossConfig& config);

/// Per-marker population stdev over (M, H, W) targets, floored.
std::vector<double> target_sigma(const std::vector<Tensor>& scaled_targets);

}  // namespace stainforge::model
