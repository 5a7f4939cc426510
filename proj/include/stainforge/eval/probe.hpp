#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace stainforge::eval {

/// Row-major n x d feature matrix.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  FeatureMatrix select(std::span<const std::size_t> idx) const;
};

struct ProbeOptions {
  double l2 = 1.0;  // strength of (l2 / 2) |w|^2 added to the mean NLL
  double tolerance = 1e-8;
  int max_iterations = 100;
};

/// Logistic regression on standardized features, fit by damped Newton.
struct ProbeModel {
  bool fitted = false;
  std::string skip_reason;
  std::vector<double> mean, scale;  // standardization from the fit rows
  std::vector<double> weights;
  double bias = 0.0;
  int iterations = 0;
  bool converged = false;
  double objective = 0.0;

  double probability(std::span<const double> row) const;
  std::vector<double> predict_proba(const FeatureMatrix& x) const;
};

/// Minimizes mean NLL + (l2/2)|w|^2 (bias unpenalized). A single-class label
/// vector yields an unfitted model with skip_reason set.
ProbeModel fit_probe(const FeatureMatrix& x, std::span<const std::uint8_t> labels, const ProbeOptions& options = {});

/// Seeded split for the external protocol: the returned indices (a
/// `fraction` share of 0..n-1, rounded) fit the probe, the rest are scored.
struct CellSplit {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> score;
};
CellSplit random_cell_split(std::size_t n, double fraction, std::uint64_t seed);

}  // namespace stainforge::eval
