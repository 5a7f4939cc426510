#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "stainforge/common.hpp"
#include "stainforge/stats.hpp"

namespace stainforge::eval {

/// 10 log10(max^2 / MSE); +inf when the images are identical.
double psnr(std::span<const double> pred, std::span<const double> target, double max_value = 255.0);

/// Mean single-scale SSIM over all fully contained 11x11 Gaussian (sigma 1.5)
/// windows. Images are row-major `width` x `height`; `range` is L.
double ssim(std::span<const double> pred, std::span<const double> target, int width, int height,
            double range = 255.0);

/// Gaussian window weights, row-major 11x11, summing to 1.
std::vector<double> ssim_window();

/// Average precision: sum over descending distinct scores of
/// (R_i - R_{i-1}) * P_i, tied scores forming one threshold. NaN without positives.
double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct BinaryCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};
BinaryCounts binary_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

/// 2TP / (2TP + FP + FN); 0 when the denominator is 0.
double f1_binary(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

struct BootstrapConfig {
  int n_samples = 1000;
  double low_percentile = 2.5;
  double high_percentile = 97.5;
  std::uint64_t seed = 0;
};

struct BootstrapResult {
  double point = kNaN;
  double low = kNaN;
  double high = kNaN;
  int used = 0;
  int skipped = 0;  // resamples where the metric was undefined
};

/// Resamples tile indices with replacement (size = n_tiles) and recomputes
/// `metric` on each draw. Resample r uses substream (seed, "bootstrap", r).
BootstrapResult bootstrap_ci(const std::function<double(const std::vector<std::size_t>&)>& metric,
                             std::size_t n_tiles, const BootstrapConfig& config);

/// The tile indices of bootstrap resample r (exposed for tests).
std::vector<std::size_t> bootstrap_draw(std::size_t n_tiles, std::uint64_t seed, int r);

/// Expands sampled tiles to cell indices; duplicated tiles repeat their cells.
std::vector<std::size_t> cells_of_tiles(const std::vector<std::vector<std::size_t>>& cells_by_tile,
                                        const std::vector<std::size_t>& tiles);

/// Mean F1 of `runs` random labelings that call each cell positive with
/// probability `prevalence`, scored against `truth`.
double random_baseline_f1(std::span<const std::uint8_t> truth, double prevalence, int runs, std::uint64_t seed);
/// Same against a synthetic truth with round(prevalence * n) positives.
double random_baseline_f1(double prevalence, std::size_t n_cells, int runs, std::uint64_t seed);

struct CountCorrelation {
  double pearson = kNaN;
  double slope = kNaN;
  double intercept = kNaN;
};

/// Pearson plus the least-squares line reference = slope * predicted + intercept.
CountCorrelation cellcount_correlation(std::span<const double> predicted, std::span<const double> reference);

}  // namespace stainforge::eval
