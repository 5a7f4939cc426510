#include "stainforge/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stainforge/imgproc.hpp"

namespace stainforge::eval {

double psnr(std::span<const double> pred, std::span<const double> target, double max_value) {
  if (pred.size() != target.size() || pred.empty()) throw UserError("psnr: images must be non-empty and equal size");
  if (!(max_value > 0)) throw UserError("psnr: max_value must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(pred.size());
  if (mse == 0.0) return kInf;
  return 10.0 * std::log10(max_value * max_value / mse);
}

namespace {

constexpr int kWin = 11;

std::vector<double> gauss_1d() {
  std::vector<double> g(kWin);
  double s = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    s += g[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
  }
  for (auto& v : g) v /= s;
  return g;
}

// Valid-mode separable filtering.
std::vector<double> filter_valid(const std::vector<double>& img, int w, int h, const std::vector<double>& g) {
  const int ow = w - kWin + 1, oh = h - kWin + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double a = 0;
      for (int k = 0; k < kWin; ++k) a += g[k] * img[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = a;
    }
  }
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double a = 0;
      for (int k = 0; k < kWin; ++k) a += g[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = a;
    }
  }
  return out;
}

}  // namespace

std::vector<double> ssim_window() {
  const auto g = gauss_1d();
  std::vector<double> w(kWin * kWin);
  for (int y = 0; y < kWin; ++y) {
    for (int x = 0; x < kWin; ++x) w[y * kWin + x] = g[y] * g[x];
  }
  return w;
}

double ssim(std::span<const double> pred, std::span<const double> target, int width, int height, double range) {
  if (pred.size() != target.size() || pred.size() != static_cast<std::size_t>(width) * height) {
    throw UserError("ssim: images must have equal, matching sizes");
  }
  if (width < kWin || height < kWin) throw UserError("ssim: image side must be at least 11");
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const auto g = gauss_1d();
  const std::vector<double> x(pred.begin(), pred.end()), y(target.begin(), target.end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, width, height, g);
  const auto my = filter_valid(y, width, height, g);
  const auto sxx = filter_valid(xx, width, height, g);
  const auto syy = filter_valid(yy, width, height, g);
  const auto sxy = filter_valid(xy, width, height, g);
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw UserError("auprc: length mismatch");
  const std::size_t positives = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  if (positives == 0) return kNaN;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]] != 0;
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

BinaryCounts binary_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw UserError("f1: length mismatch");
  BinaryCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_binary(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  const auto c = binary_counts(pred, truth);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

std::vector<std::size_t> bootstrap_draw(std::size_t n_tiles, std::uint64_t seed, int r) {
  Rng rng(derive_seed(seed, "bootstrap", static_cast<std::uint64_t>(r)));
  std::vector<std::size_t> draw(n_tiles);
  for (auto& v : draw) v = rng.below(n_tiles);
  return draw;
}

BootstrapResult bootstrap_ci(const std::function<double(const std::vector<std::size_t>&)>& metric,
                             std::size_t n_tiles, const BootstrapConfig& config) {
  if (n_tiles < 2) throw UserError("bootstrap needs at least 2 tiles");
  if (config.n_samples < 1) throw UserError("bootstrap n_samples must be >= 1");
  BootstrapResult out;
  std::vector<std::size_t> all(n_tiles);
  std::iota(all.begin(), all.end(), std::size_t{0});
  out.point = metric(all);
  std::vector<double> values;
  values.reserve(config.n_samples);
  for (int r = 0; r < config.n_samples; ++r) {
    const double v = metric(bootstrap_draw(n_tiles, config.seed, r));
    if (std::isfinite(v)) {
      values.push_back(v);
    } else {
      ++out.skipped;
    }
  }
  out.used = static_cast<int>(values.size());
  if (values.empty()) return out;
  std::sort(values.begin(), values.end());
  out.low = imgproc::interpolated_percentile(values, config.low_percentile / 100.0);
  out.high = imgproc::interpolated_percentile(values, config.high_percentile / 100.0);
  return out;
}

std::vector<std::size_t> cells_of_tiles(const std::vector<std::vector<std::size_t>>& cells_by_tile,
                                        const std::vector<std::size_t>& tiles) {
  std::vector<std::size_t> out;
  for (std::size_t t : tiles) {
    const auto& c = cells_by_tile.at(t);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

double random_baseline_f1(std::span<const std::uint8_t> truth, double prevalence, int runs, std::uint64_t seed) {
  if (!(prevalence >= 0 && prevalence <= 1)) throw UserError("prevalence must be in [0, 1]");
  if (runs < 1) throw UserError("runs must be >= 1");
  std::vector<std::uint8_t> pred(truth.size());
  double total = 0;
  for (int r = 0; r < runs; ++r) {
    Rng rng(derive_seed(seed, "random_baseline", static_cast<std::uint64_t>(r)));
    for (auto& p : pred) p = rng.uniform() < prevalence;
    total += f1_binary(pred, truth);
  }
  return total / runs;
}

double random_baseline_f1(double prevalence, std::size_t n_cells, int runs, std::uint64_t seed) {
  if (!(prevalence >= 0 && prevalence <= 1)) throw UserError("prevalence must be in [0, 1]");
  std::vector<std::uint8_t> truth(n_cells, 0);
  const auto positives = static_cast<std::size_t>(std::llround(prevalence * static_cast<double>(n_cells)));
  std::fill(truth.begin(), truth.begin() + static_cast<std::ptrdiff_t>(positives), 1);
  Rng rng(derive_seed(seed, "random_baseline_truth"));
  for (std::size_t i = truth.size(); i > 1; --i) std::swap(truth[i - 1], truth[rng.below(i)]);
  return random_baseline_f1(truth, prevalence, runs, seed);
}

CountCorrelation cellcount_correlation(std::span<const double> predicted, std::span<const double> reference) {
  if (predicted.size() != reference.size()) throw UserError("count correlation: length mismatch");
  if (predicted.size() < 2) throw UserError("count correlation needs at least 2 tiles");
  CountCorrelation c;
  PearsonAccumulator acc;
  acc.add(predicted, reference);
  c.pearson = acc.value();
  const double n = static_cast<double>(predicted.size());
  const double mx = std::accumulate(predicted.begin(), predicted.end(), 0.0) / n;
  const double my = std::accumulate(reference.begin(), reference.end(), 0.0) / n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    sxx += (predicted[i] - mx) * (predicted[i] - mx);
    sxy += (predicted[i] - mx) * (reference[i] - my);
  }
  if (sxx > 0) {
    c.slope = sxy / sxx;
    c.intercept = my - c.slope * mx;
  }
  return c;
}

}  // namespace stainforge::eval
