#include "stainforge/model/loss.hpp"

#include <algorithm>
#include <cmath>

namespace stainforge::model {

nlohmann::ordered_json LossConfig::to_json() const { return {{"sigma", sigma}, {"lambda", lambda}}; }

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.sigma = j.value("sigma", std::vector<double>{});
  c.lambda = j.value("lambda", 1.0);
  return c;
}

LossResult weighted_mse(const Tensor& pred, const Tensor& target, const LossConfig& config) {
  if (pred.shape != target.shape) {
    throw UserError("weighted_mse: shape " + shape_string(pred.shape) + " vs " + shape_string(target.shape));
  }
  if (pred.rank() != 4) throw UserError("weighted_mse expects (N, M, H, W)");
  const int n = pred.dim(0), m = pred.dim(1);
  const std::size_t plane = static_cast<std::size_t>(pred.dim(2)) * pred.dim(3);
  if (config.sigma.size() != static_cast<std::size_t>(m)) throw UserError("weighted_mse: sigma count != markers");

  LossResult r;
  r.grad = Tensor(pred.shape);
  r.per_marker_mse.assign(m, 0.0);
  const double count = static_cast<double>(n) * plane;
  for (int j = 0; j < m; ++j) {
    double sigma = config.sigma[j];
    if (!(sigma >= LossConfig::kSigmaFloor)) {
      r.warnings.push_back("sigma for marker " + std::to_string(j) + " floored at " +
                           std::to_string(LossConfig::kSigmaFloor));
      sigma = LossConfig::kSigmaFloor;
    }
    const double w = config.lambda / m / sigma;
    double sse = 0.0;
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * m + j) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = pred[off + i] - target[off + i];
        sse += d * d;
        r.grad[off + i] = w * 2.0 * d / count;
      }
    }
    r.per_marker_mse[j] = sse / count;
    r.loss += w * r.per_marker_mse[j];
  }
  return r;
}

std::vector<double> target_sigma(const std::vector<Tensor>& scaled_targets) {
  if (scaled_targets.empty()) throw UserError("target_sigma: no targets");
  const int m = scaled_targets.front().dim(0);
  std::vector<double> sum(m, 0.0), sq(m, 0.0), cnt(m, 0.0);
  for (const auto& t : scaled_targets) {
    if (t.dim(0) != m) throw UserError("target_sigma: marker count differs between targets");
    const std::size_t plane = t.numel() / m;
    for (int j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = t[j * plane + i];
        sum[j] += v;
        sq[j] += v * v;
      }
      cnt[j] += static_cast<double>(plane);
    }
  }
  std::vector<double> sigma(m);
  for (int j = 0; j < m; ++j) {
    const double mean = sum[j] / cnt[j];
    const double var = std::max(sq[j] / cnt[j] - mean * mean, 0.0);
    sigma[j] = std::max(std::sqrt(var), LossConfig::kSigmaFloor);
  }
  return sigma;
}

}  // namespace stainforge::model
