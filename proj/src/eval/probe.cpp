#include "stainforge/eval/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "stainforge/common.hpp"

namespace stainforge::eval {

FeatureMatrix FeatureMatrix::select(std::span<const std::size_t> idx) const {
  FeatureMatrix out(idx.size(), cols);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return out;
}

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double ProbeModel::probability(std::span<const double> row) const {
  if (!fitted) throw UserError("probe is not fitted" + (skip_reason.empty() ? "" : ": " + skip_reason));
  double z = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * (row[j] - mean[j]) / scale[j];
  return sigmoid(z);
}

std::vector<double> ProbeModel::predict_proba(const FeatureMatrix& x) const {
  std::vector<double> p(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) p[r] = probability({x.data.data() + r * x.cols, x.cols});
  return p;
}

ProbeModel fit_probe(const FeatureMatrix& x, std::span<const std::uint8_t> labels, const ProbeOptions& options) {
  if (labels.size() != x.rows) throw UserError("probe: label count != feature rows");
  if (!(options.l2 > 0)) throw UserError("probe: l2 strength must be positive");
  ProbeModel m;
  const std::size_t n = x.rows, d = x.cols;
  const auto pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  if (n == 0 || pos == 0 || pos == n) {
    m.skip_reason = n == 0 ? "no fit cells" : "single-class labels in fit split";
    return m;
  }
  // Population statistics, so uniformly duplicated data standardizes identically.
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += x.at(r, j);
  }
  for (auto& v : m.mean) v /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) m.scale[j] += (x.at(r, j) - m.mean[j]) * (x.at(r, j) - m.mean[j]);
  }
  for (auto& v : m.scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 0)) v = 1.0;
  }
  const int p = static_cast<int>(d) + 1;  // last coordinate is the bias
  Eigen::MatrixXd z(n, p);
  Eigen::VectorXd y(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) z(r, j) = (x.at(r, j) - m.mean[j]) / m.scale[j];
    z(r, p - 1) = 1.0;
    y(r) = labels[r] ? 1.0 : 0.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::VectorXd reg = Eigen::VectorXd::Constant(p, options.l2);
  reg(p - 1) = 0.0;
  auto objective = [&](const Eigen::VectorXd& w) {
    const Eigen::VectorXd s = z * w;
    double f = 0;
    for (std::size_t r = 0; r < n; ++r) f += softplus(s(r)) - y(r) * s(r);
    return f * inv_n + 0.5 * (reg.array() * w.array().square()).sum();
  };
  Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
  double f = objective(w);
  for (int it = 0; it < options.max_iterations; ++it) {
    const Eigen::VectorXd s = z * w;
    Eigen::VectorXd prob(n), curv(n);
    for (std::size_t r = 0; r < n; ++r) {
      prob(r) = sigmoid(s(r));
      curv(r) = prob(r) * (1 - prob(r));
    }
    const Eigen::VectorXd grad = z.transpose() * (prob - y) * inv_n + reg.cwiseProduct(w);
    Eigen::MatrixXd hess = z.transpose() * curv.asDiagonal() * z * inv_n;
    hess.diagonal() += reg;
    hess.diagonal().array() += 1e-12;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    double t = 1.0, fn = f;
    Eigen::VectorXd wn = w;
    for (int ls = 0; ls < 50; ++ls) {
      wn = w - t * step;
      fn = objective(wn);
      if (fn <= f - 1e-4 * t * grad.dot(step)) break;
      t *= 0.5;
    }
    m.iterations = it + 1;
    const double gnorm = grad.lpNorm<Eigen::Infinity>();
    const bool small_change = std::abs(f - fn) < options.tolerance;
    if (fn <= f) {
      w = wn;
      f = fn;
    }
    if (gnorm < options.tolerance || small_change) {
      m.converged = true;
      break;
    }
  }
  m.weights.assign(w.data(), w.data() + d);
  m.bias = w(p - 1);
  m.objective = f;
  m.fitted = true;
  return m;
}

CellSplit random_cell_split(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw UserError("split fraction must be in (0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "probe_split"));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  CellSplit s;
  s.fit.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  s.score.assign(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::sort(s.fit.begin(), s.fit.end());
  std::sort(s.score.begin(), s.score.end());
  return s;
}

}  // namespace stainforge::eval
