#include "stainforge/model/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace stainforge::model {

GradCheckReport check_gradients(Objective& objective, int probes, std::uint64_t seed, double h, double floor) {
  GradCheckReport report;
  ParameterList params;
  for (Parameter* p : objective.parameters()) {
    if (p->trainable && !p->buffer) params.push_back(p);
  }
  std::vector<std::size_t> offsets{0};
  for (Parameter* p : params) offsets.push_back(offsets.back() + p->value.numel());
  report.parameter_count = offsets.back();
  if (report.parameter_count == 0) return report;

  objective.evaluate();
  const auto base_pattern = objective.kink_pattern();
  objective.gradient();
  std::vector<std::vector<double>> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad.data);

  Rng rng(seed);
  const long max_draws = 20L * probes;
  for (long draw = 0; static_cast<int>(report.entries.size()) < probes && draw < max_draws; ++draw) {
    const std::size_t flat = rng.below(report.parameter_count);
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat) - 1;
    const std::size_t which = static_cast<std::size_t>(it - offsets.begin());
    const std::size_t idx = flat - *it;
    double& w = params[which]->value[idx];
    const double saved = w;
    w = saved + h;
    const double up = objective.evaluate();
    const bool up_same = objective.kink_pattern() == base_pattern;
    w = saved - h;
    const double down = objective.evaluate();
    const bool down_same = objective.kink_pattern() == base_pattern;
    w = saved;
    if (!up_same || !down_same) {
      ++report.nonsmooth_skipped;
      continue;
    }
    const double numeric = (up - down) / (2 * h);
    GradCheckEntry e;
    e.parameter = params[which]->name;
    e.index = idx;
    e.analytic = analytic[which][idx];
    e.numeric = numeric;
    const double abs_err = std::abs(e.analytic - e.numeric);
    e.rel_error = abs_err / std::max({std::abs(e.analytic), std::abs(e.numeric), floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (e.rel_error > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = e.rel_error;
      report.worst = e.parameter + "[" + std::to_string(idx) + "]";
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

TranslatorObjective::TranslatorObjective(Translator& model, Tensor he, Tensor target, LossConfig loss)
    : model_(model), he_(std::move(he)), target_(std::move(target)), loss_(std::move(loss)) {}

double TranslatorObjective::evaluate() {
  model_.reseed_dropout(0);
  return weighted_mse(model_.forward(he_, true), target_, loss_).loss;
}

void TranslatorObjective::gradient() {
  model_.reseed_dropout(0);
  model_.zero_grad();
  const auto r = weighted_mse(model_.forward(he_, true), target_, loss_);
  model_.backward(r.grad);
}

ParameterList TranslatorObjective::parameters() { return model_.parameters(); }

LinearHeadObjective::LinearHeadObjective(int in, int out, int rows, std::uint64_t seed)
    : layer("head", in, out), input({rows, in}), target({rows, out}) {
  Rng rng(seed);
  for (auto& v : layer.weight.value.data) v = rng.normal(0.0, 0.5);
  for (auto& v : layer.bias.value.data) v = rng.normal(0.0, 0.5);
  for (auto& v : input.data) v = rng.normal();
  for (auto& v : target.data) v = rng.normal();
  loss.sigma.assign(out, 1.0);
  for (int j = 0; j < out; ++j) loss.sigma[j] = 0.5 + 0.25 * j;
}

namespace {
// weighted_mse wants (N, M, H, W); treat each row as one sample of M 1x1 maps.
Tensor as_maps(const Tensor& t) { return t.reshaped({t.dim(0), t.dim(1), 1, 1}); }
}  // namespace

double LinearHeadObjective::evaluate() { return weighted_mse(as_maps(layer.forward(input)), as_maps(target), loss).loss; }

void LinearHeadObjective::gradient() {
  layer.weight.grad.zero();
  layer.bias.grad.zero();
  const Tensor y = layer.forward(input);
  const auto r = weighted_mse(as_maps(y), as_maps(target), loss);
  layer.backward(r.grad.reshaped(y.shape));
}

ParameterList LinearHeadObjective::parameters() {
  ParameterList out;
  layer.collect(out);
  return out;
}

void LinearHeadObjective::set_target_to_output() { target = layer.forward(input); }

TranslatorConfig toy_translator_config() {
  TranslatorConfig c;
  c.image_size = 32;
  c.markers = 2;
  c.vit.patch_size = 8;
  c.vit.depth = 1;
  c.vit.width = 8;
  c.vit.heads = 2;
  c.vit.mlp_ratio = 2.0;
  c.vit.dropout = 0.0;
  c.detail_channels = {4, 4, 4};
  c.decoder_channels = {4, 4, 4, 4};
  return c;
}

}  // namespace stainforge::model
