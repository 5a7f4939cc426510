#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stainforge/model/loss.hpp"
#include "stainforge/model/translator.hpp"

namespace stainforge::model {

/// Scalar function of a parameter set, with analytic gradient.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual double evaluate() = 0;
  /// Writes d evaluate() / d p into every parameter's grad.
  virtual void gradient() = 0;
  virtual ParameterList parameters() = 0;
  /// Identifies the smooth piece the last evaluate() landed in; probes whose
  /// +-h evaluations change it straddle a kink. Empty = smooth everywhere.
  virtual std::vector<std::uint8_t> kink_pattern() { return {}; }
};

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t parameter_count = 0;
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;
  int nonsmooth_skipped = 0;  // probes redrawn because a kink lay within +-h
};

/// Central differences with step h on `probes` entries drawn uniformly (with
/// replacement) from all parameter scalars. Relative error is
/// |a - n| / max(|a|, |n|, floor). A draw whose +-h evaluations change
/// kink_pattern() is not differentiable within the stencil and is replaced by
/// a fresh draw.
GradCheckReport check_gradients(Objective& objective, int probes, std::uint64_t seed, double h = 1e-5,
                                double floor = 1e-6);

/// Translator forward in training mode plus weighted MSE on a fixed batch.
class TranslatorObjective : public Objective {
 public:
  /// he: (N, 3, H, W) in [0, 255]; target: (N, M, H, W) in [-0.9, 0.9].
  TranslatorObjective(Translator& model, Tensor he, Tensor target, LossConfig loss);
  double evaluate() override;
  void gradient() override;
  ParameterList parameters() override;
  std::vector<std::uint8_t> kink_pattern() override { return model_.relu_pattern(); }

 private:
  Translator& model_;
  Tensor he_, target_;
  LossConfig loss_;
};

/// One Linear map followed directly by weighted MSE.
class LinearHeadObjective : public Objective {
 public:
  LinearHeadObjective(int in, int out, int rows, std::uint64_t seed);
  double evaluate() override;
  void gradient() override;
  ParameterList parameters() override;

  /// Replaces the target with the current output, making the loss zero.
  void set_target_to_output();

  Linear layer;
  Tensor input, target;
  LossConfig loss;
};

/// A translator small enough for finite differences (a few thousand params).
TranslatorConfig toy_translator_config();

}  // namespace stainforge::model
