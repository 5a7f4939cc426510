#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/model/augment.hpp"
#include "stainforge/model/loss.hpp"
#include "stainforge/model/translator.hpp"

namespace stainforge::model {

struct TrainConfig {
  double lr = 2e-4;
  int warmup = 400;
  double weight_decay = 1e-5;
  double grad_clip_norm = 1.0;
  int batch = 16;
  int epochs = 1;
  int max_steps = 0;  // > 0 caps the schedule length
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  int val_every = 0;  // 0 disables periodic validation
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Learning rate at iteration t (1-based) of `total`: linear warmup from 0
/// over `warmup` iterations, constant until total/2, then linear to 0.
double learning_rate(int t, int total, const TrainConfig& config);

struct StepLog {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::vector<double> mse;
};

std::string loss_curve_csv(const std::vector<StepLog>& log, const std::vector<std::string>& markers);

/// Adam with L2 weight decay added to the clipped gradient.
class Trainer {
 public:
  Trainer(Translator& model, TrainConfig config, LossConfig loss, std::vector<Sample> data);

  int steps_per_epoch() const;
  int total_steps() const;
  int step() const { return step_; }
  bool done() const { return step_ >= total_steps(); }

  /// Indices of the samples in batch number `step` (1-based).
  std::vector<std::size_t> batch_indices(int step) const;

  StepLog train_step();

  /// Runs to completion; `on_step` sees every log entry.
  void run(const std::function<void(const StepLog&)>& on_step = {});

  const std::vector<StepLog>& log() const { return log_; }

  /// Full-precision resume state: weights, buffers, Adam moments, step, log.
  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  Translator& model_;
  TrainConfig config_;
  LossConfig loss_;
  std::vector<Sample> data_;
  ParameterList params_;
  std::vector<std::vector<double>> m_, v_;
  int step_ = 0;
  std::vector<StepLog> log_;
};

/// Global Pearson per marker between predictions and targets over every pixel
/// of every sample (eval mode, normalized intensity space).
std::vector<double> evaluate_pearson(Translator& model, const std::vector<Sample>& data, int batch = 8);

/// Predictions for a list of samples in normalized [0, 255] space, (M, H, W) each.
std::vector<Tensor> predict_samples(Translator& model, const std::vector<Sample>& data, int batch = 8);

class Predictor {
 public:
  Predictor() = default;
  void load(const std::filesystem::path& checkpoint);
  bool loaded() const { return model_ != nullptr; }
  Translator& model();

  /// he: (3, H, W) RGB in [0, 255]. Returns (M, H, W) normalized intensity.
  Tensor predict_tile(const Tensor& he);
  /// Same, mapped through the inverse normalization to raw intensity.
  Tensor predict_tile_raw(const Tensor& he, const std::vector<double>& q999, bool natural_log = false);

 private:
  std::unique_ptr<Translator> model_;
};

}  // namespace stainforge::model
