#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/eval/report.hpp"
#include "stainforge/image.hpp"
#include "stainforge/model/tensor.hpp"

namespace stainforge::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct RunContext {
  json config;
  std::string config_hash;
  std::uint64_t seed = 0;
  int jobs = 1;
  fs::path output;
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

/// Applies --seed/--jobs overrides and resolves the output directory.
RunContext make_context(json config, std::optional<std::uint64_t> seed, std::optional<int> jobs);

struct PreprocessResult {
  int kept = 0;
  int dropped = 0;
  std::size_t cells = 0;
  fs::path dir;
};
PreprocessResult cmd_preprocess(const RunContext& ctx);

struct TrainResult {
  int steps = 0;
  double final_loss = 0.0;
  std::vector<double> train_pearson;
  fs::path final_checkpoint;
  fs::path best_checkpoint;
  bool stopped_early = false;  // halted by train.stop_after
};
TrainResult cmd_train(const RunContext& ctx);

eval::MetricReport cmd_evaluate(const RunContext& ctx);

/// Writes the synthetic dataset described by the "synth" section.
json cmd_synth(const RunContext& ctx);

// Shared helpers.
model::Tensor rgb_to_tensor(const RgbImage& rgb);
model::Tensor stack_to_tensor(const ChannelStack& stack);
/// Mean of each channel of `maps` (C, H, W) over every instance of `cells`,
/// rows ordered by instance id.
std::vector<std::vector<double>> cell_means(const model::Tensor& maps, const InstanceMask& cells);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; results must be
/// written to per-index slots. Exceptions propagate (first by index).
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace stainforge::pipeline
