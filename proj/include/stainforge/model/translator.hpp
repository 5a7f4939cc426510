#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/model/layers.hpp"

namespace stainforge::model {

struct ViTConfig {
  int patch_size = 8;
  int depth = 4;
  int width = 128;
  int heads = 4;
  double mlp_ratio = 4.0;
  double dropout = 0.1;
};

struct TranslatorConfig {
  int image_size = 64;
  int markers = 16;
  ViTConfig vit;
  std::array<int, 3> detail_channels{16, 32, 64};      // strides 2, 4, 8
  std::array<int, 4> decoder_channels{64, 32, 16, 16};
  // H&E input standardization, applied to RGB scaled to [0, 1].
  std::array<double, 3> input_mean{0.707223, 0.578729, 0.703617};
  std::array<double, 3> input_std{0.211883, 0.230117, 0.177517};

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TranslatorConfig from_json(const nlohmann::json& j);
};

nlohmann::ordered_json lora_to_json(const LoRAConfig& c);
LoRAConfig lora_from_json(const nlohmann::json& j);

/// Plain ViT: non-overlapping patch embedding, learned position embedding,
/// pre-norm blocks, final LayerNorm. The token grid (image/patch per side)
/// is resized bicubically to image/16 per side to form the bottleneck.
class VitEncoder {
 public:
  VitEncoder() = default;
  VitEncoder(const TranslatorConfig& config);

  /// x: standardized (N, 3, H, W). Returns (N, width, H/16, W/16).
  Tensor forward(const Tensor& x, bool train, Rng& rng);
  Tensor backward(const Tensor& grad_out);
  void collect(ParameterList& out);

  /// Patch embeddings without position embedding, (N, T, width).
  Tensor patch_tokens(const Tensor& x);
  /// Token grid from the last forward, (N, width, g, g), before resizing.
  const Tensor& token_grid() const { return grid_; }

  Linear patch_embed;
  Parameter pos_embed;  // (T, width)
  std::vector<TransformerBlock> blocks;
  LayerNorm norm;

 private:
  int patch_ = 8;
  int grid_side_ = 0;
  int width_ = 0;
  Resize2d resize_;
  Tensor grid_;
  std::vector<int> in_shape_;
};

/// Three stride-2 conv + BN + ReLU stages giving features at strides 2, 4, 8.
class DetailCapture {
 public:
  DetailCapture() = default;
  explicit DetailCapture(const TranslatorConfig& config);

  std::array<Tensor, 3> forward(const Tensor& x, bool train);
  Tensor backward(const std::array<Tensor, 3>& grads);
  void collect(ParameterList& out);
  void relu_pattern(std::vector<std::uint8_t>& out) const;

  std::array<Conv2d, 3> convs;
  std::array<BatchNorm2d, 3> norms;

 private:
  std::array<Relu, 3> acts_;
};

/// Four stages of (bilinear x2, concat skip, 3x3 conv, BN, ReLU); the
/// skips are the stride-8, 4, 2 detail features, the last stage has none.
/// A 1x1 conv with one output per marker and Tanh form the heads.
class Decoder {
 public:
  Decoder() = default;
  explicit Decoder(const TranslatorConfig& config);

  Tensor forward(const Tensor& bottleneck, const std::array<Tensor, 3>& pyramid, bool train);
  /// Returns the bottleneck gradient; pyramid gradients land in `pyramid_grads`.
  Tensor backward(const Tensor& grad_out, std::array<Tensor, 3>& pyramid_grads);
  void collect(ParameterList& out);
  void relu_pattern(std::vector<std::uint8_t>& out) const;

  std::array<Conv2d, 4> convs;
  std::array<BatchNorm2d, 4> norms;
  Conv2d heads;

 private:
  std::array<Resize2d, 4> ups_;
  std::array<Relu, 4> acts_;
  TanhAct tanh_;
  std::array<int, 4> up_channels_{};
};

class Translator {
 public:
  Translator(const TranslatorConfig& config, std::uint64_t seed);

  Translator(const Translator&) = delete;
  Translator& operator=(const Translator&) = delete;

  /// he: (N, 3, H, W) RGB in [0, 255]. Returns (N, markers, H, W) in (-1, 1).
  Tensor forward(const Tensor& he, bool train);
  /// Backpropagates a gradient w.r.t. the last forward's output.
  void backward(const Tensor& grad_out);

  Tensor standardize(const Tensor& he) const;

  /// On/off state of every ReLU unit in the last forward. Two inputs with
  /// equal patterns lie in the same piecewise-smooth region.
  std::vector<std::uint8_t> relu_pattern() const;

  /// Adds adapters to every attention query and value projection and freezes
  /// the rest of the encoder. Throws if adapters are already present.
  void apply_lora(const LoRAConfig& config, std::uint64_t seed);
  bool has_lora() const { return lora_.has_value(); }
  const std::optional<LoRAConfig>& lora() const { return lora_; }

  /// Freezes every encoder parameter (decoder-only training).
  void freeze_encoder();

  ParameterList parameters();
  ParameterList trainable_parameters();
  std::size_t trainable_count();
  std::size_t parameter_count();
  void zero_grad();

  void reseed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed); }

  const TranslatorConfig& config() const { return config_; }

  VitEncoder encoder;
  DetailCapture detail;
  Decoder decoder;

 private:
  TranslatorConfig config_;
  std::optional<LoRAConfig> lora_;
  Rng dropout_rng_{0};
};

/// Scales a normalized intensity in [0, 255] to the Tanh target range [-0.9, 0.9].
inline double scale_target(double v) { return v / 255.0 * 1.8 - 0.9; }
/// Maps a head output back to [0, 255] normalized intensity (clamped).
double unscale_prediction(double t);

}  // namespace stainforge::model
