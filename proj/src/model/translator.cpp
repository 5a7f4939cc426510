#include "stainforge/model/translator.hpp"

#include <algorithm>
#include <cmath>

namespace stainforge::model {

void TranslatorConfig::validate() const {
  const auto& v = vit;
  if (image_size < 16 || image_size % 16 != 0) throw UserError("image_size must be a positive multiple of 16");
  if (v.patch_size < 1 || image_size % v.patch_size != 0) throw UserError("image_size must be divisible by patch_size");
  if (v.heads < 1 || v.width % v.heads != 0) throw UserError("ViT width must be divisible by heads");
  if (v.depth < 0 || v.mlp_ratio <= 0) throw UserError("invalid ViT depth or mlp_ratio");
  if (!(v.dropout >= 0 && v.dropout < 1)) throw UserError("dropout must be in [0, 1)");
  if (markers < 1) throw UserError("translator needs at least one marker");
  for (int c : detail_channels) {
    if (c < 1) throw UserError("detail channels must be positive");
  }
  for (int c : decoder_channels) {
    if (c < 1) throw UserError("decoder channels must be positive");
  }
  for (double s : input_std) {
    if (!(s > 0)) throw UserError("input_std must be positive");
  }
}

nlohmann::ordered_json TranslatorConfig::to_json() const {
  nlohmann::ordered_json j;
  j["image_size"] = image_size;
  j["markers"] = markers;
  j["vit"] = {{"patch_size", vit.patch_size}, {"depth", vit.depth},         {"width", vit.width},
              {"heads", vit.heads},           {"mlp_ratio", vit.mlp_ratio}, {"dropout", vit.dropout}};
  j["detail_channels"] = detail_channels;
  j["decoder_channels"] = decoder_channels;
  j["input_mean"] = input_mean;
  j["input_std"] = input_std;
  return j;
}

TranslatorConfig TranslatorConfig::from_json(const nlohmann::json& j) {
  TranslatorConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.markers = j.value("markers", c.markers);
  if (j.contains("vit")) {
    const auto& v = j["vit"];
    c.vit.patch_size = v.value("patch_size", c.vit.patch_size);
    c.vit.depth = v.value("depth", c.vit.depth);
    c.vit.width = v.value("width", c.vit.width);
    c.vit.heads = v.value("heads", c.vit.heads);
    c.vit.mlp_ratio = v.value("mlp_ratio", c.vit.mlp_ratio);
    c.vit.dropout = v.value("dropout", c.vit.dropout);
  }
  if (j.contains("detail_channels")) c.detail_channels = j["detail_channels"].get<std::array<int, 3>>();
  if (j.contains("decoder_channels")) c.decoder_channels = j["decoder_channels"].get<std::array<int, 4>>();
  if (j.contains("input_mean")) c.input_mean = j["input_mean"].get<std::array<double, 3>>();
  if (j.contains("input_std")) c.input_std = j["input_std"].get<std::array<double, 3>>();
  c.validate();
  return c;
}

nlohmann::ordered_json lora_to_json(const LoRAConfig& c) {
  return {{"rank", c.rank}, {"alpha", c.alpha}, {"init_std", c.init_std}};
}

LoRAConfig lora_from_json(const nlohmann::json& j) {
  LoRAConfig c;
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

double unscale_prediction(double t) { return std::clamp(255.0 * (t / 0.9 + 1.0) / 2.0, 0.0, 255.0); }

// ---------------------------------------------------------------- encoder

VitEncoder::VitEncoder(const TranslatorConfig& config)
    : patch_embed("encoder.patch_embed", 3 * config.vit.patch_size * config.vit.patch_size, config.vit.width),
      norm("encoder.norm", config.vit.width),
      patch_(config.vit.patch_size),
      grid_side_(config.image_size / config.vit.patch_size),
      width_(config.vit.width),
      resize_(grid_side_, grid_side_, config.image_size / 16, config.image_size / 16, Interp::kBicubic) {
  pos_embed = Parameter("encoder.pos_embed", {grid_side_ * grid_side_, width_});
  for (int i = 0; i < config.vit.depth; ++i) {
    blocks.emplace_back("encoder.blocks." + std::to_string(i), width_, config.vit.heads, config.vit.mlp_ratio,
                        config.vit.dropout);
  }
}

void VitEncoder::collect(ParameterList& out) {
  patch_embed.collect(out);
  out.push_back(&pos_embed);
  for (auto& b : blocks) b.collect(out);
  norm.collect(out);
}

Tensor VitEncoder::patch_tokens(const Tensor& x) {
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (x.dim(1) != 3 || h != grid_side_ * patch_ || w != grid_side_ * patch_) {
    throw UserError("ViT input must be (N, 3, " + std::to_string(grid_side_ * patch_) + ", " +
                    std::to_string(grid_side_ * patch_) + "), got " + shape_string(x.shape));
  }
  const int g = grid_side_, p = patch_, f = 3 * p * p;
  Tensor patches({n, g * g, f});
  for (int b = 0; b < n; ++b) {
    for (int gy = 0; gy < g; ++gy) {
      for (int gx = 0; gx < g; ++gx) {
        double* dst = patches.ptr() + (static_cast<std::size_t>(b) * g * g + gy * g + gx) * f;
        for (int c = 0; c < 3; ++c) {
          for (int py = 0; py < p; ++py) {
            const double* src = x.ptr() + ((static_cast<std::size_t>(b) * 3 + c) * h + gy * p + py) * w + gx * p;
            std::copy_n(src, p, dst + (c * p + py) * p);
          }
        }
      }
    }
  }
  return patch_embed.forward(patches);
}

Tensor VitEncoder::forward(const Tensor& x, bool train, Rng& rng) {
  in_shape_ = x.shape;
  Tensor tokens = patch_tokens(x);
  const int n = x.dim(0), t = grid_side_ * grid_side_, d = width_;
  for (int b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < pos_embed.value.numel(); ++i) tokens[b * pos_embed.value.numel() + i] += pos_embed.value[i];
  }
  for (auto& blk : blocks) tokens = blk.forward(tokens, train, rng);
  tokens = norm.forward(tokens);
  grid_ = Tensor({n, d, grid_side_, grid_side_});
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < t; ++i) {
      for (int c = 0; c < d; ++c) {
        grid_[(static_cast<std::size_t>(b) * d + c) * t + i] = tokens[(static_cast<std::size_t>(b) * t + i) * d + c];
      }
    }
  }
  return resize_.forward(grid_);
}

Tensor VitEncoder::backward(const Tensor& grad_out) {
  const Tensor dgrid = resize_.backward(grad_out);
  const int n = in_shape_[0], t = grid_side_ * grid_side_, d = width_;
  Tensor dtok({n, t, d});
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < t; ++i) {
      for (int c = 0; c < d; ++c) {
        dtok[(static_cast<std::size_t>(b) * t + i) * d + c] = dgrid[(static_cast<std::size_t>(b) * d + c) * t + i];
      }
    }
  }
  dtok = norm.backward(dtok);
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) dtok = it->backward(dtok);
  if (pos_embed.trainable) {
    for (int b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < pos_embed.grad.numel(); ++i) pos_embed.grad[i] += dtok[b * pos_embed.grad.numel() + i];
    }
  }
  const Tensor dpatches = patch_embed.backward(dtok);
  const int g = grid_side_, p = patch_, f = 3 * p * p, h = in_shape_[2], w = in_shape_[3];
  Tensor dx(in_shape_);
  for (int b = 0; b < n; ++b) {
    for (int gy = 0; gy < g; ++gy) {
      for (int gx = 0; gx < g; ++gx) {
        const double* src = dpatches.ptr() + (static_cast<std::size_t>(b) * g * g + gy * g + gx) * f;
        for (int c = 0; c < 3; ++c) {
          for (int py = 0; py < p; ++py) {
            double* dst = dx.ptr() + ((static_cast<std::size_t>(b) * 3 + c) * h + gy * p + py) * w + gx * p;
            std::copy_n(src + (c * p + py) * p, p, dst);
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- detail

DetailCapture::DetailCapture(const TranslatorConfig& config) {
  int in = 3;
  for (int i = 0; i < 3; ++i) {
    const int out = config.detail_channels[i];
    convs[i] = Conv2d("detail.conv" + std::to_string(i), in, out, 3, 2, 1);
    norms[i] = BatchNorm2d("detail.norm" + std::to_string(i), out);
    in = out;
  }
}

void DetailCapture::collect(ParameterList& out) {
  for (int i = 0; i < 3; ++i) {
    convs[i].collect(out);
    norms[i].collect(out);
  }
}

std::array<Tensor, 3> DetailCapture::forward(const Tensor& x, bool train) {
  std::array<Tensor, 3> out;
  const Tensor* in = &x;
  for (int i = 0; i < 3; ++i) {
    out[i] = acts_[i].forward(norms[i].forward(convs[i].forward(*in), train));
    in = &out[i];
  }
  return out;
}

Tensor DetailCapture::backward(const std::array<Tensor, 3>& grads) {
  Tensor g = grads[2];
  for (int i = 2; i >= 0; --i) {
    g = convs[i].backward(norms[i].backward(acts_[i].backward(g)));
    if (i > 0) {
      for (std::size_t k = 0; k < g.numel(); ++k) g[k] += grads[i - 1][k];
    }
  }
  return g;
}

// ---------------------------------------------------------------- decoder

Decoder::Decoder(const TranslatorConfig& config) {
  const int s = config.image_size;
  const std::array<int, 4> skip = {config.detail_channels[2], config.detail_channels[1], config.detail_channels[0], 0};
  int in = config.vit.width;
  for (int i = 0; i < 4; ++i) {
    const int from = s >> (4 - i);
    ups_[i] = Resize2d(from, from, from * 2, from * 2, Interp::kBilinear);
    up_channels_[i] = in;
    convs[i] = Conv2d("decoder.conv" + std::to_string(i), in + skip[i], config.decoder_channels[i], 3, 1, 1);
    norms[i] = BatchNorm2d("decoder.norm" + std::to_string(i), config.decoder_channels[i]);
    in = config.decoder_channels[i];
  }
  heads = Conv2d("heads", in, config.markers, 1, 1, 0);
}

void Decoder::collect(ParameterList& out) {
  for (int i = 0; i < 4; ++i) {
    convs[i].collect(out);
    norms[i].collect(out);
  }
  heads.collect(out);
}

Tensor Decoder::forward(const Tensor& bottleneck, const std::array<Tensor, 3>& pyramid, bool train) {
  Tensor x = bottleneck;
  for (int i = 0; i < 4; ++i) {
    if (x.dim(1) != up_channels_[i]) throw UserError("decoder stage input has the wrong channel count");
    Tensor up = ups_[i].forward(x);
    if (i < 3) up = concat_channels(up, pyramid[2 - i]);
    x = acts_[i].forward(norms[i].forward(convs[i].forward(up), train));
  }
  return tanh_.forward(heads.forward(x));
}

Tensor Decoder::backward(const Tensor& grad_out, std::array<Tensor, 3>& pyramid_grads) {
  Tensor g = heads.backward(tanh_.backward(grad_out));
  for (int i = 3; i >= 0; --i) {
    g = convs[i].backward(norms[i].backward(acts_[i].backward(g)));
    if (i < 3) {
      auto [gu, gs] = split_channels(g, up_channels_[i]);
      pyramid_grads[2 - i] = std::move(gs);
      g = std::move(gu);
    }
    g = ups_[i].backward(g);
  }
  return g;
}

// ---------------------------------------------------------------- translator

Translator::Translator(const TranslatorConfig& config, std::uint64_t seed)
    : encoder((config.validate(), config)), detail(config), decoder(config), config_(config) {
  Rng rng(derive_seed(seed, "init"));
  for (Parameter* p : parameters()) {
    if (p->buffer) continue;
    const auto& n = p->name;
    auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".bias") || ends_with(".beta")) {
      p->value.zero();
    } else if (ends_with(".gamma")) {
      std::fill(p->value.data.begin(), p->value.data.end(), 1.0);
    } else {
      for (auto& v : p->value.data) v = rng.normal(0.0, 0.02);
    }
  }
  dropout_rng_ = Rng(derive_seed(seed, "dropout"));
}

Tensor Translator::standardize(const Tensor& he) const {
  if (he.rank() != 4 || he.dim(1) != 3) throw UserError("translator input must be (N, 3, H, W)");
  Tensor x = he;
  const std::size_t plane = static_cast<std::size_t>(he.dim(2)) * he.dim(3);
  for (int b = 0; b < he.dim(0); ++b) {
    for (int c = 0; c < 3; ++c) {
      double* p = x.ptr() + (static_cast<std::size_t>(b) * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] / 255.0 - config_.input_mean[c]) / config_.input_std[c];
    }
  }
  return x;
}

Tensor Translator::forward(const Tensor& he, bool train) {
  if (he.dim(2) != config_.image_size || he.dim(3) != config_.image_size) {
    throw UserError("translator expects " + std::to_string(config_.image_size) + "x" +
                    std::to_string(config_.image_size) + " tiles, got " + shape_string(he.shape));
  }
  const Tensor x = standardize(he);
  const Tensor bottleneck = encoder.forward(x, train, dropout_rng_);
  const auto pyramid = detail.forward(x, train);
  return decoder.forward(bottleneck, pyramid, train);
}

void Translator::backward(const Tensor& grad_out) {
  std::array<Tensor, 3> pyramid_grads;
  const Tensor db = decoder.backward(grad_out, pyramid_grads);
  encoder.backward(db);
  detail.backward(pyramid_grads);
}

void Translator::apply_lora(const LoRAConfig& config, std::uint64_t seed) {
  if (lora_) throw UserError("LoRA adapters are already applied");
  Rng rng(derive_seed(seed, "lora"));
  for (std::size_t i = 0; i < encoder.blocks.size(); ++i) {
    auto& attn = encoder.blocks[i].attn;
    const std::string prefix = "encoder.blocks." + std::to_string(i) + ".attn.";
    attn.query.attach_lora(prefix + "query", config, rng);
    attn.value.attach_lora(prefix + "value", config, rng);
  }
  lora_ = config;
  freeze_encoder();
}

void Translator::freeze_encoder() {
  ParameterList enc;
  encoder.collect(enc);
  for (Parameter* p : enc) {
    p->trainable = p->name.find(".lora_") != std::string::npos;
  }
}

ParameterList Translator::parameters() {
  ParameterList out;
  encoder.collect(out);
  detail.collect(out);
  decoder.collect(out);
  return out;
}

ParameterList Translator::trainable_parameters() {
  ParameterList out;
  for (Parameter* p : parameters()) {
    if (p->trainable && !p->buffer) out.push_back(p);
  }
  return out;
}

std::size_t Translator::trainable_count() {
  std::size_t n = 0;
  for (Parameter* p : trainable_parameters()) n += p->value.numel();
  return n;
}

std::size_t Translator::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) {
    if (!p->buffer) n += p->value.numel();
  }
  return n;
}

void Translator::zero_grad() {
  for (Parameter* p : parameters()) p->grad.zero();
}

void DetailCapture::relu_pattern(std::vector<std::uint8_t>& out) const {
  for (const auto& a : acts_) a.append_pattern(out);
}

void Decoder::relu_pattern(std::vector<std::uint8_t>& out) const {
  for (const auto& a : acts_) a.append_pattern(out);
}

std::vector<std::uint8_t> Translator::relu_pattern() const {
  std::vector<std::uint8_t> out;
  detail.relu_pattern(out);
  decoder.relu_pattern(out);
  return out;
}

}  // namespace stainforge::model
