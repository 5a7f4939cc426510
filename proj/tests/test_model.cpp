#include <doctest.h>

#include "oracles.hpp"
#include "stainforge/model/augment.hpp"
#include "stainforge/model/checkpoint.hpp"
#include "stainforge/model/gradcheck.hpp"
#include "stainforge/model/train.hpp"

using namespace stainforge;
using namespace stainforge::model;

namespace {

Tensor random_he(int n, int side, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 3, side, side});
  for (auto& v : t.data) v = rng.uniform(0, 255);
  return t;
}

void randomize(ParameterList params, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (Parameter* p : params) {
    if (p->buffer) continue;
    for (auto& v : p->value.data) v = rng.normal(0.0, scale);
  }
}

// Straight-line ViT over plain vectors: row-major tokens (T, D) per image.
using Mat = std::vector<std::vector<double>>;

Mat linear(const Mat& x, const Parameter& w, const Parameter& b) {
  const int out = w.value.dim(0), in = w.value.dim(1);
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (int o = 0; o < out; ++o) {
      double s = b.value[o];
      for (int i = 0; i < in; ++i) s += x[r][i] * w.value[o * in + i];
      y[r][o] = s;
    }
  }
  return y;
}

Mat layer_norm(const Mat& x, const LayerNorm& ln) {
  Mat y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double mu = oracle::mean(x[r]);
    double var = 0;
    for (double v : x[r]) var += (v - mu) * (v - mu);
    var /= x[r].size();
    for (std::size_t c = 0; c < x[r].size(); ++c) {
      y[r][c] = (x[r][c] - mu) / std::sqrt(var + 1e-6) * ln.gamma.value[c] + ln.beta.value[c];
    }
  }
  return y;
}

Mat reference_vit(const Tensor& x, int b, VitEncoder& enc, int patch, int heads) {
  const int side = x.dim(2), g = side / patch;
  Mat patches;
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      std::vector<double> f;
      for (int c = 0; c < 3; ++c) {
        for (int py = 0; py < patch; ++py) {
          for (int px = 0; px < patch; ++px) {
            f.push_back(x[((b * 3 + c) * side + gy * patch + py) * side + gx * patch + px]);
          }
        }
      }
      patches.push_back(f);
    }
  }
  Mat tok = linear(patches, enc.patch_embed.weight, enc.patch_embed.bias);
  const int t = static_cast<int>(tok.size()), d = static_cast<int>(tok[0].size()), dh = d / heads;
  for (int i = 0; i < t; ++i) {
    for (int c = 0; c < d; ++c) tok[i][c] += enc.pos_embed.value[i * d + c];
  }
  for (auto& blk : enc.blocks) {
    const Mat h = layer_norm(tok, blk.norm1);
    const Mat q = linear(h, blk.attn.query.weight, blk.attn.query.bias);
    const Mat k = linear(h, blk.attn.key.weight, blk.attn.key.bias);
    const Mat v = linear(h, blk.attn.value.weight, blk.attn.value.bias);
    Mat ctx(t, std::vector<double>(d, 0.0));
    for (int hd = 0; hd < heads; ++hd) {
      for (int i = 0; i < t; ++i) {
        std::vector<double> s(t);
        double mx = -1e300, z = 0;
        for (int j = 0; j < t; ++j) {
          double dot = 0;
          for (int c = hd * dh; c < (hd + 1) * dh; ++c) dot += q[i][c] * k[j][c];
          s[j] = dot / std::sqrt(double(dh));
          mx = std::max(mx, s[j]);
        }
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (int j = 0; j < t; ++j) {
          for (int c = hd * dh; c < (hd + 1) * dh; ++c) ctx[i][c] += s[j] / z * v[j][c];
        }
      }
    }
    const Mat a = linear(ctx, blk.attn.proj.weight, blk.attn.proj.bias);
    for (int i = 0; i < t; ++i) {
      for (int c = 0; c < d; ++c) tok[i][c] += a[i][c];
    }
    Mat m = linear(layer_norm(tok, blk.norm2), blk.fc1.weight, blk.fc1.bias);
    for (auto& row : m) {
      for (auto& e : row) e = 0.5 * e * (1 + std::erf(e / std::sqrt(2.0)));
    }
    m = linear(m, blk.fc2.weight, blk.fc2.bias);
    for (int i = 0; i < t; ++i) {
      for (int c = 0; c < d; ++c) tok[i][c] += m[i][c];
    }
  }
  return layer_norm(tok, enc.norm);
}

std::vector<Sample> toy_samples(int n, int side, int markers, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.tile_id = "t" + std::to_string(i);
    s.he = Tensor({3, side, side});
    s.target = Tensor({markers, side, side});
    for (auto& v : s.he.data) v = rng.uniform(0, 255);
    for (std::size_t p = 0; p < s.target.numel(); ++p) s.target[p] = s.he[p % s.he.numel()];
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig small_train(int steps) {
  TrainConfig c;
  c.lr = 1e-3;
  c.warmup = 2;
  c.batch = 2;
  c.max_steps = steps;
  c.seed = 5;
  return c;
}

bool same_weights(Translator& a, Translator& b) {
  const auto x = snapshot(a), y = snapshot(b);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].name != y[i].name || x[i].data != y[i].data) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("translator shapes and bounded output") {
  const auto cfg = toy_translator_config();
  Translator model(cfg, 1);
  const Tensor he = random_he(2, 32, 3);
  const Tensor y = model.forward(he, false);
  CHECK(y.shape == std::vector<int>{2, 2, 32, 32});
  for (double v : y.data) {
    CHECK(v > -1.0);
    CHECK(v < 1.0);
  }
  const auto pyr = model.detail.forward(model.standardize(he), false);
  CHECK(pyr[0].shape == std::vector<int>{2, 4, 16, 16});
  CHECK(pyr[1].shape == std::vector<int>{2, 4, 8, 8});
  CHECK(pyr[2].shape == std::vector<int>{2, 4, 4, 4});
  Rng rng(0);
  CHECK(model.encoder.forward(model.standardize(he), false, rng).shape == std::vector<int>{2, 8, 2, 2});
  CHECK(model.encoder.token_grid().shape == std::vector<int>{2, 8, 4, 4});
  CHECK_THROWS_AS(model.forward(random_he(1, 24, 0), false), UserError);
}

TEST_CASE("uniform input gives identical patch tokens") {
  Translator model(toy_translator_config(), 2);
  Tensor he({1, 3, 32, 32}, 0.37);
  const Tensor tok = model.encoder.patch_tokens(he);
  const int t = tok.dim(1), d = tok.dim(2);
  for (int i = 1; i < t; ++i) {
    for (int c = 0; c < d; ++c) CHECK(tok[i * d + c] == tok[c]);
  }
}

TEST_CASE("ViT matches a straight-line reference") {
  const auto cfg = toy_translator_config();
  Translator model(cfg, 3);
  ParameterList enc;
  model.encoder.collect(enc);
  randomize(enc, 17);
  const Tensor x = random_he(2, 32, 4);
  Tensor xs = x;
  for (auto& v : xs.data) v = v / 255.0 - 0.5;
  Rng rng(0);
  model.encoder.forward(xs, false, rng);
  const Tensor& grid = model.encoder.token_grid();
  const int g = 4, d = cfg.vit.width;
  double worst = 0;
  for (int b = 0; b < 2; ++b) {
    const Mat ref = reference_vit(xs, b, model.encoder, cfg.vit.patch_size, cfg.vit.heads);
    for (int i = 0; i < g * g; ++i) {
      for (int c = 0; c < d; ++c) worst = std::max(worst, std::abs(grid[((b * d + c) * g * g) + i] - ref[i][c]));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("LoRA starts as identity and counts parameters") {
  const auto cfg = toy_translator_config();
  Translator model(cfg, 4);
  std::size_t non_encoder = 0;
  {
    ParameterList p;
    model.detail.collect(p);
    model.decoder.collect(p);
    for (auto* q : p) non_encoder += q->buffer ? 0 : q->value.numel();
  }
  const Tensor he = random_he(3, 32, 9);
  const Tensor before = model.forward(he, false);
  LoRAConfig lc;
  lc.rank = 2;
  model.apply_lora(lc, 7);
  const Tensor after = model.forward(he, false);
  double worst = 0;
  for (std::size_t i = 0; i < before.numel(); ++i) worst = std::max(worst, std::abs(before[i] - after[i]));
  CHECK(worst < 1e-12);
  const int d = cfg.vit.width;
  const std::size_t adapters = static_cast<std::size_t>(cfg.vit.depth) * 2 * lc.rank * (d + d);
  CHECK(model.trainable_count() == adapters + non_encoder);
  CHECK_THROWS_AS(model.apply_lora(lc, 7), UserError);
}

TEST_CASE("weighted_mse") {
  Tensor pred({1, 2, 2, 2}, 0.0), target({1, 2, 2, 2}, 0.0);
  for (int i = 0; i < 4; ++i) pred[i] = 1.0;
  for (int i = 4; i < 8; ++i) pred[i] = 2.0;
  LossConfig lc;
  lc.sigma = {1.0, 2.0};
  auto r = weighted_mse(pred, target, lc);
  CHECK(r.loss == doctest::Approx(1.5));  // (1/1 + 4/2) / 2
  CHECK(r.per_marker_mse[1] == doctest::Approx(4.0));
  // d/dp of (1/M) * mean((p-t)^2) / sigma
  CHECK(r.grad[0] == doctest::Approx(0.5 * 2 * 1.0 / 4 / 1.0));
  CHECK(r.grad[5] == doctest::Approx(0.5 * 2 * 2.0 / 4 / 2.0));
  CHECK(weighted_mse(target, target, lc).loss == 0.0);
  lc.sigma = {1e-9, 1.0};
  r = weighted_mse(pred, target, lc);
  CHECK_FALSE(r.warnings.empty());
  CHECK(std::isfinite(r.loss));
  lc.lambda = 2.0;
  lc.sigma = {1.0, 2.0};
  CHECK(weighted_mse(pred, target, lc).loss == doctest::Approx(3.0));
}

TEST_CASE("augmentation") {
  Sample s;
  s.he = random_he(1, 16, 2).reshaped({3, 16, 16});
  s.target = Tensor({1, 16, 16});
  std::copy_n(s.he.data.begin(), 256, s.target.data.begin());

  SUBCASE("flips are involutions") {
    Tensor t = s.he;
    flip_horizontal(t);
    CHECK(t.data != s.he.data);
    flip_horizontal(t);
    CHECK(t.data == s.he.data);
    flip_vertical(t);
    flip_vertical(t);
    CHECK(t.data == s.he.data);
  }
  SUBCASE("spatial ops are shared by both tiles") {
    AugmentConfig c;
    c.color_p = c.blur_p = c.noise_p = c.stain_p = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto out = augment_pair(s, seed, c);
      CHECK(std::equal(out.target.data.begin(), out.target.data.end(), out.he.data.begin()));
    }
  }
  SUBCASE("dropout box is zero in both tiles") {
    AugmentConfig c;
    c.dropout_p = 1.0;
    c.color_p = c.blur_p = c.noise_p = c.stain_p = 1.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      AugmentTrace tr;
      const auto out = augment_pair(s, seed, c, &tr);
      REQUIRE(tr.dropout);
      CHECK(tr.box_x1 > tr.box_x0);
      for (const Tensor* t : {&out.he, &out.target}) {
        for (int ch = 0; ch < t->dim(0); ++ch) {
          for (int y = tr.box_y0; y < tr.box_y1; ++y) {
            for (int x = tr.box_x0; x < tr.box_x1; ++x) CHECK((*t)[(ch * 16 + y) * 16 + x] == 0.0);
          }
        }
      }
    }
  }
  SUBCASE("deterministic in seed, disabled is identity") {
    AugmentConfig c;
    CHECK(augment_pair(s, 3, c).he.data == augment_pair(s, 3, c).he.data);
    c.enabled = false;
    CHECK(augment_pair(s, 3, c).he.data == s.he.data);
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.lr = 2e-4;
  c.warmup = 400;
  CHECK(learning_rate(200, 10000, c) == doctest::Approx(1e-4));
  CHECK(learning_rate(7500, 10000, c) == doctest::Approx(1e-4));
  CHECK(learning_rate(5000, 10000, c) == doctest::Approx(2e-4));
  CHECK(learning_rate(10000, 10000, c) == 0.0);
}

TEST_CASE("target scaling") {
  CHECK(unscale_prediction(0.9) == doctest::Approx(255.0));
  CHECK(unscale_prediction(-0.9) == doctest::Approx(0.0));
  CHECK(unscale_prediction(0.0) == doctest::Approx(127.5));
  CHECK(unscale_prediction(0.99) == 255.0);
  for (double v : {0.0, 13.0, 200.5, 255.0}) CHECK(unscale_prediction(scale_target(v)) == doctest::Approx(v));
}

TEST_CASE("gradient checks") {
  SUBCASE("linear head") {
    LinearHeadObjective obj(5, 3, 7, 11);
    const auto r = check_gradients(obj, 200, 1);
    CHECK(r.max_rel_error < 1e-8);
  }
  SUBCASE("zero-loss point") {
    LinearHeadObjective obj(5, 3, 7, 12);
    obj.set_target_to_output();
    CHECK(obj.evaluate() == doctest::Approx(0.0).epsilon(1e-20));
    const auto r = check_gradients(obj, 100, 2);
    CHECK(r.max_abs_error < 1e-9);
  }
  SUBCASE("kinks are redrawn, not scored") {
    struct Hinge : Objective {
      Parameter p{"p", {2}, 0.0};
      double evaluate() override { return std::max(p.value[0], 0.0) + 3 * p.value[1] * p.value[1]; }
      void gradient() override {
        p.grad[0] = p.value[0] > 0 ? 1.0 : 0.0;
        p.grad[1] = 6 * p.value[1];
      }
      ParameterList parameters() override { return {&p}; }
      std::vector<std::uint8_t> kink_pattern() override { return {p.value[0] > 0}; }
    } hinge;
    hinge.p.value[0] = 3e-6;
    hinge.p.value[1] = 0.5;
    const auto r = check_gradients(hinge, 20, 3);
    CHECK(r.nonsmooth_skipped > 0);
    CHECK(r.entries.size() == 20);
    for (const auto& e : r.entries) CHECK(e.index == 1);
    CHECK(r.max_rel_error < 1e-8);
  }
  SUBCASE("toy translator") {
    Translator model(toy_translator_config(), 6);
    Rng rng(3);
    Tensor target({2, 2, 32, 32});
    for (auto& v : target.data) v = rng.uniform(-0.9, 0.9);
    LossConfig lc;
    lc.sigma = {0.5, 0.7};
    TranslatorObjective obj(model, random_he(2, 32, 8), target, lc);
    const auto r = check_gradients(obj, 200, 4);
    CHECK(r.parameter_count <= 10000);
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = oracle::temp_dir("ckpt");
  Translator model(toy_translator_config(), 8);
  randomize(model.parameters(), 2, 0.1);
  save_checkpoint(dir / "m.sft", model, {{"note", "x"}});
  auto loaded = load_checkpoint(dir / "m.sft");
  CHECK(loaded.meta["note"] == "x");
  const Tensor he = random_he(1, 32, 1);
  const Tensor a = model.forward(he, false), b = loaded.model->forward(he, false);
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  CHECK(worst < 1e-4);

  const std::vector<NamedArray> arrays{{"a", {2}, {1.0 / 3.0, -0.0}}, {"b", {1, 1}, {1e300}}};
  const auto back = decode_arrays(encode_arrays(arrays, DType::kF64));
  REQUIRE(back.size() == 2);
  CHECK(back[0].data == arrays[0].data);
  CHECK(back[1].shape == arrays[1].shape);
  CHECK_THROWS(decode_arrays("SFTWgarbage"));
}

TEST_CASE("trainer determinism and resume") {
  const auto cfg = toy_translator_config();
  const auto data = toy_samples(5, 32, 2, 1);
  LossConfig lc;
  lc.sigma = {0.5, 0.5};

  Translator a(cfg, 9), b(cfg, 9);
  Trainer ta(a, small_train(6), lc, data), tb(b, small_train(6), lc, data);
  ta.run();
  tb.run();
  CHECK(same_weights(a, b));
  CHECK(ta.log().size() == 6);

  const auto dir = oracle::temp_dir("resume");
  Translator c(cfg, 9);
  {
    Trainer tc(c, small_train(6), lc, data);
    for (int i = 0; i < 3; ++i) tc.train_step();
    tc.save_state(dir / "state.bin");
  }
  Translator d(cfg, 1234);
  Trainer td(d, small_train(6), lc, data);
  td.load_state(dir / "state.bin");
  CHECK(td.step() == 3);
  td.run();
  CHECK(same_weights(a, d));
  CHECK(td.log().back().loss == ta.log().back().loss);

  TrainConfig zero = small_train(0);
  zero.epochs = 0;
  Translator e(cfg, 9), f(cfg, 9);
  Trainer te(e, zero, lc, data);
  CHECK(te.total_steps() == 0);
  te.run();
  CHECK(same_weights(e, f));
}

TEST_CASE("batches cover every sample once per epoch") {
  const auto data = toy_samples(5, 32, 2, 1);
  Translator m(toy_translator_config(), 1);
  LossConfig lc;
  lc.sigma = {1, 1};
  TrainConfig c = small_train(0);
  c.epochs = 2;
  Trainer t(m, c, lc, data);
  CHECK(t.steps_per_epoch() == 3);
  std::vector<int> seen(5, 0);
  for (int s = 1; s <= 3; ++s) {
    for (auto i : t.batch_indices(s)) seen[i]++;
  }
  CHECK(seen == std::vector<int>(5, 1));
}
