#include "stainforge/model/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stainforge/imgproc.hpp"
#include "stainforge/model/checkpoint.hpp"
#include "stainforge/stats.hpp"
#include "stainforge/textio.hpp"

namespace stainforge::model {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw UserError("train.lr must be positive");
  if (warmup < 0) throw UserError("train.warmup must be >= 0");
  if (weight_decay < 0) throw UserError("train.weight_decay must be >= 0");
  if (!(grad_clip_norm > 0)) throw UserError("train.grad_clip_norm must be positive");
  if (batch < 1) throw UserError("train.batch must be >= 1");
  if (epochs < 0 || max_steps < 0) throw UserError("train.epochs and train.max_steps must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw UserError("Adam betas must be in [0, 1)");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"warmup", warmup},
          {"weight_decay", weight_decay},
          {"grad_clip_norm", grad_clip_norm},
          {"batch", batch},
          {"epochs", epochs},
          {"max_steps", max_steps},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"val_every", val_every},
          {"seed", seed},
          {"augment", augment.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.warmup = j.value("warmup", c.warmup);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.val_every = j.value("val_every", c.val_every);
  c.seed = j.value("seed", c.seed);
  if (j.contains("augment")) c.augment = AugmentConfig::from_json(j["augment"]);
  c.validate();
  return c;
}

double learning_rate(int t, int total, const TrainConfig& config) {
  if (t < 1 || total < 1) return 0.0;
  const double warm = config.warmup > 0 ? std::min(1.0, static_cast<double>(t) / config.warmup) : 1.0;
  const int half = total / 2;
  double decay = 1.0;
  if (t > half) decay = std::max(0.0, static_cast<double>(total - t) / static_cast<double>(total - half));
  return config.lr * std::min(warm, decay);
}

std::string loss_curve_csv(const std::vector<StepLog>& log, const std::vector<std::string>& markers) {
  std::string out = "step,lr,loss";
  for (const auto& m : markers) out += ",mse_" + m;
  out += "\n";
  for (const auto& s : log) {
    out += std::to_string(s.step) + "," + textio::fmt(s.lr) + "," + textio::fmt(s.loss);
    for (double v : s.mse) out += "," + textio::fmt(v);
    out += "\n";
  }
  return out;
}

Trainer::Trainer(Translator& model, TrainConfig config, LossConfig loss, std::vector<Sample> data)
    : model_(model), config_(std::move(config)), loss_(std::move(loss)), data_(std::move(data)) {
  config_.validate();
  if (data_.empty()) throw UserError("training split is empty");
  const int m = model_.config().markers;
  const int side = model_.config().image_size;
  for (const auto& s : data_) {
    require_shape(s.he, {3, side, side}, "training H&E tile");
    require_shape(s.target, {m, side, side}, "training target");
  }
  if (loss_.sigma.size() != static_cast<std::size_t>(m)) throw UserError("loss sigma count != markers");
  params_ = model_.trainable_parameters();
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.numel(), 0.0);
    v_.emplace_back(p->value.numel(), 0.0);
  }
}

int Trainer::steps_per_epoch() const {
  return static_cast<int>((data_.size() + config_.batch - 1) / config_.batch);
}

int Trainer::total_steps() const {
  if (config_.max_steps > 0) return config_.max_steps;
  return config_.epochs * steps_per_epoch();
}

std::vector<std::size_t> Trainer::batch_indices(int step) const {
  const int spe = steps_per_epoch();
  const int epoch = (step - 1) / spe;
  const int pos = (step - 1) % spe;
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(config_.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t begin = static_cast<std::size_t>(pos) * config_.batch;
  const std::size_t end = std::min(order.size(), begin + config_.batch);
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

StepLog Trainer::train_step() {
  if (done()) throw Error("training already finished");
  const int t = step_ + 1;
  const auto idx = batch_indices(t);
  const int side = model_.config().image_size;
  const int m = model_.config().markers;
  const int n = static_cast<int>(idx.size());
  const std::size_t he_sz = 3ull * side * side, tg_sz = static_cast<std::size_t>(m) * side * side;

  Tensor he({n, 3, side, side});
  Tensor target({n, m, side, side});
  for (int b = 0; b < n; ++b) {
    const std::uint64_t aseed = derive_seed(config_.seed, "augment", (static_cast<std::uint64_t>(t) << 20) + b);
    const Sample s = augment_pair(data_[idx[b]], aseed, config_.augment);
    std::copy(s.he.data.begin(), s.he.data.end(), he.data.begin() + static_cast<std::ptrdiff_t>(b * he_sz));
    for (std::size_t i = 0; i < tg_sz; ++i) target[b * tg_sz + i] = scale_target(s.target[i]);
  }

  model_.reseed_dropout(derive_seed(config_.seed, "dropout", static_cast<std::uint64_t>(t)));
  model_.zero_grad();
  const Tensor pred = model_.forward(he, true);
  const LossResult lr = weighted_mse(pred, target, loss_);
  if (!std::isfinite(lr.loss)) {
    throw Error("non-finite training loss at step " + std::to_string(t) + " (loss=" + textio::fmt(lr.loss) +
                "); check learning rate and input data");
  }
  model_.backward(lr.grad);

  double sq = 0.0;
  for (Parameter* p : params_) {
    for (double g : p->grad.data) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = std::min(1.0, config_.grad_clip_norm / (norm + 1e-6));
  const double rate = learning_rate(t, total_steps(), config_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& w = params_[k]->value.data;
    const auto& g = params_[k]->grad.data;
    auto& mk = m_[k];
    auto& vk = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip + config_.weight_decay * w[i];
      mk[i] = config_.beta1 * mk[i] + (1 - config_.beta1) * gi;
      vk[i] = config_.beta2 * vk[i] + (1 - config_.beta2) * gi * gi;
      w[i] -= rate * (mk[i] / bc1) / (std::sqrt(vk[i] / bc2) + config_.eps);
    }
  }
  step_ = t;
  StepLog entry{t, rate, lr.loss, lr.per_marker_mse};
  log_.push_back(entry);
  return entry;
}

void Trainer::run(const std::function<void(const StepLog&)>& on_step) {
  while (!done()) {
    const StepLog s = train_step();
    if (on_step) on_step(s);
  }
}

void Trainer::save_state(const std::filesystem::path& path) const {
  std::vector<NamedArray> arrays = snapshot(model_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    arrays.push_back({"adam.m." + params_[k]->name, params_[k]->value.shape, m_[k]});
    arrays.push_back({"adam.v." + params_[k]->name, params_[k]->value.shape, v_[k]});
  }
  arrays.push_back({"trainer.step", {1}, {static_cast<double>(step_)}});
  const int count = static_cast<int>(log_.size());
  const int m = model_.config().markers;
  NamedArray steps{"log.step", {count}, {}}, lrs{"log.lr", {count}, {}}, losses{"log.loss", {count}, {}};
  NamedArray mses{"log.mse", {count, m}, {}};
  for (const auto& s : log_) {
    steps.data.push_back(s.step);
    lrs.data.push_back(s.lr);
    losses.data.push_back(s.loss);
    mses.data.insert(mses.data.end(), s.mse.begin(), s.mse.end());
  }
  arrays.insert(arrays.end(), {steps, lrs, losses, mses});
  write_arrays(path, arrays, DType::kF64);
}

void Trainer::load_state(const std::filesystem::path& path) {
  const auto arrays = read_arrays(path);
  restore(model_, arrays);
  auto find = [&](const std::string& name) -> const NamedArray& {
    for (const auto& a : arrays) {
      if (a.name == name) return a;
    }
    throw UserError("resume state lacks " + name);
  };
  for (std::size_t k = 0; k < params_.size(); ++k) {
    m_[k] = find("adam.m." + params_[k]->name).data;
    v_[k] = find("adam.v." + params_[k]->name).data;
  }
  step_ = static_cast<int>(find("trainer.step").data.at(0));
  const auto& steps = find("log.step");
  const auto& lrs = find("log.lr");
  const auto& losses = find("log.loss");
  const auto& mses = find("log.mse");
  const int m = model_.config().markers;
  log_.clear();
  for (std::size_t i = 0; i < steps.data.size(); ++i) {
    StepLog s{static_cast<int>(steps.data[i]), lrs.data[i], losses.data[i], {}};
    s.mse.assign(mses.data.begin() + static_cast<std::ptrdiff_t>(i * m),
                 mses.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
    log_.push_back(std::move(s));
  }
}

std::vector<Tensor> predict_samples(Translator& model, const std::vector<Sample>& data, int batch) {
  const int side = model.config().image_size;
  const int m = model.config().markers;
  const std::size_t he_sz = 3ull * side * side, out_sz = static_cast<std::size_t>(m) * side * side;
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const int n = static_cast<int>(std::min<std::size_t>(batch, data.size() - start));
    Tensor he({n, 3, side, side});
    for (int b = 0; b < n; ++b) {
      require_shape(data[start + b].he, {3, side, side}, "H&E tile");
      std::copy(data[start + b].he.data.begin(), data[start + b].he.data.end(),
                he.data.begin() + static_cast<std::ptrdiff_t>(b * he_sz));
    }
    const Tensor pred = model.forward(he, false);
    for (int b = 0; b < n; ++b) {
      Tensor t({m, side, side});
      for (std::size_t i = 0; i < out_sz; ++i) t[i] = unscale_prediction(pred[b * out_sz + i]);
      out.push_back(std::move(t));
    }
  }
  return out;
}

std::vector<double> evaluate_pearson(Translator& model, const std::vector<Sample>& data, int batch) {
  const int m = model.config().markers;
  const auto preds = predict_samples(model, data, batch);
  std::vector<PearsonAccumulator> acc(m);
  for (std::size_t k = 0; k < data.size(); ++k) {
    const std::size_t plane = preds[k].numel() / m;
    for (int j = 0; j < m; ++j) {
      acc[j].add(std::span<const double>(preds[k].ptr() + j * plane, plane),
                 std::span<const double>(data[k].target.ptr() + j * plane, plane));
    }
  }
  std::vector<double> r;
  for (const auto& a : acc) r.push_back(a.value());
  return r;
}

void Predictor::load(const std::filesystem::path& checkpoint) { model_ = load_checkpoint(checkpoint).model; }

Translator& Predictor::model() {
  if (!model_) throw UserError("predictor has no model loaded");
  return *model_;
}

Tensor Predictor::predict_tile(const Tensor& he) {
  Translator& m = model();
  Sample s;
  s.he = he;
  return predict_samples(m, {s}, 1).front();
}

Tensor Predictor::predict_tile_raw(const Tensor& he, const std::vector<double>& q999, bool natural_log) {
  Tensor t = predict_tile(he);
  const int m = t.dim(0);
  if (q999.size() != static_cast<std::size_t>(m)) throw UserError("q999 count != markers");
  const std::size_t plane = t.numel() / m;
  const auto base = natural_log ? imgproc::LogBase::kNatural : imgproc::LogBase::kTwo;
  for (int j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < plane; ++i) t[j * plane + i] = imgproc::denormalize_value(t[j * plane + i], q999[j], base);
  }
  return t;
}

}  // namespace stainforge::model
