// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 = all passed).
//   acceptance [--only N[,N...]] [--work DIR]

#include <chrono>
#include <cstring>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "stainforge/eval/metrics.hpp"
#include "stainforge/gating.hpp"
#include "stainforge/imgproc.hpp"
#include "stainforge/model/gradcheck.hpp"
#include "stainforge/model/train.hpp"
#include "stainforge/pipeline.hpp"
#include "stainforge/stats.hpp"
#include "stainforge/synth.hpp"
#include "stainforge/textio.hpp"

using namespace stainforge;
namespace fs = std::filesystem;
namespace pl = stainforge::pipeline;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) { return textio::fmt(v); }

fs::path g_work;

model::Tensor random_he(int n, int side, std::uint64_t seed) {
  Rng rng(seed);
  model::Tensor t({n, 3, side, side});
  for (auto& v : t.data) v = rng.uniform(0, 255);
  return t;
}

json small_model() {
  return json::parse(R"({"vit": {"patch_size": 8, "depth": 2, "width": 32, "heads": 2, "mlp_ratio": 2.0, "dropout": 0.0},
                         "detail_channels": [8, 8, 16], "decoder_channels": [16, 16, 8, 8]})");
}

// ---------------------------------------------------------------------------

Outcome gradcheck() {
  const auto t0 = Clock::now();
  model::Translator net(model::toy_translator_config(), 1);
  Rng rng(2);
  model::Tensor target({2, 2, 32, 32});
  for (auto& v : target.data) v = rng.uniform(-0.9, 0.9);
  model::LossConfig lc;
  lc.sigma = {0.4, 0.6};
  model::TranslatorObjective obj(net, random_he(2, 32, 3), target, lc);
  const auto r = model::check_gradients(obj, 200, 5);
  const double secs = seconds_since(t0);
  return {r.parameter_count <= 10000 && r.entries.size() >= 200 && r.max_rel_error < 1e-4 && secs < 60,
          std::to_string(r.parameter_count) + " params, " + std::to_string(r.entries.size()) +
              " probes (" + std::to_string(r.nonsmooth_skipped) + " kink draws replaced), max rel err " +
              fmt(r.max_rel_error) + " (" + r.worst + "), " + fmt(secs) + " s"};
}

Outcome lora_identity() {
  model::TranslatorConfig cfg = model::toy_translator_config();
  cfg.vit.depth = 2;
  model::Translator net(cfg, 4);
  const auto x = random_he(16, 32, 6);
  const auto before = net.forward(x, false);
  net.apply_lora({}, 8);
  const auto after = net.forward(x, false);
  double worst = 0;
  for (std::size_t i = 0; i < before.numel(); ++i) worst = std::max(worst, std::abs(before[i] - after[i]));
  return {worst < 1e-7, "16 inputs, max |diff| " + fmt(worst)};
}

Outcome overfit() {
  const auto t0 = Clock::now();
  synth::SynthConfig sc;
  sc.tiles = 8;
  sc.seed = 21;
  std::vector<synth::SynthTile> tiles;
  for (int i = 0; i < sc.tiles; ++i) tiles.push_back(synth::generate_tile(sc, i));
  const int markers = 4;  // Hoechst, PanCK, CD45, CD3
  std::vector<double> q(markers);
  for (int c = 0; c < markers; ++c) {
    imgproc::ChannelStatsAccumulator acc({"m"});
    for (const auto& t : tiles) acc.add(0, t.mif[c].pixels);
    q[c] = acc.finalize().q999[0];
  }
  std::vector<model::Sample> data;
  for (const auto& t : tiles) {
    ChannelStack norm;
    for (int c = 0; c < markers; ++c) norm.push_back(imgproc::normalize_channel(t.mif[c], q[c]));
    data.push_back({t.tile_id, pl::rgb_to_tensor(t.he), pl::stack_to_tensor(norm)});
  }
  json mj = small_model();
  mj["image_size"] = sc.side;
  mj["markers"] = markers;
  model::Translator net(model::TranslatorConfig::from_json(mj), 3);
  model::TrainConfig tc;
  tc.lr = 2e-3;
  tc.warmup = 50;
  tc.batch = 8;
  tc.max_steps = 500;
  tc.augment.enabled = false;
  tc.seed = 9;
  std::vector<model::Tensor> scaled;
  for (const auto& s : data) {
    model::Tensor t = s.target;
    for (auto& v : t.data) v = model::scale_target(v);
    scaled.push_back(t);
  }
  model::LossConfig lc;
  lc.sigma = model::target_sigma(scaled);
  model::Trainer trainer(net, tc, lc, data);
  trainer.run();
  const auto r = model::evaluate_pearson(net, data);
  const double secs = seconds_since(t0);
  bool ok = secs < 600;
  std::string d;
  for (double v : r) {
    ok = ok && v > 0.95;
    d += fmt(v) + " ";
  }
  return {ok, "8 tiles, " + std::to_string(trainer.step()) + " steps, pearson " + d + "(" + fmt(secs) + " s)"};
}

Outcome synthetic_e2e() {
  const auto t0 = Clock::now();
  const fs::path dir = g_work / "e2e";
  fs::remove_all(dir);
  synth::SynthConfig sc;
  sc.tiles = 32;
  sc.seed = 1;
  synth::write_dataset(sc, dir / "data");
  json c{{"seed", 3},
         {"paths",
          {{"manifest", (dir / "data" / "manifest.jsonl").string()},
           {"panel", (dir / "data" / "panel.json").string()},
           {"output", (dir / "out").string()}}},
         {"model", small_model()},
         {"train", {{"lr", 2e-3}, {"warmup", 100}, {"batch", 4}, {"max_steps", 1500}}},
         {"evaluate", {{"labels", (dir / "data" / "planted_cells.csv").string()}, {"bootstrap_samples", 200}}}};
  pl::cmd_preprocess(pl::make_context(c, std::nullopt, std::nullopt));
  pl::cmd_train(pl::make_context(c, std::nullopt, std::nullopt));
  const auto r = pl::cmd_evaluate(pl::make_context(c, std::nullopt, std::nullopt));
  double upper = kNaN;
  for (const auto& b : r.baselines) {
    if (b.name == "upper_bound") upper = b.macro_auprc;
  }
  const double secs = seconds_since(t0);
  return {r.macro_auprc >= 0.95 && upper >= 0.99 && secs < 1800,
          "macro AUPRC " + fmt(r.macro_auprc) + ", upper bound " + fmt(upper) + ", macro pearson " +
              fmt(r.macro_pearson) + " (" + fmt(secs) + " s)"};
}

Outcome gmm_recovery() {
  double worst_mu = 0, worst_err = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed(seed, "acceptance_gmm"));
    std::vector<double> v(5000);
    std::vector<std::uint8_t> truth(5000);
    for (std::size_t i = 0; i < v.size(); ++i) {
      truth[i] = rng.uniform() < 0.2;
      v[i] = rng.normal(truth[i] ? 0.7 : 0.1, 0.05);
    }
    const auto f = gating::fit_gmm_1d(v);
    worst_mu = std::max({worst_mu, std::abs(f.means[0] - 0.1), std::abs(f.means[1] - 0.7)});
    double wrong = 0;
    for (std::size_t i = 0; i < v.size(); ++i) wrong += (gating::posterior_positive(f, v[i]) > 0.5) != truth[i];
    worst_err = std::max(worst_err, wrong / v.size());
  }
  return {worst_mu < 0.02 && worst_err < 0.02,
          "10 seeds, max |dmu| " + fmt(worst_mu) + ", max assignment error " + fmt(worst_err)};
}

Outcome metric_oracles() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(derive_seed(seed, "acceptance_metrics"));
    const std::size_t n = 2 + rng.below(15);
    std::vector<double> x(n), y(n), s(n);
    std::vector<std::uint8_t> lab(n), pr(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform(0, 255);
      y[i] = rng.uniform(0, 255);
      s[i] = static_cast<double>(rng.below(5));
      lab[i] = rng.bernoulli(0.5);
      pr[i] = rng.bernoulli(0.5);
    }
    lab[rng.below(n)] = 1;
    PearsonAccumulator acc;
    acc.add(x, y);
    worst = std::max({worst, std::abs(eval::auprc(s, lab) - oracle::auprc(s, lab)),
                      std::abs(eval::f1_binary(pr, lab) - oracle::f1(pr, lab)),
                      std::abs(acc.value() - oracle::pearson(x, y)),
                      std::abs(eval::psnr(x, y) - oracle::psnr(x, y, 255))});
  }
  double worst_ssim = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const int w = 16, h = 16;
    std::vector<double> a(w * h), b(w * h);
    for (int i = 0; i < w * h; ++i) {
      a[i] = rng.uniform(0, 255);
      b[i] = std::clamp(a[i] + rng.normal(0, 40), 0.0, 255.0);
    }
    worst_ssim = std::max(worst_ssim, std::abs(eval::ssim(a, b, w, h) - oracle::ssim(a, b, w, h, 255)));
  }
  return {worst < 1e-9 && worst_ssim < 1e-6,
          "100 instances max |diff| " + fmt(worst) + ", ssim max |diff| " + fmt(worst_ssim)};
}

Outcome af_and_normalize() {
  auto one = [](double c, double af, double l, double b) {
    return imgproc::af_subtract(ChannelImage(1, 1, 0.5, c), ChannelImage(1, 1, 0.5, af), {l, b}).pixels[0];
  };
  bool ok = one(100, 40, 0.5, 0) == 80 && one(10, 100, 1, 0) == 0 && one(10, 4, 1, 2.5) == 8.5;
  const double q = 731.5;
  ok = ok && imgproc::normalize_value(q, q) == 255 && imgproc::normalize_value(0, q) == 0;
  double worst = 0;
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.uniform(0, q);
    worst = std::max(worst, std::abs(imgproc::denormalize_value(imgproc::normalize_value(v, q), q) - v));
  }
  return {ok && worst < 1e-9, "hand values " + std::string(ok ? "ok" : "wrong") + ", round trip max err " + fmt(worst)};
}

Outcome bootstrap() {
  // 50 tiles of cells with noisy scores; AUPRC over the cells of sampled tiles.
  Rng rng(77);
  std::vector<std::vector<std::size_t>> by_tile(50);
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (auto& t : by_tile) {
    const int cells = 5 + static_cast<int>(rng.below(20));
    for (int k = 0; k < cells; ++k) {
      const bool pos = rng.bernoulli(0.3);
      t.push_back(scores.size());
      labels.push_back(pos);
      scores.push_back(rng.normal(pos ? 1.0 : 0.0, 0.8));
    }
  }
  auto metric = [&](const std::vector<std::size_t>& tiles) {
    const auto idx = eval::cells_of_tiles(by_tile, tiles);
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (auto i : idx) {
      s.push_back(scores[i]);
      y.push_back(labels[i]);
    }
    return eval::auprc(s, y);
  };
  eval::BootstrapConfig c;
  c.n_samples = 1000;
  c.seed = 2024;
  const auto a = eval::bootstrap_ci(metric, 50, c), b = eval::bootstrap_ci(metric, 50, c);
  const bool exact = std::memcmp(&a.low, &b.low, sizeof(double)) == 0 && std::memcmp(&a.high, &b.high, sizeof(double)) == 0;
  return {exact && a.low <= a.point && a.point <= a.high,
          "point " + fmt(a.point) + " CI [" + fmt(a.low) + ", " + fmt(a.high) + "], repeat " +
              (exact ? "bit-exact" : "DIFFERS")};
}

Outcome random_baseline() {
  double worst = 0;
  std::string d;
  for (double p : {0.05, 0.3, 0.7}) {
    const double f = eval::random_baseline_f1(p, 10000, 100, 5);
    worst = std::max(worst, std::abs(f - p));
    d += "p=" + fmt(p) + ": " + fmt(f) + " ";
  }
  return {worst < 0.02, d + "max |F1 - p| " + fmt(worst)};
}

Outcome hierarchy_fixpoint() {
  const std::vector<std::string> mk{"CD45", "CD3", "CD8", "CD4", "CD20", "PanCK"};
  const std::vector<gating::HierarchyRule> rules{{"CD8", "CD3"}, {"CD4", "CD3"}, {"CD3", "CD45"}, {"CD20", "CD45"}};
  const std::vector<std::pair<int, int>> idx{{2, 1}, {3, 1}, {1, 0}, {4, 0}};
  const auto h = gating::Hierarchy::build(rules, mk);
  int bad = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(derive_seed(seed, "acceptance_hierarchy"));
    const std::size_t rows = 1 + rng.below(20);
    std::vector<std::vector<std::uint8_t>> labels(rows, std::vector<std::uint8_t>(mk.size()));
    gating::CellTable t;
    t.markers = mk;
    for (std::size_t r = 0; r < rows; ++r) {
      for (auto& l : labels[r]) l = rng.bernoulli(0.5);
      gating::CellRecord rec;
      rec.tile_id = "t";
      rec.cell_id = static_cast<std::int64_t>(r) + 1;
      rec.mean_expr.assign(mk.size(), 0.0);
      rec.posterior.assign(mk.size(), 0.5);
      rec.label = labels[r];
      t.rows.push_back(rec);
    }
    h.apply(t);
    auto twice = t;
    h.apply(twice);
    oracle::hierarchy_fixpoint(labels, idx);
    for (std::size_t r = 0; r < rows; ++r) {
      if (t.rows[r].label != labels[r] || twice.rows[r].label != t.rows[r].label) {
        ++bad;
        break;
      }
    }
  }
  return {bad == 0, "1000 tables, " + std::to_string(bad) + " mismatches"};
}

Outcome determinism() {
  const fs::path dir = g_work / "determinism";
  fs::remove_all(dir);
  synth::SynthConfig sc;
  sc.tiles = 8;
  sc.seed = 6;
  synth::write_dataset(sc, dir / "data");
  auto run = [&] {
    fs::remove_all(dir / "out");
    json c{{"seed", 12},
           {"paths",
            {{"manifest", (dir / "data" / "manifest.jsonl").string()},
             {"panel", (dir / "data" / "panel.json").string()},
             {"output", (dir / "out").string()}}},
           {"model", small_model()},
           {"train", {{"lr", 1e-3}, {"warmup", 5}, {"batch", 2}, {"max_steps", 10}}}};
    pl::cmd_preprocess(pl::make_context(c, std::nullopt, std::nullopt));
    pl::cmd_train(pl::make_context(c, std::nullopt, std::nullopt));
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir / "out")) {
      if (e.is_regular_file()) files[fs::relative(e.path(), dir / "out").string()] = textio::read_file(e.path());
    }
    return files;
  };
  const auto a = run();
  const auto b = run();
  std::size_t differing = 0;
  for (const auto& [k, v] : a) differing += !b.count(k) || b.at(k) != v;
  return {a.size() == b.size() && differing == 0 && !a.empty(),
          std::to_string(a.size()) + " files compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  g_work = fs::temp_directory_path() / "stainforge_acceptance";
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--only") && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else if (!std::strcmp(argv[i], "--work") && i + 1 < argc) {
      g_work = argv[++i];
    }
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient check on toy translator", gradcheck},
      {"LoRA zero-init is identity", lora_identity},
      {"overfit 8 tiles", overfit},
      {"synthetic end-to-end AUPRC", synthetic_e2e},
      {"GMM parameter recovery", gmm_recovery},
      {"metric oracles", metric_oracles},
      {"AF subtraction and normalization", af_and_normalize},
      {"bootstrap reproducibility and coverage", bootstrap},
      {"random prevalence baseline", random_baseline},
      {"hierarchy fixpoint", hierarchy_fixpoint},
      {"preprocess and train determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << (failed ? "acceptance: " + std::to_string(failed) + " failed" : std::string("acceptance: all passed"))
            << std::endl;
  return failed;
}
