#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "oracles.hpp"
#include "stainforge/config.hpp"
#include "stainforge/io.hpp"
#include "stainforge/model/checkpoint.hpp"
#include "stainforge/pipeline.hpp"
#include "stainforge/synth.hpp"
#include "stainforge/textio.hpp"

using namespace stainforge;
namespace pl = stainforge::pipeline;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path& dataset() {
  static const fs::path dir = [] {
    auto d = oracle::temp_dir("pipeline_data");
    synth::SynthConfig c;
    c.tiles = 10;
    c.seed = 4;
    synth::write_dataset(c, d);
    return d;
  }();
  return dir;
}

json base_config(const fs::path& out) {
  json c = json::parse(R"({
    "seed": 7,
    "model": {"vit": {"patch_size": 8, "depth": 1, "width": 8, "heads": 2, "mlp_ratio": 2.0, "dropout": 0.0},
              "detail_channels": [4, 4, 4], "decoder_channels": [4, 4, 4, 4]},
    "train": {"lr": 1e-3, "warmup": 2, "batch": 2, "max_steps": 4},
    "evaluate": {"bootstrap_samples": 20}
  })");
  c["paths"] = {{"manifest", (dataset() / "manifest.jsonl").string()},
                {"panel", (dataset() / "panel.json").string()},
                {"output", out.string()}};
  return c;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = textio::read_file(e.path());
  }
  return out;
}

std::string run_cli(const std::string& args, int& code) {
  const std::string cmd = std::string(STAINFORGE_CLI) + " " + args + " 2>&1";
  std::string out;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[512];
  while (fgets(buf, sizeof buf, p)) out += buf;
  const int status = pclose(p);
  code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

}  // namespace

TEST_CASE("config loading") {
  const auto dir = oracle::temp_dir("config");
  {
    std::ofstream f(dir / "c.toml");
    f << "seed = 3\n[train]\nlr = 1e-3\nbatch = 4\n[paths]\nmanifest = \"data/m.jsonl\"\n";
  }
  const auto j = config::load(dir / "c.toml");
  CHECK(j["seed"] == 3);
  CHECK(j["train"]["lr"] == doctest::Approx(1e-3));
  CHECK(fs::path(j["paths"]["manifest"].get<std::string>()) == dir / "data/m.jsonl");

  json k = j;
  config::apply_env_overrides(k, {{"STAINFORGE_TRAIN__BATCH", "8"}, {"STAINFORGE_SEED", "11"},
                                  {"STAINFORGE_EVALUATE__PROTOCOL", "external"}, {"HOME", "/x"}});
  CHECK(k["train"]["batch"] == 8);
  CHECK(k["seed"] == 11);
  CHECK(k["evaluate"]["protocol"] == "external");
  CHECK(config::hash(j) != config::hash(k));
  CHECK(config::hash(j) == config::hash(config::load(dir / "c.toml")));

  {
    std::ofstream f(dir / "c.json");
    f << R"({"seed": 3, "train": {"lr": 0.001, "batch": 4}})";
  }
  CHECK(config::load(dir / "c.json")["train"]["batch"] == 4);
  {
    std::ofstream f(dir / "bad.toml");
    f << "seed = = 3\n";
  }
  CHECK_THROWS_AS(config::load(dir / "bad.toml"), UserError);
  CHECK_THROWS_WITH_AS(config::load(dir / "missing.toml"), doctest::Contains("missing.toml"), UserError);
}

TEST_CASE("context overrides and hash ignore jobs") {
  json c{{"seed", 1}, {"jobs", 1}};
  const auto a = pl::make_context(c, 9, 4);
  CHECK(a.seed == 9);
  CHECK(a.jobs == 4);
  const auto b = pl::make_context(c, 9, 1);
  CHECK(a.config_hash == b.config_hash);
  CHECK(pl::make_context(c, 10, 1).config_hash != a.config_hash);
}

TEST_CASE("parallel_for propagates the first failure") {
  std::vector<int> out(20, 0);
  pl::parallel_for(20, 3, [&](std::size_t i) { out[i] = static_cast<int>(i) * 2; });
  CHECK(out[19] == 38);
  CHECK_THROWS_WITH(pl::parallel_for(10, 3,
                                     [](std::size_t i) {
                                       if (i == 4 || i == 7) throw UserError("bad " + std::to_string(i));
                                     }),
                    "bad 4");
}

TEST_CASE("cell_means orders rows by instance id") {
  model::Tensor maps({1, 2, 2});
  maps.data = {1, 2, 3, 4};
  InstanceMask m(2, 2);
  m.labels = {5, 5, 2, 0};
  const auto rows = pl::cell_means(maps, m);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0][0] == 3.0);
  CHECK(rows[1][0] == 1.5);
}

TEST_CASE("preprocess is deterministic and complete") {
  const auto o1 = oracle::temp_dir("pre1");
  const auto r1 = pl::cmd_preprocess(pl::make_context(base_config(o1), std::nullopt, 1));
  const auto first = tree_bytes(o1 / "preprocess");
  fs::remove_all(o1 / "preprocess");
  const auto r2 = pl::cmd_preprocess(pl::make_context(base_config(o1), std::nullopt, 2));
  CHECK(r1.kept + r1.dropped == 10);
  CHECK(r1.kept >= 6);
  CHECK(r1.cells > 0);
  CHECK(r1.cells == r2.cells);
  CHECK(tree_bytes(o1 / "preprocess") == first);
  for (const char* f : {"cells.csv", "cells.jsonl", "manifest.processed.jsonl", "panel.resolved.json", "qc.json",
                        "gmm.json", "summary.json"}) {
    CHECK_MESSAGE(fs::exists(o1 / "preprocess" / f), f);
  }
  const auto panel = io::load_panel(o1 / "preprocess" / "panel.resolved.json");
  for (const auto& m : panel.markers()) CHECK(panel.q999.at(m) > 0);
}

TEST_CASE("train: determinism, epochs=0, resume") {
  const auto o1 = oracle::temp_dir("tr1"), o2 = oracle::temp_dir("tr2");
  pl::cmd_preprocess(pl::make_context(base_config(o1), std::nullopt, 1));
  fs::copy(o1 / "preprocess", o2 / "preprocess", fs::copy_options::recursive);

  const auto a = pl::cmd_train(pl::make_context(base_config(o1), std::nullopt, 1));
  CHECK(a.steps == 4);
  const auto first = tree_bytes(o1 / "train");
  pl::cmd_train(pl::make_context(base_config(o1), std::nullopt, 1));
  CHECK(tree_bytes(o1 / "train") == first);

  SUBCASE("resume equals an uninterrupted run") {
    auto c = base_config(o2);
    c["train"]["stop_after"] = 2;
    const auto part = pl::cmd_train(pl::make_context(c, std::nullopt, 1));
    CHECK(part.stopped_early);
    c["train"].erase("stop_after");
    c["train"]["resume"] = true;
    const auto rest = pl::cmd_train(pl::make_context(c, std::nullopt, 1));
    CHECK(rest.steps == 4);
    CHECK(textio::read_file(o2 / "train" / "final.sft") == first.at("final.sft"));
    CHECK(textio::read_file(o2 / "train" / "loss_curve.csv") == first.at("loss_curve.csv"));
  }
  SUBCASE("zero epochs writes the initialization") {
    auto c = base_config(o2);
    c["train"]["max_steps"] = 0;
    c["train"]["epochs"] = 0;
    const auto ctx = pl::make_context(c, std::nullopt, 1);
    pl::cmd_train(ctx);
    auto loaded = model::load_checkpoint(o2 / "train" / "final.sft");
    model::Translator init(loaded.model->config(), derive_seed(ctx.seed, "init"));
    const auto x = model::snapshot(*loaded.model), y = model::snapshot(init);
    REQUIRE(x.size() == y.size());
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t k = 0; k < x[i].data.size(); ++k) worst = std::max(worst, std::abs(x[i].data[k] - y[i].data[k]));
    }
    CHECK(worst < 1e-6);  // float32 storage
  }
}

TEST_CASE("evaluate with targets as predictions") {
  const auto o = oracle::temp_dir("selfeval");
  auto c = base_config(o);
  c["evaluate"]["prediction_source"] = "targets";
  c["evaluate"]["labels"] = (dataset() / "planted_cells.csv").string();
  pl::cmd_preprocess(pl::make_context(c, std::nullopt, 1));
  const auto r = pl::cmd_evaluate(pl::make_context(c, std::nullopt, 1));
  for (const auto& m : r.markers) {
    CHECK_MESSAGE(m.pearson == doctest::Approx(1.0), m.marker);
    CHECK(std::isinf(m.psnr));
    CHECK(m.ssim == doctest::Approx(1.0));
  }
  CHECK(r.label_source == "planted");
  for (const char* f : {"report.json", "report.csv", "auprc.svg", "f1.svg"}) CHECK(fs::exists(o / "evaluate" / f));
  const auto j = json::parse(textio::read_file(o / "evaluate" / "report.json"));
  CHECK(j["prediction_source"] == "targets");
  CHECK(j["bootstrap"]["samples"] == 20);
}

TEST_CASE("CLI exit codes") {
  int code = 0;
  auto out = run_cli("preprocess --config /nonexistent/cfg.toml", code);
  CHECK(code == 2);
  CHECK(out.find("/nonexistent/cfg.toml") != std::string::npos);
  run_cli("bogus", code);
  CHECK(code == 2);
  run_cli("--help", code);
  CHECK(code == 0);

  const auto dir = oracle::temp_dir("cli");
  {
    std::ofstream f(dir / "c.json");
    f << json{{"paths", {{"manifest", (dir / "nope.jsonl").string()}, {"panel", (dir / "panel.json").string()},
                         {"output", (dir / "out").string()}}}};
  }
  out = run_cli("preprocess -q --config " + (dir / "c.json").string(), code);
  CHECK(code == 2);
  CHECK(out.find("nope.jsonl") != std::string::npos);

  out = run_cli("synth -q --tiles 3 --out " + (dir / "syn").string(), code);
  CHECK(code == 0);
  CHECK(fs::exists(dir / "syn" / "manifest.jsonl"));
}
