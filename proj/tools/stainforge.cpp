// stainforge command line: preprocess | train | evaluate | serve | synth

#include <csignal>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "stainforge/afserve.hpp"
#include "stainforge/config.hpp"
#include "stainforge/pipeline.hpp"

namespace sf = stainforge;
namespace pl = stainforge::pipeline;

namespace {

sf::afserve::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("--config", c.config, "TOML or JSON config file");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "root seed (overrides the config)");
  cmd->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("-q,--quiet", c.quiet, "no progress lines on stderr");
}

pl::RunContext context(const Common& c) {
  nlohmann::json cfg = c.config.empty() ? nlohmann::json::object() : sf::config::load(c.config);
  auto ctx = pl::make_context(std::move(cfg), c.seed, c.jobs);
  if (!c.quiet) ctx.log = [](const std::string& s) { std::cerr << s << "\n"; };
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"H&E to multiplex immunofluorescence translation pipeline"};
  app.require_subcommand(1);

  Common pre, trn, evl, srv, syn;
  auto* c_pre = app.add_subcommand("preprocess", "QC, AF subtraction, normalization, cell extraction, gating");
  add_common(c_pre, pre);
  auto* c_trn = app.add_subcommand("train", "train the translator on preprocessed tiles");
  add_common(c_trn, trn);
  auto* c_evl = app.add_subcommand("evaluate", "pixel and cell-level evaluation with baselines");
  add_common(c_evl, evl);

  auto* c_srv = app.add_subcommand("serve", "local AF tuning service");
  add_common(c_srv, srv);
  int port = 8765;
  std::string static_dir;
  c_srv->add_option("--port", port, "TCP port on 127.0.0.1")->check(CLI::Range(0, 65535));
  c_srv->add_option("--static", static_dir, "UI bundle served at /");

  auto* c_syn = app.add_subcommand("synth", "write a synthetic paired dataset with planted labels");
  add_common(c_syn, syn, false);
  std::string synth_out;
  int synth_tiles = 0;
  c_syn->add_option("--out", synth_out, "output directory");
  c_syn->add_option("--tiles", synth_tiles, "number of tiles")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*c_pre) {
      const auto r = pl::cmd_preprocess(context(pre));
      std::cout << nlohmann::json{{"kept", r.kept}, {"dropped", r.dropped}, {"cells", r.cells}, {"dir", r.dir.string()}}
                << "\n";
    } else if (*c_trn) {
      const auto r = pl::cmd_train(context(trn));
      std::cout << nlohmann::json{{"steps", r.steps},
                                  {"stopped_early", r.stopped_early},
                                  {"final_checkpoint", r.final_checkpoint.string()},
                                  {"best_checkpoint", r.best_checkpoint.string()}}
                << "\n";
    } else if (*c_evl) {
      const auto r = pl::cmd_evaluate(context(evl));
      std::cout << nlohmann::json{{"macro_auprc", sf::eval::metric_json(r.macro_auprc)},
                                  {"macro_f1", sf::eval::metric_json(r.macro_f1)},
                                  {"macro_pearson", sf::eval::metric_json(r.macro_pearson)}}
                << "\n";
    } else if (*c_srv) {
      const auto ctx = context(srv);
      const auto paths = ctx.config.value("paths", nlohmann::json::object());
      sf::afserve::ServeOptions opt;
      opt.manifest = paths.value("manifest", std::string());
      opt.panel = paths.value("panel", std::string());
      opt.static_dir = static_dir.empty() ? paths.value("static", std::string()) : static_dir;
      opt.port = port;
      sf::afserve::Service service(opt);
      if (const auto err = service.load(); !err.empty()) std::cerr << "serve: store not loaded: " << err << "\n";
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread announce([&] {
        if (service.wait_until_listening(5000)) {
          std::cerr << "serving on http://127.0.0.1:" << service.bound_port() << "\n";
        }
      });
      service.listen();
      announce.join();
      g_service = nullptr;
    } else if (*c_syn) {
      auto ctx = context(syn);
      if (!synth_out.empty()) ctx.config["synth"]["output"] = synth_out;
      if (synth_tiles > 0) ctx.config["synth"]["tiles"] = synth_tiles;
      std::cout << pl::cmd_synth(ctx) << "\n";
    }
  } catch (const sf::UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
