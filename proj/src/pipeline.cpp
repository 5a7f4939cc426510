#include "stainforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "stainforge/eval/baselines.hpp"
#include "stainforge/eval/metrics.hpp"
#include "stainforge/eval/probe.hpp"
#include "stainforge/gating.hpp"
#include "stainforge/imgproc.hpp"
#include "stainforge/io.hpp"
#include "stainforge/model/checkpoint.hpp"
#include "stainforge/model/train.hpp"
#include "stainforge/stats.hpp"
#include "stainforge/synth.hpp"
#include "stainforge/textio.hpp"

namespace stainforge::pipeline {

using model::Tensor;

namespace {

json section(const json& cfg, const char* name) {
  if (cfg.contains(name) && cfg[name].is_object()) return cfg[name];
  return json::object();
}

fs::path required_path(const RunContext& ctx, const char* key) {
  const json paths = section(ctx.config, "paths");
  if (!paths.contains(key) || !paths[key].is_string() || paths[key].get<std::string>().empty()) {
    throw UserError(std::string("config is missing paths.") + key);
  }
  return paths[key].get<std::string>();
}

void say(const RunContext& ctx, const std::string& line) {
  if (ctx.log) ctx.log(line);
}

nlohmann::ordered_json stamp(const RunContext& ctx) {
  return {{"config_hash", ctx.config_hash}, {"seed", ctx.seed}};
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  textio::write_file_atomic(path, j.dump(2) + "\n");
}

std::string file_digest(const fs::path& p) { return textio::hash_hex(textio::read_file(p)); }

// Tissue in fluorescence is bright: Otsu on the channel rescaled to 8 bits.
BinaryMask fluorescence_tissue(const ChannelImage& ch) {
  const double hi = *std::max_element(ch.pixels.begin(), ch.pixels.end());
  std::vector<std::uint8_t> g(ch.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = hi > 0 ? static_cast<std::uint8_t>(std::lround(std::clamp(ch.pixels[i] / hi, 0.0, 1.0) * 255.0)) : 0;
  }
  const int t = imgproc::otsu_threshold(imgproc::histogram(g));
  BinaryMask m(ch.width, ch.height);
  for (std::size_t i = 0; i < g.size(); ++i) m.values[i] = g[i] >= t && hi > 0;
  return m;
}

struct ProcessedTile {
  io::TileRecord rec;
  fs::path normalized_path;
  fs::path cells_path;
};

std::vector<ProcessedTile> load_processed(const fs::path& dir) {
  const auto records = io::load_manifest(dir / "manifest.processed.jsonl");
  std::vector<ProcessedTile> out;
  for (const auto& r : records) {
    ProcessedTile t;
    t.rec = r;
    const fs::path base = dir;
    auto resolve = [&](const char* key) {
      if (!r.extra.contains(key)) throw UserError("processed manifest lacks " + std::string(key) + " for " + r.tile_id);
      fs::path p = r.extra[key].get<std::string>();
      return p.is_relative() ? base / p : p;
    };
    t.normalized_path = resolve("normalized_path");
    t.cells_path = resolve("cells_path");
    out.push_back(std::move(t));
  }
  return out;
}

model::Sample load_sample(const ProcessedTile& t) {
  model::Sample s;
  s.tile_id = t.rec.tile_id;
  s.he = rgb_to_tensor(io::read_rgb(t.rec.he_path, t.rec.mpp));
  s.target = stack_to_tensor(io::read_channels(t.normalized_path, t.rec.mpp));
  return s;
}

model::TranslatorConfig translator_config(const RunContext& ctx, int image_size, int markers) {
  json m = section(ctx.config, "model");
  m.erase("lora");
  if (!m.contains("image_size")) m["image_size"] = image_size;
  m["markers"] = markers;
  auto c = model::TranslatorConfig::from_json(m);
  if (c.image_size != image_size) {
    throw UserError("model.image_size " + std::to_string(c.image_size) + " does not match tile size " +
                    std::to_string(image_size));
  }
  return c;
}

}  // namespace

// ---------------------------------------------------------------- helpers

Tensor rgb_to_tensor(const RgbImage& rgb) {
  Tensor t({3, rgb.height, rgb.width});
  const std::size_t plane = rgb.pixel_count();
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) t[c * plane + i] = rgb.data[i * 3 + c];
  }
  return t;
}

Tensor stack_to_tensor(const ChannelStack& stack) {
  if (stack.empty()) throw UserError("empty channel stack");
  const int h = stack.front().height, w = stack.front().width;
  Tensor t({static_cast<int>(stack.size()), h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t c = 0; c < stack.size(); ++c) {
    if (stack[c].width != w || stack[c].height != h) throw UserError("channel sizes differ within a stack");
    std::copy(stack[c].pixels.begin(), stack[c].pixels.end(), t.data.begin() + static_cast<std::ptrdiff_t>(c * plane));
  }
  return t;
}

std::vector<std::vector<double>> cell_means(const Tensor& maps, const InstanceMask& cells) {
  const int c = maps.dim(0);
  if (maps.dim(1) != cells.height || maps.dim(2) != cells.width) throw UserError("cell mask and maps differ in size");
  const auto ids = cells.instance_ids();
  std::vector<int> row_of(static_cast<std::size_t>(cells.max_label()) + 1, -1);
  for (std::size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = static_cast<int>(i);
  std::vector<std::vector<double>> sums(ids.size(), std::vector<double>(c, 0.0));
  std::vector<double> counts(ids.size(), 0.0);
  const std::size_t plane = cells.labels.size();
  for (std::size_t p = 0; p < plane; ++p) {
    const int l = cells.labels[p];
    if (l <= 0) continue;
    const int r = row_of[l];
    counts[r] += 1;
    for (int k = 0; k < c; ++k) sums[r][k] += maps[k * plane + p];
  }
  for (std::size_t r = 0; r < ids.size(); ++r) {
    for (auto& v : sums[r]) v /= counts[r];
  }
  return sums;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::mutex mu;
  std::size_t next = 0;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= n) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

RunContext make_context(json config, std::optional<std::uint64_t> seed, std::optional<int> jobs) {
  if (seed) config["seed"] = *seed;
  if (jobs) config["jobs"] = *jobs;
  RunContext ctx;
  ctx.seed = config.value("seed", std::uint64_t{0});
  ctx.jobs = config.value("jobs", 1);
  if (ctx.jobs < 1) throw UserError("jobs must be >= 1");
  // Thread count never changes results, so it stays out of the hash.
  json hashed = config;
  hashed.erase("jobs");
  ctx.config_hash = textio::hash_hex(hashed.dump());
  ctx.output = section(config, "paths").value("output", std::string("stainforge_out"));
  ctx.config = std::move(config);
  return ctx;
}

// ---------------------------------------------------------------- preprocess

PreprocessResult cmd_preprocess(const RunContext& ctx) {
  const json pc = section(ctx.config, "preprocess");
  const json qcc = section(pc, "qc");
  const auto manifest = io::load_manifest(required_path(ctx, "manifest"));
  io::PanelConfig panel = io::load_panel(required_path(ctx, "panel"));
  const auto markers = panel.markers();
  if (markers.empty()) throw UserError("panel has no marker channels");

  imgproc::QCThresholds thr;
  thr.min_density_pearson = qcc.value("min_density_pearson", thr.min_density_pearson);
  thr.min_tissue_iou = qcc.value("min_tissue_iou", thr.min_tissue_iou);
  thr.min_tissue_fraction = qcc.value("min_tissue_fraction", thr.min_tissue_fraction);
  thr.check_density = qcc.value("check_density", thr.check_density);
  thr.check_iou = qcc.value("check_iou", thr.check_iou);
  thr.check_tissue_fraction = qcc.value("check_tissue_fraction", thr.check_tissue_fraction);
  const bool check_empty = qcc.value("check_empty_channel", true);
  const double empty_intensity = qcc.value("empty_intensity", 1000.0);
  const double empty_fraction = qcc.value("empty_fraction", 0.01);
  const double dilation_um = pc.value("dilation_um", 2.0);
  const std::string gating_source = pc.value("gating_source", std::string("corrected"));
  if (gating_source != "corrected" && gating_source != "raw" && gating_source != "normalized") {
    throw UserError("preprocess.gating_source must be corrected, raw or normalized");
  }
  const double cutoff = pc.value("posterior_cutoff", 0.5);
  if (!(cutoff > 0 && cutoff < 1)) throw UserError("preprocess.posterior_cutoff must be in (0, 1)");
  const auto gating_splits = pc.value("gating_splits", std::vector<std::string>{"train", "val"});
  const bool fit_q999 = pc.value("fit_q999", true);

  const fs::path dir = ctx.output / "preprocess";
  fs::create_directories(dir / "normalized");
  fs::create_directories(dir / "cells");

  for (const auto& r : manifest) {
    io::require_file(r.he_path);
    io::require_file(r.mif_path);
    if (r.nuclei_path.empty()) throw UserError("manifest record " + r.tile_id + " has no nuclei_path");
    io::require_file(r.nuclei_path);
    if (!r.he_nuclei_path.empty()) io::require_file(r.he_nuclei_path);
  }
  {
    std::set<std::string> ids;
    for (const auto& r : manifest) {
      if (!ids.insert(r.tile_id).second) throw UserError("duplicate tile_id in manifest: " + r.tile_id);
    }
  }

  struct Work {
    bool kept = false;
    nlohmann::ordered_json qc;
    ChannelStack raw, corrected;  // marker channels only
    InstanceMask cells;
  };
  std::vector<Work> work(manifest.size());
  std::vector<std::size_t> marker_idx;
  for (const auto& m : markers) marker_idx.push_back(panel.channel_index(m));

  say(ctx, "preprocess: QC and AF subtraction on " + std::to_string(manifest.size()) + " tiles");
  parallel_for(manifest.size(), ctx.jobs, [&](std::size_t i) {
    const auto& r = manifest[i];
    Work& w = work[i];
    const RgbImage he = io::read_rgb(r.he_path, r.mpp);
    const ChannelStack mif = io::read_channels(r.mif_path, r.mpp);
    if (mif.size() != panel.channels.size()) {
      throw UserError("tile " + r.tile_id + ": " + std::to_string(mif.size()) + " mIF channels, panel lists " +
                      std::to_string(panel.channels.size()));
    }
    const InstanceMask nuclei = io::read_mask(r.nuclei_path, r.mpp);
    if (he.width != mif[0].width || he.height != mif[0].height || nuclei.width != he.width ||
        nuclei.height != he.height) {
      throw UserError("tile " + r.tile_id + ": H&E, mIF and nuclei sizes differ");
    }
    const auto tissue = imgproc::tissue_mask(he);
    const std::size_t tissue_src = panel.af_channel.empty() ? panel.channel_index(panel.nuclear_channel)
                                                            : panel.channel_index(panel.af_channel);
    const BinaryMask tissue_mif = fluorescence_tissue(mif[tissue_src]);
    auto local = thr;
    InstanceMask he_nuclei = nuclei;
    if (r.he_nuclei_path.empty()) {
      local.check_density = false;
    } else {
      he_nuclei = io::read_mask(r.he_nuclei_path, r.mpp);
    }
    auto report = imgproc::consecutive_alignment_qc(imgproc::nuclei_density_map(he_nuclei),
                                                     imgproc::nuclei_density_map(nuclei), tissue.mask, tissue_mif,
                                                     local);
    double hot = 0;
    if (check_empty && !panel.empty_channel.empty()) {
      const auto e = imgproc::empty_channel_qc(mif[panel.channel_index(panel.empty_channel)], empty_intensity,
                                               empty_fraction);
      hot = e.hot_fraction;
      report.empty_channel_pass = e.pass;
      if (!e.pass) {
        report.accepted = false;
        report.reasons.push_back("empty_channel");
      }
    }
    w.kept = report.accepted;
    w.qc = {{"tile_id", r.tile_id},
            {"split", r.split},
            {"accepted", report.accepted},
            {"reasons", report.reasons},
            {"tissue_fraction", report.tissue_fraction},
            {"tissue_threshold", tissue.threshold},
            {"density_pearson", eval::metric_json(report.density_pearson)},
            {"density_checked", local.check_density},
            {"tissue_iou", report.tissue_iou},
            {"empty_channel_pass", report.empty_channel_pass},
            {"empty_hot_fraction", hot}};
    if (!w.kept) return;
    for (std::size_t k = 0; k < markers.size(); ++k) {
      const auto& ch = mif[marker_idx[k]];
      w.raw.push_back(ch);
      if (panel.af_channel.empty()) {
        w.corrected.push_back(ch);
      } else {
        w.corrected.push_back(imgproc::af_subtract(ch, mif[panel.channel_index(panel.af_channel)],
                                                   panel.af_params(markers[k])));
      }
    }
    w.cells = imgproc::dilate_nuclei(nuclei, dilation_um);
  });

  // Normalization statistics from kept training tiles only.
  if (fit_q999) {
    imgproc::ChannelStatsAccumulator acc(markers);
    bool any = false;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      if (!work[i].kept || manifest[i].split != "train") continue;
      any = true;
      for (std::size_t k = 0; k < markers.size(); ++k) acc.add(k, work[i].corrected[k]);
    }
    if (!any) throw UserError("no training tiles survived QC; cannot fit normalization statistics");
    const auto stats = acc.finalize(0.999);
    for (std::size_t k = 0; k < markers.size(); ++k) panel.q999[markers[k]] = stats.q999[k];
  } else {
    for (const auto& m : markers) {
      if (!panel.q999.count(m) || !(panel.q999.at(m) > 0)) throw UserError("panel lacks a positive q999 for " + m);
    }
  }

  say(ctx, "preprocess: normalization, dilation and expression extraction");
  std::vector<gating::CellTable> tables(manifest.size());
  std::vector<io::TileRecord> processed;
  parallel_for(manifest.size(), ctx.jobs, [&](std::size_t i) {
    if (!work[i].kept) return;
    const auto& r = manifest[i];
    Work& w = work[i];
    ChannelStack normalized;
    for (std::size_t k = 0; k < markers.size(); ++k) {
      normalized.push_back(imgproc::normalize_channel(w.corrected[k], panel.q999.at(markers[k]), false, panel.log_base));
    }
    io::write_channels_f32(dir / "normalized" / (r.tile_id + ".tif"), normalized);
    io::write_mask(dir / "cells" / (r.tile_id + ".png"), w.cells);
    const ChannelStack& src = gating_source == "raw" ? w.raw : (gating_source == "normalized" ? normalized : w.corrected);
    tables[i] = gating::extract_cell_expression(src, w.cells, markers, r.tile_id);
  });

  gating::CellTable cells;
  cells.markers = markers;
  int kept = 0, dropped = 0;
  nlohmann::ordered_json qc_tiles = nlohmann::ordered_json::array();
  std::map<std::string, int> drop_reasons;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    qc_tiles.push_back(work[i].qc);
    if (!work[i].kept) {
      ++dropped;
      for (const auto& reason : work[i].qc["reasons"]) ++drop_reasons[reason.get<std::string>()];
      continue;
    }
    ++kept;
    cells.append(tables[i]);
    io::TileRecord r = manifest[i];
    r.extra["normalized_path"] = "normalized/" + r.tile_id + ".tif";
    r.extra["cells_path"] = "cells/" + r.tile_id + ".png";
    processed.push_back(r);
  }
  if (cells.rows.empty()) throw UserError("no cells in kept tiles");

  // Gating: one GMM per marker over cells of the fit splits.
  say(ctx, "preprocess: GMM gating on " + std::to_string(cells.rows.size()) + " cells");
  std::set<std::string> fit_tiles;
  for (const auto& r : processed) {
    if (std::find(gating_splits.begin(), gating_splits.end(), r.split) != gating_splits.end()) fit_tiles.insert(r.tile_id);
  }
  nlohmann::ordered_json gmm_json = nlohmann::ordered_json::array();
  std::vector<gating::GmmFit> fits(markers.size());
  parallel_for(markers.size(), ctx.jobs, [&](std::size_t k) {
    std::vector<double> values;
    for (const auto& row : cells.rows) {
      if (fit_tiles.count(row.tile_id)) values.push_back(row.mean_expr[k]);
    }
    gating::GmmOptions opt;
    opt.max_samples = pc.value("gmm_max_samples", std::size_t{0});
    opt.seed = derive_seed(ctx.seed, "gating", k);
    try {
      fits[k] = gating::fit_gmm_1d(values, opt);
    } catch (const UserError& e) {
      throw UserError("gating " + markers[k] + ": " + e.what());
    }
  });
  for (std::size_t k = 0; k < markers.size(); ++k) {
    gating::gate_marker(cells, k, fits[k], cutoff);
    const auto& f = fits[k];
    gmm_json.push_back({{"marker", markers[k]},
                        {"means", f.means},
                        {"variances", f.variances},
                        {"weights", f.weights},
                        {"positive_component", f.positive_component},
                        {"loglik", f.loglik},
                        {"iterations", f.iterations},
                        {"converged", f.converged}});
  }
  gating::Hierarchy::build(panel.hierarchy, markers).apply(cells);

  {
    std::ostringstream csv, jsonl;
    gating::write_csv(cells, csv);
    gating::write_jsonl(cells, jsonl);
    textio::write_file_atomic(dir / "cells.csv", csv.str());
    textio::write_file_atomic(dir / "cells.jsonl", jsonl.str());
  }
  io::write_manifest(dir / "manifest.processed.jsonl", processed);
  io::save_panel(dir / "panel.resolved.json", panel);

  auto qc = stamp(ctx);
  qc["thresholds"] = {{"min_density_pearson", thr.min_density_pearson},
                      {"min_tissue_iou", thr.min_tissue_iou},
                      {"min_tissue_fraction", thr.min_tissue_fraction},
                      {"empty_intensity", empty_intensity},
                      {"empty_fraction", empty_fraction}};
  qc["tiles"] = qc_tiles;
  write_json(dir / "qc.json", qc);
  auto gm = stamp(ctx);
  gm["gating_source"] = gating_source;
  gm["posterior_cutoff"] = cutoff;
  gm["fit_splits"] = gating_splits;
  gm["markers"] = gmm_json;
  write_json(dir / "gmm.json", gm);

  std::vector<std::size_t> positives(markers.size(), 0);
  for (const auto& row : cells.rows) {
    for (std::size_t k = 0; k < markers.size(); ++k) positives[k] += row.label[k];
  }
  auto summary = stamp(ctx);
  summary["stage"] = "preprocess";
  summary["tiles_kept"] = kept;
  summary["tiles_dropped"] = dropped;
  summary["drop_reasons"] = drop_reasons;
  summary["cells"] = cells.rows.size();
  summary["panel_hash"] = panel.hash();
  summary["dilation_um"] = dilation_um;
  nlohmann::ordered_json pos = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < markers.size(); ++k) pos[markers[k]] = positives[k];
  summary["positive_cells"] = pos;
  nlohmann::ordered_json digests = nlohmann::ordered_json::object();
  for (const char* f : {"cells.csv", "cells.jsonl", "manifest.processed.jsonl", "panel.resolved.json", "qc.json",
                        "gmm.json"}) {
    digests[f] = file_digest(dir / f);
  }
  summary["artifacts"] = digests;
  write_json(dir / "summary.json", summary);

  PreprocessResult res;
  res.kept = kept;
  res.dropped = dropped;
  res.cells = cells.rows.size();
  res.dir = dir;
  return res;
}

// ---------------------------------------------------------------- train

TrainResult cmd_train(const RunContext& ctx) {
  const fs::path pre = ctx.output / "preprocess";
  if (!fs::exists(pre / "manifest.processed.jsonl")) {
    throw UserError("preprocessed dataset not found under " + pre.string() + "; run preprocess first");
  }
  const auto tiles = load_processed(pre);
  const auto panel = io::load_panel(pre / "panel.resolved.json");
  const auto markers = panel.markers();
  const json tc = section(ctx.config, "train");

  std::vector<model::Sample> train, val;
  for (const auto& t : tiles) {
    if (t.rec.split == "train") train.push_back(load_sample(t));
    if (t.rec.split == "val") val.push_back(load_sample(t));
  }
  if (train.empty()) throw UserError("training split is empty");
  const int side = train.front().he.dim(1);

  model::TrainConfig cfg = model::TrainConfig::from_json(tc);
  cfg.seed = derive_seed(ctx.seed, "train");
  auto mcfg = translator_config(ctx, side, static_cast<int>(markers.size()));

  std::vector<Tensor> scaled;
  for (const auto& s : train) {
    Tensor t = s.target;
    for (auto& v : t.data) v = model::scale_target(v);
    scaled.push_back(std::move(t));
  }
  model::LossConfig loss;
  loss.sigma = model::target_sigma(scaled);
  loss.lambda = tc.value("lambda", 1.0);

  std::unique_ptr<model::Translator> net;
  const json paths = section(ctx.config, "paths");
  if (paths.contains("init_checkpoint") && !paths["init_checkpoint"].get<std::string>().empty()) {
    net = model::load_checkpoint(paths["init_checkpoint"].get<std::string>()).model;
    if (net->config().markers != mcfg.markers || net->config().image_size != mcfg.image_size) {
      throw UserError("init checkpoint does not match the dataset (markers or tile size)");
    }
  } else {
    net = std::make_unique<model::Translator>(mcfg, derive_seed(ctx.seed, "init"));
  }
  const json lc = section(section(ctx.config, "model"), "lora");
  if (lc.value("enabled", false) && !net->has_lora()) net->apply_lora(model::lora_from_json(lc), derive_seed(ctx.seed, "lora"));

  const fs::path dir = ctx.output / "train";
  fs::create_directories(dir);
  const fs::path state = dir / "state.bin";
  model::Trainer trainer(*net, cfg, loss, train);
  if (tc.value("resume", false) && fs::exists(state)) {
    trainer.load_state(state);
    say(ctx, "train: resumed at step " + std::to_string(trainer.step()));
  }

  auto meta = [&](const std::string& kind) {
    auto m = stamp(ctx);
    m["kind"] = kind;
    m["step"] = trainer.step();
    m["train"] = cfg.to_json();
    m["loss"] = loss.to_json();
    m["panel_hash"] = panel.hash();
    m["markers"] = markers;
    return m;
  };

  const int stop_after = tc.value("stop_after", 0);
  double best_score = -kInf;
  nlohmann::ordered_json best_meta;
  std::string val_csv = "step,mean_pearson";
  for (const auto& m : markers) val_csv += ",pearson_" + m;
  val_csv += "\n";
  // On resume, keep the validation log so far.
  if (trainer.step() > 0 && fs::exists(dir / "val_log.csv")) {
    std::istringstream in(textio::read_file(dir / "val_log.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto f = textio::split(line, ',');
      if (f.size() < 2 || std::stoi(f[0]) > trainer.step()) continue;
      val_csv += line + "\n";
      const double s = textio::parse_double(f[1]);
      if (std::isfinite(s) && s > best_score) best_score = s;
    }
  }
  auto validate = [&] {
    if (val.empty()) return;
    const auto r = model::evaluate_pearson(*net, val);
    double s = 0;
    int n = 0;
    for (double v : r) {
      if (std::isfinite(v)) {
        s += v;
        ++n;
      }
    }
    const double mean = n ? s / n : kNaN;
    val_csv += std::to_string(trainer.step()) + "," + textio::fmt(mean);
    for (double v : r) val_csv += "," + textio::fmt(v);
    val_csv += "\n";
    if (std::isfinite(mean) && mean > best_score) {
      best_score = mean;
      auto m = meta("best");
      m["val_mean_pearson"] = mean;
      model::save_checkpoint(dir / "best.sft", *net, m);
      best_meta = m;
    }
  };

  TrainResult res;
  say(ctx, "train: " + std::to_string(trainer.total_steps()) + " steps on " + std::to_string(train.size()) + " tiles");
  while (!trainer.done()) {
    const auto log = trainer.train_step();
    if (log.step % 50 == 0 || log.step == trainer.total_steps()) {
      say(ctx, "train: step " + std::to_string(log.step) + " loss " + textio::fmt(log.loss));
    }
    if (cfg.val_every > 0 && log.step % cfg.val_every == 0) validate();
    if (stop_after > 0 && log.step >= stop_after && !trainer.done()) {
      res.stopped_early = true;
      break;
    }
  }
  if (!res.stopped_early && (cfg.val_every <= 0 || trainer.step() % cfg.val_every != 0 || trainer.step() == 0)) validate();

  trainer.save_state(state);
  textio::write_file_atomic(dir / "loss_curve.csv", model::loss_curve_csv(trainer.log(), markers));
  textio::write_file_atomic(dir / "val_log.csv", val_csv);
  if (res.stopped_early) {
    res.steps = trainer.step();
    return res;
  }
  model::save_checkpoint(dir / "final.sft", *net, meta("final"));
  if (val.empty() || !fs::exists(dir / "best.sft")) {
    fs::copy_file(dir / "final.sft", dir / "best.sft", fs::copy_options::overwrite_existing);
    fs::copy_file(model::sidecar_path(dir / "final.sft"), model::sidecar_path(dir / "best.sft"),
                  fs::copy_options::overwrite_existing);
  }
  res.steps = trainer.step();
  res.final_loss = trainer.log().empty() ? kNaN : trainer.log().back().loss;
  res.train_pearson = model::evaluate_pearson(*net, train);
  res.final_checkpoint = dir / "final.sft";
  res.best_checkpoint = dir / "best.sft";
  auto summary = stamp(ctx);
  summary["stage"] = "train";
  summary["steps"] = res.steps;
  summary["final_loss"] = eval::metric_json(res.final_loss);
  nlohmann::ordered_json tp = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < markers.size(); ++k) tp[markers[k]] = eval::metric_json(res.train_pearson[k]);
  summary["train_pearson"] = tp;
  summary["best_val_mean_pearson"] = eval::metric_json(best_score == -kInf ? kNaN : best_score);
  summary["parameters"] = net->parameter_count();
  summary["trainable_parameters"] = net->trainable_count();
  nlohmann::ordered_json digests = nlohmann::ordered_json::object();
  for (const char* f : {"final.sft", "best.sft", "loss_curve.csv", "val_log.csv"}) digests[f] = file_digest(dir / f);
  summary["artifacts"] = digests;
  write_json(dir / "summary.json", summary);
  return res;
}

// ---------------------------------------------------------------- evaluate

namespace {

struct EvalTile {
  ProcessedTile t;
  Tensor pred;  // (M, H, W) normalized space
  Tensor target;
  InstanceMask cells;
  std::vector<std::int32_t> ids;
};

double mean_finite(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : kNaN;
}

}  // namespace

eval::MetricReport cmd_evaluate(const RunContext& ctx) {
  const fs::path pre = ctx.output / "preprocess";
  if (!fs::exists(pre / "manifest.processed.jsonl")) throw UserError("preprocessed dataset not found under " + pre.string());
  const json ec = section(ctx.config, "evaluate");
  const auto tiles = load_processed(pre);
  const auto panel = io::load_panel(pre / "panel.resolved.json");
  const auto markers = panel.markers();
  const std::string protocol = ec.value("protocol", std::string("in_domain"));
  if (protocol != "in_domain" && protocol != "external") throw UserError("evaluate.protocol must be in_domain or external");
  const std::string source = ec.value("prediction_source", std::string("model"));
  if (source != "model" && source != "targets") throw UserError("evaluate.prediction_source must be model or targets");
  const std::string test_split = ec.value("test_split", std::string("test"));
  const std::string fit_split = ec.value("fit_split", std::string("val"));
  const double l2 = ec.value("probe_l2", 1.0);
  const double fit_fraction = ec.value("fit_fraction", 0.2);

  gating::CellTable cells;
  {
    std::istringstream in(textio::read_file(pre / "cells.csv"));
    cells = gating::read_csv(in);
  }
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < cells.rows.size(); ++i) {
    row_of[cells.rows[i].tile_id + "/" + std::to_string(cells.rows[i].cell_id)] = i;
  }

  // Label source: pseudo-labels from gating, or a planted-label CSV.
  std::vector<std::string> label_markers = markers;
  std::function<std::vector<std::uint8_t>(const std::string& key)> label_of;
  std::string label_source = "pseudo";
  synth::PlantedTable planted;
  std::map<std::string, std::size_t> planted_row;
  if (ec.contains("labels") && ec["labels"].get<std::string>() != "pseudo") {
    label_source = "planted";
    fs::path lp = ec["labels"].get<std::string>();
    if (lp.is_relative()) {
      const json paths = section(ctx.config, "paths");
      if (paths.contains("labels")) lp = paths["labels"].get<std::string>();
    }
    io::require_file(lp);
    planted = synth::read_planted(lp);
    label_markers.clear();
    for (const auto& m : planted.markers) {
      if (std::find(markers.begin(), markers.end(), m) != markers.end()) label_markers.push_back(m);
    }
    if (label_markers.empty()) throw UserError("label file shares no markers with the panel");
    for (std::size_t i = 0; i < planted.keys.size(); ++i) planted_row[planted.keys[i]] = i;
  }

  std::unique_ptr<model::Translator> net;
  std::string checkpoint_hash;
  if (source == "model") {
    fs::path ck = ec.value("checkpoint", (ctx.output / "train" / "best.sft").string());
    auto loaded = model::load_checkpoint(ck);
    net = std::move(loaded.model);
    checkpoint_hash = loaded.meta.value("config_hash", std::string());
    if (net->config().markers != static_cast<int>(markers.size())) throw UserError("checkpoint marker count != panel");
  }

  // Tiles used: test tiles, plus fit-split tiles for the in-domain probe.
  std::vector<EvalTile> test, fit;
  for (const auto& t : tiles) {
    const bool is_test = t.rec.split == test_split;
    const bool is_fit = protocol == "in_domain" && t.rec.split == fit_split;
    if (!is_test && !is_fit) continue;
    EvalTile e;
    e.t = t;
    e.target = stack_to_tensor(io::read_channels(t.normalized_path, t.rec.mpp));
    if (net) {
      model::Sample s;
      s.he = rgb_to_tensor(io::read_rgb(t.rec.he_path, t.rec.mpp));
      e.pred = model::predict_samples(*net, {s}, 1).front();
    } else {
      e.pred = e.target;
    }
    e.cells = io::read_mask(t.cells_path, t.rec.mpp);
    e.ids = e.cells.instance_ids();
    (is_test ? test : fit).push_back(std::move(e));
  }
  if (test.empty()) throw UserError("no tiles in evaluation split '" + test_split + "'");
  if (protocol == "in_domain" && fit.empty()) throw UserError("probe fit split '" + fit_split + "' is empty");
  say(ctx, "evaluate: " + std::to_string(test.size()) + " test tiles, protocol " + protocol);

  eval::MetricReport report;
  report.config_hash = ctx.config_hash;
  report.seed = ctx.seed;
  report.protocol = protocol;
  report.prediction_source = source;
  report.label_source = label_source;
  report.probe_l2 = l2;
  eval::BootstrapConfig boot;
  boot.n_samples = ec.value("bootstrap_samples", 1000);
  boot.seed = derive_seed(ctx.seed, "eval");
  report.bootstrap_samples = boot.n_samples;
  if (!checkpoint_hash.empty()) report.notes.push_back("checkpoint config hash " + checkpoint_hash);
  report.notes.push_back("probe fit once; bootstrap resamples test tiles of the scored cells");

  // Pixel metrics over the full test set.
  const std::size_t m_count = markers.size();
  std::vector<eval::MarkerReport> per_marker(m_count);
  for (std::size_t j = 0; j < m_count; ++j) {
    PearsonAccumulator acc;
    double sse = 0, n = 0, ssim_sum = 0;
    for (const auto& e : test) {
      const int h = e.target.dim(1), w = e.target.dim(2);
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      std::span<const double> p(e.pred.ptr() + j * plane, plane), t(e.target.ptr() + j * plane, plane);
      acc.add(p, t);
      for (std::size_t i = 0; i < plane; ++i) sse += (p[i] - t[i]) * (p[i] - t[i]);
      n += static_cast<double>(plane);
      ssim_sum += eval::ssim(p, t, w, h, 255.0);
    }
    auto& mr = per_marker[j];
    mr.marker = markers[j];
    mr.psnr = sse == 0 ? kInf : 10 * std::log10(255.0 * 255.0 / (sse / n));
    mr.ssim = ssim_sum / static_cast<double>(test.size());
    mr.pearson = acc.value();
    if (!acc.defined()) mr.pearson_note = acc.reason();
  }

  // Cell features: predicted mean expression of every marker.
  struct CellRef {
    std::size_t tile;  // index into test (or fit)
    std::string key;
  };
  auto features_of = [&](const std::vector<EvalTile>& set, std::vector<CellRef>& refs) {
    std::vector<std::vector<double>> rows;
    for (std::size_t ti = 0; ti < set.size(); ++ti) {
      const auto means = cell_means(set[ti].pred, set[ti].cells);
      for (std::size_t c = 0; c < set[ti].ids.size(); ++c) {
        refs.push_back({ti, set[ti].t.rec.tile_id + "/" + std::to_string(set[ti].ids[c])});
        rows.push_back(means[c]);
      }
    }
    eval::FeatureMatrix x(rows.size(), m_count);
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), x.data.begin() + r * m_count);
    return x;
  };
  std::vector<CellRef> test_refs, fit_refs;
  const auto x_test = features_of(test, test_refs);
  const auto x_fit_tiles = features_of(fit, fit_refs);

  auto labels_for = [&](const std::vector<CellRef>& refs, const std::string& marker) {
    std::vector<std::uint8_t> y;
    for (const auto& r : refs) {
      if (label_source == "pseudo") {
        auto it = row_of.find(r.key);
        if (it == row_of.end()) throw UserError("cell " + r.key + " missing from cells.csv");
        y.push_back(cells.rows[it->second].label[cells.marker_index(marker)]);
      } else {
        auto it = planted_row.find(r.key);
        if (it == planted_row.end()) throw UserError("cell " + r.key + " missing from planted labels");
        const auto k = static_cast<std::size_t>(
            std::find(planted.markers.begin(), planted.markers.end(), marker) - planted.markers.begin());
        y.push_back(planted.labels[it->second][k]);
      }
    }
    return y;
  };
  auto real_features = [&](const std::vector<CellRef>& refs) {
    eval::FeatureMatrix x(refs.size(), m_count);
    for (std::size_t r = 0; r < refs.size(); ++r) {
      auto it = row_of.find(refs[r].key);
      if (it == row_of.end()) throw UserError("cell " + refs[r].key + " missing from cells.csv");
      for (std::size_t k = 0; k < m_count; ++k) x.at(r, k) = cells.rows[it->second].mean_expr[k];
    }
    return x;
  };
  auto morph_features = [&](const std::vector<EvalTile>& set, const std::vector<CellRef>& refs) {
    std::map<std::string, std::vector<double>> by_key;
    for (const auto& e : set) {
      const auto nuclei = io::read_mask(e.t.rec.nuclei_path, e.t.rec.mpp);
      const auto he = io::read_rgb(e.t.rec.he_path, e.t.rec.mpp);
      for (const auto& m : eval::nuclear_morphometry(nuclei, he)) {
        by_key[e.t.rec.tile_id + "/" + std::to_string(m.id)] = {m.area,      m.perimeter, m.eccentricity, m.orientation,
                                                                 m.hema_mean, m.hema_std,  m.solidity};
      }
    }
    eval::FeatureMatrix x(refs.size(), eval::morphometry_feature_names().size());
    for (std::size_t r = 0; r < refs.size(); ++r) {
      auto it = by_key.find(refs[r].key);
      if (it == by_key.end()) continue;  // cell without a nucleus pixel: zeros
      std::copy(it->second.begin(), it->second.end(), x.data.begin() + r * x.cols);
    }
    return x;
  };

  // Split of cells into probe-fit and scored sets.
  std::vector<std::size_t> fit_rows, score_rows;  // external protocol: rows of x_test
  if (protocol == "external") {
    const auto split = eval::random_cell_split(test_refs.size(), fit_fraction, derive_seed(ctx.seed, "eval"));
    fit_rows = split.fit;
    score_rows = split.score;
    if (fit_rows.empty() || score_rows.empty()) throw UserError("external protocol split left an empty probe set");
  }

  // Scores for one feature family: probabilities on scored cells, plus
  // probabilities on every test cell for tile counts.
  struct Scored {
    bool skipped = false;
    std::string reason;
    std::vector<double> prob_scored;
    std::vector<std::uint8_t> y_scored;
    std::vector<double> prob_all_test;
    std::size_t fit_n = 0;
  };
  const auto test_feature_real = real_features(test_refs);
  const auto fit_feature_real = protocol == "in_domain" ? real_features(fit_refs) : eval::FeatureMatrix();
  const auto test_feature_morph = morph_features(test, test_refs);
  const auto fit_feature_morph = protocol == "in_domain" ? morph_features(fit, fit_refs) : eval::FeatureMatrix();

  auto score_family = [&](const eval::FeatureMatrix& xt, const eval::FeatureMatrix& xf, const std::string& marker) {
    Scored s;
    const auto y_test = labels_for(test_refs, marker);
    eval::FeatureMatrix x_fit;
    std::vector<std::uint8_t> y_fit;
    if (protocol == "in_domain") {
      x_fit = xf;
      y_fit = labels_for(fit_refs, marker);
    } else {
      x_fit = xt.select(fit_rows);
      for (auto r : fit_rows) y_fit.push_back(y_test[r]);
    }
    s.fit_n = x_fit.rows;
    eval::ProbeOptions opt;
    opt.l2 = l2;
    const auto probe = eval::fit_probe(x_fit, y_fit, opt);
    if (!probe.fitted) {
      s.skipped = true;
      s.reason = probe.skip_reason;
      return s;
    }
    s.prob_all_test = probe.predict_proba(xt);
    if (protocol == "in_domain") {
      s.prob_scored = s.prob_all_test;
      s.y_scored = y_test;
    } else {
      for (auto r : score_rows) {
        s.prob_scored.push_back(s.prob_all_test[r]);
        s.y_scored.push_back(y_test[r]);
      }
    }
    return s;
  };
  // Scored-cell positions grouped by test tile, for tile bootstrap.
  std::vector<std::size_t> scored_tile;
  if (protocol == "in_domain") {
    for (const auto& r : test_refs) scored_tile.push_back(r.tile);
  } else {
    for (auto r : score_rows) scored_tile.push_back(test_refs[r].tile);
  }
  std::vector<std::vector<std::size_t>> cells_by_tile(test.size());
  for (std::size_t i = 0; i < scored_tile.size(); ++i) cells_by_tile[scored_tile[i]].push_back(i);

  auto to_labels = [](const std::vector<double>& p) {
    std::vector<std::uint8_t> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] > 0.5;
    return out;
  };

  eval::BaselineReport upper{"upper_bound", {}, kNaN, kNaN}, morph{"morphometry", {}, kNaN, kNaN},
      random{"random_prevalence", {}, kNaN, kNaN};
  for (const auto& marker : label_markers) {
    const std::size_t j = static_cast<std::size_t>(std::find(markers.begin(), markers.end(), marker) - markers.begin());
    auto& mr = per_marker[j];
    const Scored s = score_family(x_test, x_fit_tiles, marker);
    mr.fit_cells = s.fit_n;
    if (s.skipped) {
      mr.probe_skipped = true;
      mr.skip_reason = s.reason;
    } else {
      mr.score_cells = s.y_scored.size();
      const double pos = std::count(s.y_scored.begin(), s.y_scored.end(), 1);
      mr.prevalence = s.y_scored.empty() ? kNaN : pos / static_cast<double>(s.y_scored.size());
      mr.auprc = eval::auprc(s.prob_scored, s.y_scored);
      mr.f1 = eval::f1_binary(to_labels(s.prob_scored), s.y_scored);
      auto subset = [&](const std::vector<std::size_t>& tiles_drawn, bool f1) {
        const auto idx = eval::cells_of_tiles(cells_by_tile, tiles_drawn);
        std::vector<double> p;
        std::vector<std::uint8_t> y;
        for (auto i : idx) {
          p.push_back(s.prob_scored[i]);
          y.push_back(s.y_scored[i]);
        }
        if (p.empty()) return kNaN;
        return f1 ? eval::f1_binary(to_labels(p), y) : eval::auprc(p, y);
      };
      if (test.size() >= 2 && boot.n_samples > 0) {
        const auto a = eval::bootstrap_ci([&](const auto& d) { return subset(d, false); }, test.size(), boot);
        const auto f = eval::bootstrap_ci([&](const auto& d) { return subset(d, true); }, test.size(), boot);
        mr.auprc_ci = {a.low, a.high, a.used, a.skipped};
        mr.f1_ci = {f.low, f.high, f.used, f.skipped};
      }

      // Tile counts: predicted positives vs reference positives, all cells of each test tile.
      const auto y_all = labels_for(test_refs, marker);
      eval::CountReport cr;
      cr.marker = marker;
      cr.predicted.assign(test.size(), 0.0);
      cr.reference.assign(test.size(), 0.0);
      for (std::size_t r = 0; r < test_refs.size(); ++r) {
        cr.predicted[test_refs[r].tile] += s.prob_all_test[r] > 0.5;
        cr.reference[test_refs[r].tile] += y_all[r];
      }
      if (test.size() >= 2) {
        const auto c = eval::cellcount_correlation(cr.predicted, cr.reference);
        cr.pearson = c.pearson;
        cr.slope = c.slope;
        cr.intercept = c.intercept;
      }
      report.counts.push_back(std::move(cr));

      const double prevalence = mr.prevalence;
      random.markers.push_back({marker, prevalence,
                                eval::random_baseline_f1(s.y_scored, prevalence, 100,
                                                         derive_seed(ctx.seed, "eval_random", j)),
                                false});
    }
    for (auto* fam : {&upper, &morph}) {
      const bool is_upper = fam == &upper;
      const Scored b = is_upper ? score_family(test_feature_real, fit_feature_real, marker)
                                : score_family(test_feature_morph, fit_feature_morph, marker);
      eval::BaselineMarker bm{marker, kNaN, kNaN, b.skipped};
      if (!b.skipped) {
        bm.auprc = eval::auprc(b.prob_scored, b.y_scored);
        bm.f1 = eval::f1_binary(to_labels(b.prob_scored), b.y_scored);
      }
      fam->markers.push_back(bm);
    }
  }
  report.markers = per_marker;
  // Cell-level macro covers labelled markers only; pixel macro covers all.
  report.baselines = {upper, morph, random};
  report.compute_macros();
  {
    std::vector<double> a, f;
    for (const auto& m : per_marker) {
      if (std::find(label_markers.begin(), label_markers.end(), m.marker) == label_markers.end()) continue;
      a.push_back(m.auprc);
      f.push_back(m.f1);
    }
    report.macro_auprc = mean_finite(a);
    report.macro_f1 = mean_finite(f);
  }

  const fs::path dir = ctx.output / "evaluate";
  fs::create_directories(dir);
  write_json(dir / "report.json", report.to_json());
  textio::write_file_atomic(dir / "report.csv", report.to_csv());
  textio::write_file_atomic(dir / "auprc.svg", eval::bar_chart_svg(report, "auprc"));
  textio::write_file_atomic(dir / "f1.svg", eval::bar_chart_svg(report, "f1"));
  for (const auto& c : report.counts) textio::write_file_atomic(dir / ("counts_" + c.marker + ".svg"), eval::count_scatter_svg(c));
  return report;
}

// ---------------------------------------------------------------- synth

json cmd_synth(const RunContext& ctx) {
  json sc = section(ctx.config, "synth");
  if (!sc.contains("seed")) sc["seed"] = ctx.seed;
  const auto cfg = synth::SynthConfig::from_json(sc);
  fs::path out = sc.value("output", (ctx.output / "synth").string());
  const auto s = synth::write_dataset(cfg, out);
  return {{"tiles", s.tiles},
          {"cells", s.cells},
          {"manifest", s.manifest.string()},
          {"panel", s.panel.string()},
          {"planted", s.planted.string()}};
}

}  // namespace stainforge::pipeline
