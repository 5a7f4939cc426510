#include "stainforge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "stainforge/io.hpp"
#include "stainforge/textio.hpp"

namespace stainforge::synth {

namespace {

constexpr std::uint8_t kTint[3][3] = {{110, 60, 150}, {150, 40, 80}, {50, 50, 140}};
constexpr double kMarkerLevel[3] = {1800.0, 1500.0, 1200.0};  // PanCK, CD45, CD3

std::string tile_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%03d", index);
  return buf;
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.tiles = j.value("tiles", c.tiles);
  c.side = j.value("side", c.side);
  c.mpp = j.value("mpp", c.mpp);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  c.af_lambda = j.value("af_lambda", c.af_lambda);
  if (c.tiles < 1 || c.side < 16 || c.side % 16 != 0) throw UserError("synth needs tiles >= 1 and side a multiple of 16");
  return c;
}

bool planted_label(const PlantedCell& cell, const std::string& marker) {
  if (marker == "PanCK") return cell.tint == 1;
  if (marker == "CD45") return cell.tint == 2;
  if (marker == "CD3") return cell.tint == 2 && cell.large;
  throw UserError("no planted marker named " + marker);
}

SynthTile generate_tile(const SynthConfig& config, int index) {
  Rng rng(derive_seed(config.seed, "synth", static_cast<std::uint64_t>(index)));
  const int s = config.side;
  SynthTile t;
  t.tile_id = tile_name(index);
  t.he = RgbImage(s, s, config.mpp);
  t.nuclei = InstanceMask(s, s, config.mpp);
  for (int c = 0; c < 6; ++c) t.mif.emplace_back(s, s, config.mpp);

  // Tissue everywhere except a blank band along one edge.
  const int band = static_cast<int>(std::lround(s * rng.uniform(0.15, 0.3)));
  const int edge = static_cast<int>(rng.below(4));
  auto in_tissue = [&](int x, int y) {
    switch (edge) {
      case 0: return x >= band;
      case 1: return x < s - band;
      case 2: return y >= band;
      default: return y < s - band;
    }
  };

  // Nuclei by rejection sampling with generous spacing.
  const int margin = 2;
  for (int attempt = 0; attempt < 400; ++attempt) {
    PlantedCell cell;
    cell.large = rng.bernoulli(0.5);
    cell.radius = cell.large ? 3.6 : 2.2;
    cell.tint = static_cast<int>(rng.below(3));
    cell.x = rng.uniform(margin + cell.radius, s - 1 - margin - cell.radius);
    cell.y = rng.uniform(margin + cell.radius, s - 1 - margin - cell.radius);
    bool ok = in_tissue(static_cast<int>(cell.x - cell.radius - 2), static_cast<int>(cell.y - cell.radius - 2)) &&
              in_tissue(static_cast<int>(cell.x + cell.radius + 2), static_cast<int>(cell.y + cell.radius + 2));
    for (const auto& o : t.cells) {
      if (std::hypot(o.x - cell.x, o.y - cell.y) < o.radius + cell.radius + 8) ok = false;
    }
    if (!ok) continue;
    cell.tile_id = t.tile_id;
    cell.cell_id = static_cast<int>(t.cells.size()) + 1;
    t.cells.push_back(cell);
  }

  const double f1x = rng.uniform(0.5, 1.5), f1y = rng.uniform(0.5, 1.5), p1 = rng.uniform(0, 2 * std::numbers::pi);
  const double f2x = rng.uniform(1.5, 3.0), f2y = rng.uniform(1.5, 3.0), p2 = rng.uniform(0, 2 * std::numbers::pi);

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const bool tissue = in_tissue(x, y);
      int owner = 0;
      double owner_d = kInf;
      for (const auto& c : t.cells) {
        const double d = std::hypot(x - c.x, y - c.y);
        if (d < owner_d) {
          owner_d = d;
          owner = c.cell_id;
        }
      }
      const PlantedCell* cell = owner ? &t.cells[owner - 1] : nullptr;
      const bool nucleus = cell && owner_d <= cell->radius;
      if (nucleus) t.nuclei.at(x, y) = owner;

      // H&E
      for (int ch = 0; ch < 3; ++ch) {
        double v;
        if (nucleus) {
          v = kTint[cell->tint][ch] + rng.normal(0, 6);
        } else if (tissue) {
          static constexpr double stroma[3] = {200, 120, 170};
          v = stroma[ch] + rng.normal(0, 6);
        } else {
          static constexpr double blank[3] = {244, 242, 246};
          v = blank[ch] + rng.normal(0, 3);
        }
        t.he.at(x, y, ch) = clamp_u8(v);
      }

      // mIF
      const double af = tissue ? 150 + 60 * std::cos(2 * std::numbers::pi * (f1x * x + f1y * y) / s + p1) +
                                     40 * std::cos(2 * std::numbers::pi * (f2x * x + f2y * y) / s + p2) +
                                     (nucleus ? 40 : 0)
                               : 5.0;
      t.mif[4].at(x, y) = std::max(0.0, af + rng.normal(0, 5));
      t.mif[0].at(x, y) = std::max(0.0, (nucleus ? 3000.0 : (tissue ? 60.0 : 10.0)) + rng.normal(0, 30));
      for (int m = 0; m < 3; ++m) {
        double v = (tissue ? 60.0 : 10.0) + rng.normal(0, 20);
        if (cell && owner_d <= cell->radius + 2 && planted_label(*cell, planted_markers()[m])) v += kMarkerLevel[m];
        t.mif[1 + m].at(x, y) = std::max(0.0, v + config.af_lambda * t.mif[4].at(x, y));
      }
      t.mif[5].at(x, y) = std::max(0.0, 20 + rng.normal(0, 5));
    }
  }
  return t;
}

SynthSummary write_dataset(const SynthConfig& config, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  for (const char* d : {"he", "mif", "nuclei"}) fs::create_directories(out_dir / d);
  const int n_test = static_cast<int>(std::lround(config.tiles * config.test_fraction));
  const int n_val = static_cast<int>(std::lround(config.tiles * config.val_fraction));
  const int n_train = config.tiles - n_val - n_test;
  if (n_train < 1) throw UserError("synth split leaves no training tiles");

  SynthSummary summary;
  std::vector<io::TileRecord> records;
  std::string planted = "tile_id,cell_id,x,y,radius,tint,large";
  for (const auto& m : planted_markers()) planted += ",planted_" + m;
  planted += "\n";
  for (int i = 0; i < config.tiles; ++i) {
    const SynthTile t = generate_tile(config, i);
    const std::string split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    io::write_rgb(out_dir / "he" / (t.tile_id + ".png"), t.he);
    io::write_channels_u16(out_dir / "mif" / (t.tile_id + ".tif"), t.mif);
    io::write_mask(out_dir / "nuclei" / (t.tile_id + ".png"), t.nuclei);
    io::TileRecord r;
    r.slide_id = "slide_" + split;
    r.tile_id = t.tile_id;
    r.x = i * config.side;
    r.y = 0;
    r.mpp = config.mpp;
    r.he_path = "he/" + t.tile_id + ".png";
    r.mif_path = "mif/" + t.tile_id + ".tif";
    r.nuclei_path = "nuclei/" + t.tile_id + ".png";
    r.he_nuclei_path = r.nuclei_path;
    r.split = split;
    records.push_back(r);
    for (const auto& c : t.cells) {
      planted += c.tile_id + "," + std::to_string(c.cell_id) + "," + textio::fmt(c.x) + "," + textio::fmt(c.y) + "," +
                 textio::fmt(c.radius) + "," + std::to_string(c.tint) + "," + (c.large ? "1" : "0");
      for (const auto& m : planted_markers()) planted += planted_label(c, m) ? ",1" : ",0";
      planted += "\n";
    }
    summary.cells += t.cells.size();
  }
  summary.tiles = config.tiles;
  summary.manifest = out_dir / "manifest.jsonl";
  summary.panel = out_dir / "panel.json";
  summary.planted = out_dir / "planted_cells.csv";
  io::write_manifest(summary.manifest, records);
  textio::write_file_atomic(summary.planted, planted);

  io::PanelConfig panel;
  panel.channels = {"Hoechst", "PanCK", "CD45", "CD3", "AF", "Empty"};
  panel.af_channel = "AF";
  panel.empty_channel = "Empty";
  panel.nuclear_channel = "Hoechst";
  for (const auto& m : planted_markers()) panel.af[m] = {config.af_lambda, 0.0};
  panel.af["Hoechst"] = {0.0, 0.0};
  panel.hierarchy = {{"CD3", "CD45"}};
  io::save_panel(summary.panel, panel);
  return summary;
}

PlantedTable read_planted(const std::filesystem::path& csv) {
  std::istringstream in(textio::read_file(csv));
  std::string line;
  if (!std::getline(in, line)) throw UserError("empty planted label file " + csv.string());
  const auto header = textio::split(line, ',');
  PlantedTable t;
  std::vector<std::size_t> cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i].rfind("planted_", 0) == 0) {
      t.markers.push_back(header[i].substr(8));
      cols.push_back(i);
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = textio::split(line, ',');
    if (f.size() != header.size()) throw UserError("malformed row in " + csv.string());
    t.keys.push_back(f[0] + "/" + f[1]);
    std::vector<std::uint8_t> l;
    for (auto c : cols) l.push_back(f[c] == "1");
    t.labels.push_back(std::move(l));
  }
  return t;
}

}  // namespace stainforge::synth
