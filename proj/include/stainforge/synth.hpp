#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/image.hpp"

namespace stainforge::synth {

// Paired H&E / mIF tiles with planted cell phenotypes. Nuclei come in three
// stain tints and two sizes; the three marker channels are functions of them:
//   PanCK = magenta nucleus, CD45 = blue nucleus, CD3 = blue and large.
// Panel channel order: Hoechst, PanCK, CD45, CD3, AF, Empty.

struct SynthConfig {
  int tiles = 20;
  int side = 64;
  double mpp = 0.5;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  double af_lambda = 0.7;  // true AF contamination of every marker channel

  static SynthConfig from_json(const nlohmann::json& j);
};

struct PlantedCell {
  std::string tile_id;
  int cell_id = 0;
  double x = 0, y = 0;
  double radius = 0;
  int tint = 0;  // 0 purple (negative), 1 magenta, 2 blue
  bool large = false;
};

inline const std::vector<std::string>& planted_markers() {
  static const std::vector<std::string> m{"PanCK", "CD45", "CD3"};
  return m;
}

/// Planted label of `marker` (one of planted_markers()) for a cell.
bool planted_label(const PlantedCell& cell, const std::string& marker);

struct SynthTile {
  std::string tile_id;
  RgbImage he;
  ChannelStack mif;  // raw counts in panel channel order
  InstanceMask nuclei;
  std::vector<PlantedCell> cells;
};

SynthTile generate_tile(const SynthConfig& config, int index);

struct SynthSummary {
  int tiles = 0;
  std::size_t cells = 0;
  std::filesystem::path manifest;
  std::filesystem::path panel;
  std::filesystem::path planted;
};

/// Writes he/, mif/, nuclei/ tiles plus manifest.jsonl, panel.json and
/// planted_cells.csv under `out_dir`.
SynthSummary write_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

struct PlantedTable {
  std::vector<std::string> markers;
  // keyed by tile_id + "/" + cell_id
  std::vector<std::string> keys;
  std::vector<std::vector<std::uint8_t>> labels;  // [cell][marker]
};
PlantedTable read_planted(const std::filesystem::path& csv);

}  // namespace stainforge::synth
