#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/gating.hpp"
#include "stainforge/image.hpp"
#include "stainforge/imgproc.hpp"

namespace stainforge::io {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

/// Channel layout and per-channel preprocessing parameters of an mIF panel.
struct PanelConfig {
  std::vector<std::string> channels;  // page order in the mIF TIFF
  std::string af_channel;             // empty when the panel has none
  std::string empty_channel;          // antibody-free QC channel, optional
  std::string nuclear_channel;        // nuclear stain used for tissue QC
  std::map<std::string, imgproc::AFParams> af;
  std::map<std::string, double> q999;
  std::vector<gating::HierarchyRule> hierarchy;
  imgproc::LogBase log_base = imgproc::LogBase::kTwo;

  /// Marker channels: every channel except the AF and empty channels.
  std::vector<std::string> markers() const;
  std::size_t channel_index(const std::string& name) const;
  imgproc::AFParams af_params(const std::string& marker) const;

  static PanelConfig from_json(const json& j);
  ordered_json to_json() const;
  std::string hash() const;
};

PanelConfig load_panel(const fs::path& path);
void save_panel(const fs::path& path, const PanelConfig& panel);

struct TileRecord {
  std::string slide_id;
  std::string tile_id;
  int x = 0;
  int y = 0;
  double mpp = 0.5;
  std::string he_path;
  std::string mif_path;
  std::string split;
  std::string nuclei_path;     // nucleus instance mask aligned with the mIF tile
  std::string he_nuclei_path;  // H&E-side nuclei, consecutive-section QC only
  json extra = json::object(); // any further fields, carried through untouched

  static TileRecord from_json(const json& j);
  ordered_json to_json() const;
};

/// Reads a JSONL manifest. Relative paths resolve against the manifest's
/// directory.
std::vector<TileRecord> load_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const std::vector<TileRecord>& records);

RgbImage read_rgb(const fs::path& path, double mpp);
void write_rgb(const fs::path& path, const RgbImage& image);

/// Multi-page (or single-page) TIFF; each page becomes one channel.
ChannelStack read_channels(const fs::path& path, double mpp);
void write_channels_u16(const fs::path& path, const ChannelStack& channels);
void write_channels_f32(const fs::path& path, const ChannelStack& channels);

InstanceMask read_mask(const fs::path& path, double mpp);
void write_mask(const fs::path& path, const InstanceMask& mask);

std::string encode_png_gray(const std::vector<std::uint8_t>& pixels, int width, int height);
std::string encode_png_rgb(const RgbImage& image);

void require_file(const fs::path& path);

}  // namespace stainforge::io
