#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stainforge/model/translator.hpp"

namespace stainforge::model {

enum class DType : std::uint32_t { kF32 = 0, kF64 = 1 };

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

// Layout: "SFTW", u32 version, u32 count, then per array: u32 name length,
// name bytes, u32 dtype, u32 rank, u32 dims[rank], little-endian payload.
std::string encode_arrays(const std::vector<NamedArray>& arrays, DType dtype);
std::vector<NamedArray> decode_arrays(std::string_view bytes);

void write_arrays(const std::filesystem::path& path, const std::vector<NamedArray>& arrays, DType dtype);
std::vector<NamedArray> read_arrays(const std::filesystem::path& path);

std::vector<NamedArray> snapshot(Translator& model);
/// Copies arrays into the model by name; every model parameter must be present.
void restore(Translator& model, const std::vector<NamedArray>& arrays);

inline std::filesystem::path sidecar_path(const std::filesystem::path& weights) {
  return std::filesystem::path(weights.string() + ".json");
}

/// Writes float32 weights to `path` and `meta` plus the model/LoRA config to
/// the JSON sidecar.
void save_checkpoint(const std::filesystem::path& path, Translator& model, nlohmann::ordered_json meta);

struct LoadedCheckpoint {
  std::unique_ptr<Translator> model;
  nlohmann::json meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stainforge::model
