#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace stainforge::config {

using json = nlohmann::json;

/// TOML document as JSON (tables -> objects, arrays -> arrays, dates -> strings).
json parse_toml(const std::string& text, const std::string& source = "config");

/// STAINFORGE_SECTION__KEY=value sets config["section"]["key"]; a single
/// segment (STAINFORGE_SEED) sets a top-level key. Keys are lower-cased;
/// values parse as JSON when possible, else as strings.
void apply_env_overrides(json& config, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> process_environment();

/// Reads .toml or .json (by extension; anything else is tried as JSON then
/// TOML), then applies overrides from the process environment. Relative
/// entries under "paths" resolve against the config file's directory.
json load(const std::filesystem::path& path);

/// Stable digest of the resolved config.
std::string hash(const json& config);

}  // namespace stainforge::config
