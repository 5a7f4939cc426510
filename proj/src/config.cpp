#include "stainforge/config.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include <toml.hpp>

#include "stainforge/common.hpp"
#include "stainforge/textio.hpp"

extern char** environ;

namespace stainforge::config {

namespace {

json to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(to_json(v));
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  std::ostringstream s;
  if (const auto* v = node.as_date()) s << v->get();
  else if (const auto* v = node.as_time()) s << v->get();
  else if (const auto* v = node.as_date_time()) s << v->get();
  return s.str();
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

json parse_toml(const std::string& text, const std::string& source) {
  try {
    return to_json(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "invalid TOML in " << source << ": " << e.description() << " at line " << e.source().begin.line;
    throw UserError(msg.str());
  }
}

void apply_env_overrides(json& config, const std::map<std::string, std::string>& env) {
  const std::string prefix = "STAINFORGE_";
  for (const auto& [name, value] : env) {
    if (name.rfind(prefix, 0) != 0 || name.size() == prefix.size()) continue;
    std::vector<std::string> keys;
    std::string rest = name.substr(prefix.size());
    std::size_t pos;
    while ((pos = rest.find("__")) != std::string::npos) {
      keys.push_back(lower(rest.substr(0, pos)));
      rest = rest.substr(pos + 2);
    }
    keys.push_back(lower(rest));
    json* node = &config;
    for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
      if (!node->contains(keys[i]) || !(*node)[keys[i]].is_object()) (*node)[keys[i]] = json::object();
      node = &(*node)[keys[i]];
    }
    json parsed = json::parse(value, nullptr, false);
    (*node)[keys.back()] = parsed.is_discarded() ? json(value) : parsed;
  }
}

std::map<std::string, std::string> process_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv(*e);
    const auto eq = kv.find('=');
    if (eq != std::string::npos) out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

json load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UserError("config file not found: " + path.string());
  const std::string text = textio::read_file(path);
  const std::string ext = lower(path.extension().string());
  json cfg;
  if (ext == ".toml") {
    cfg = parse_toml(text, path.string());
  } else {
    cfg = json::parse(text, nullptr, false);
    if (cfg.is_discarded()) {
      if (ext == ".json") throw UserError("invalid JSON in " + path.string());
      cfg = parse_toml(text, path.string());
    }
  }
  if (!cfg.is_object()) throw UserError("config root must be a table/object");
  apply_env_overrides(cfg, process_environment());
  if (cfg.contains("paths") && cfg["paths"].is_object()) {
    const auto base = std::filesystem::absolute(path).parent_path();
    for (auto& [k, v] : cfg["paths"].items()) {
      if (v.is_string() && !v.get<std::string>().empty()) {
        std::filesystem::path p(v.get<std::string>());
        if (p.is_relative()) v = (base / p).lexically_normal().string();
      }
    }
  }
  return cfg;
}

std::string hash(const json& config) { return textio::hash_hex(config.dump()); }

}  // namespace stainforge::config
