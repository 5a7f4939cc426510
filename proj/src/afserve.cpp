#include "stainforge/afserve.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <optional>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "stainforge/imgproc.hpp"
#include "stainforge/textio.hpp"

namespace stainforge::afserve {

using json = nlohmann::json;

struct Service::Http {
  httplib::Server server;
};

namespace {

Response json_response(int status, const json& j) { return {status, "application/json", j.dump()}; }
Response error(int status, const std::string& message) { return json_response(status, {{"error", message}}); }

// Strict decimal parse; nullopt for junk or non-finite values.
std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string check_lambda(double lambda) {
  if (!(lambda >= 0 && lambda <= kLambdaMax)) return "lambda must be within [0, " + textio::fmt(kLambdaMax) + "]";
  return "";
}

std::string check_bias(double b) {
  if (!(b >= -kBiasLimit && b <= kBiasLimit)) return "b must be within [-" + textio::fmt(kBiasLimit) + ", " + textio::fmt(kBiasLimit) + "]";
  return "";
}

}  // namespace

Service::Service(ServeOptions options) : options_(std::move(options)), http_(std::make_shared<Http>()) {
  if (options_.audit_log.empty() && !options_.panel.empty()) options_.audit_log = options_.panel.string() + ".audit.log";
}

std::string Service::load() {
  try {
    if (options_.panel.empty() || options_.manifest.empty()) throw UserError("serve needs a manifest and a panel");
    read_panel();
    records_ = io::load_manifest(options_.manifest);
    index_.clear();
    for (std::size_t i = 0; i < records_.size(); ++i) index_[records_[i].tile_id] = i;
    loaded_ = true;
    return "";
  } catch (const std::exception& e) {
    loaded_ = false;
    return e.what();
  }
}

io::PanelConfig Service::read_panel() const { return io::load_panel(options_.panel); }

std::shared_ptr<const Service::Tile> Service::tile(const std::string& id) {
  auto it = index_.find(id);
  if (it == index_.end()) return nullptr;
  {
    std::lock_guard<std::mutex> lock(cache_mutex_);
    auto c = cache_.find(id);
    if (c != cache_.end()) return c->second;
  }
  auto t = std::make_shared<Tile>();
  t->record = records_[it->second];
  t->mif = io::read_channels(t->record.mif_path, t->record.mpp);
  t->he = io::read_rgb(t->record.he_path, t->record.mpp);
  std::lock_guard<std::mutex> lock(cache_mutex_);
  return cache_.emplace(id, std::move(t)).first->second;
}

double Service::display_window(const ChannelImage& raw) const {
  std::vector<double> v = raw.pixels;
  std::sort(v.begin(), v.end());
  return std::max(1.0, imgproc::interpolated_percentile(v, 0.995));
}

std::vector<std::uint8_t> Service::window_to_u8(const ChannelImage& img, double hi) {
  std::vector<std::uint8_t> out(img.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i] / hi, 0.0, 1.0) * 255.0));
  }
  return out;
}

ChannelImage Service::corrected_channel(const std::string& tile_id, const std::string& channel, double lambda,
                                        double b) {
  auto t = tile(tile_id);
  if (!t) throw UserError("unknown tile " + tile_id);
  const auto panel = read_panel();
  const auto& raw = t->mif.at(panel.channel_index(channel));
  const ChannelImage af = panel.af_channel.empty() ? ChannelImage(raw.width, raw.height, raw.mpp, 0.0)
                                                   : t->mif.at(panel.channel_index(panel.af_channel));
  return imgproc::af_subtract(raw, af, {lambda, b});
}

Response Service::channels() {
  std::shared_lock lock(panel_mutex_);
  const auto panel = read_panel();
  json list = json::array();
  for (const auto& c : panel.channels) {
    std::string role = "marker";
    if (c == panel.af_channel) role = "af";
    else if (c == panel.empty_channel) role = "empty";
    const auto p = panel.af_params(c);
    list.push_back({{"name", c}, {"role", role}, {"lambda", p.lambda}, {"b", p.b}});
  }
  json tiles = json::array();
  for (const auto& r : records_) tiles.push_back(r.tile_id);
  return json_response(200, {{"channels", list},
                             {"af_channel", panel.af_channel},
                             {"tiles", tiles},
                             {"panel_hash", panel.hash()},
                             {"limits", {{"lambda_max", kLambdaMax}, {"b_limit", kBiasLimit}}}});
}

namespace {

struct PreviewArgs {
  std::string tile, channel;
  double lambda = 0, b = 0;
  std::optional<double> window;
  bool side_by_side = false;
};

// Validates the query; returns an error response on failure.
std::optional<Response> parse_preview(const Query& q, bool need_params, PreviewArgs& a) {
  auto get = [&](const char* k) -> const std::string* {
    auto it = q.find(k);
    return it == q.end() ? nullptr : &it->second;
  };
  if (!get("tile") || !get("channel")) return error(422, "tile and channel are required");
  a.tile = *get("tile");
  a.channel = *get("channel");
  if (need_params) {
    for (const char* k : {"lambda", "b"}) {
      const std::string* s = get(k);
      if (!s) return error(422, std::string(k) + " is required");
      const auto v = parse_number(*s);
      if (!v) return error(422, std::string(k) + " is not a finite number");
      (std::string(k) == "lambda" ? a.lambda : a.b) = *v;
    }
    if (auto m = check_lambda(a.lambda); !m.empty()) return error(422, m);
    if (auto m = check_bias(a.b); !m.empty()) return error(422, m);
  }
  if (const std::string* w = get("window")) {
    const auto v = parse_number(*w);
    if (!v || !(*v > 0)) return error(422, "window must be a positive number");
    a.window = v;
  }
  if (const std::string* s = get("side_by_side")) a.side_by_side = *s == "1" || *s == "true";
  return std::nullopt;
}

}  // namespace

Response Service::preview(const Query& q) {
  PreviewArgs a;
  if (auto err = parse_preview(q, true, a)) return *err;
  auto t = tile(a.tile);
  if (!t) return error(404, "unknown tile " + a.tile);
  std::shared_lock lock(panel_mutex_);
  const auto panel = read_panel();
  if (std::find(panel.channels.begin(), panel.channels.end(), a.channel) == panel.channels.end()) {
    return error(404, "unknown channel " + a.channel);
  }
  const auto& raw = t->mif.at(panel.channel_index(a.channel));
  const ChannelImage corr = corrected_channel(a.tile, a.channel, a.lambda, a.b);
  const double hi = a.window.value_or(display_window(raw));
  auto pix = window_to_u8(corr, hi);
  int w = corr.width;
  if (a.side_by_side) {
    const auto left = window_to_u8(raw, hi);
    std::vector<std::uint8_t> both(pix.size() * 2);
    for (int y = 0; y < corr.height; ++y) {
      std::copy_n(left.begin() + y * w, w, both.begin() + y * 2 * w);
      std::copy_n(pix.begin() + y * w, w, both.begin() + y * 2 * w + w);
    }
    pix = std::move(both);
    w *= 2;
  }
  return {200, "image/png", io::encode_png_gray(pix, w, corr.height)};
}

Response Service::raw(const Query& q) {
  PreviewArgs a;
  if (auto err = parse_preview(q, false, a)) return *err;
  auto t = tile(a.tile);
  if (!t) return error(404, "unknown tile " + a.tile);
  std::shared_lock lock(panel_mutex_);
  const auto panel = read_panel();
  if (std::find(panel.channels.begin(), panel.channels.end(), a.channel) == panel.channels.end()) {
    return error(404, "unknown channel " + a.channel);
  }
  const auto& raw = t->mif.at(panel.channel_index(a.channel));
  return {200, "image/png", io::encode_png_gray(window_to_u8(raw, a.window.value_or(display_window(raw))), raw.width,
                                                raw.height)};
}

Response Service::corrected(const Query& q) {
  PreviewArgs a;
  if (auto err = parse_preview(q, true, a)) return *err;
  if (!tile(a.tile)) return error(404, "unknown tile " + a.tile);
  std::shared_lock lock(panel_mutex_);
  const auto panel = read_panel();
  if (std::find(panel.channels.begin(), panel.channels.end(), a.channel) == panel.channels.end()) {
    return error(404, "unknown channel " + a.channel);
  }
  const auto c = corrected_channel(a.tile, a.channel, a.lambda, a.b);
  return json_response(200, {{"width", c.width}, {"height", c.height}, {"values", c.pixels}});
}

Response Service::save_params(const std::string& body) {
  const json req = json::parse(body, nullptr, false);
  if (req.is_discarded() || !req.is_object()) return error(400, "body must be a JSON object");
  if (!req.contains("channel") || !req["channel"].is_string()) return error(422, "channel is required");
  if (!req.contains("lambda") || !req["lambda"].is_number() || !req.contains("b") || !req["b"].is_number()) {
    return error(422, "lambda and b must be numbers");
  }
  const std::string channel = req["channel"];
  const double lambda = req["lambda"], b = req["b"];
  if (auto m = check_lambda(lambda); !m.empty()) return error(422, m);
  if (auto m = check_bias(b); !m.empty()) return error(422, m);

  std::unique_lock lock(panel_mutex_);
  auto panel = read_panel();
  if (std::find(panel.channels.begin(), panel.channels.end(), channel) == panel.channels.end()) {
    return error(404, "unknown channel " + channel);
  }
  if (channel == panel.af_channel || channel == panel.empty_channel) {
    return error(422, "channel " + channel + " takes no AF parameters");
  }
  const auto old = panel.af_params(channel);
  // Optimistic check: the client states what it believes is on disk.
  if (req.contains("expected")) {
    const auto& e = req["expected"];
    if (!e.is_object() || !e.contains("lambda") || !e.contains("b")) return error(422, "expected needs lambda and b");
    if (e["lambda"].get<double>() != old.lambda || e["b"].get<double>() != old.b) {
      return json_response(409, {{"error", "panel changed since it was read"},
                                 {"current", {{"lambda", old.lambda}, {"b", old.b}}}});
    }
  }
  panel.af[channel] = {lambda, b};
  io::save_panel(options_.panel, panel);
  {
    std::ofstream audit(options_.audit_log, std::ios::app);
    audit << utc_now() << " " << channel << " lambda " << textio::fmt(old.lambda) << " -> " << textio::fmt(lambda)
          << " b " << textio::fmt(old.b) << " -> " << textio::fmt(b) << "\n";
  }
  return json_response(200, {{"channel", channel},
                             {"lambda", lambda},
                             {"b", b},
                             {"previous", {{"lambda", old.lambda}, {"b", old.b}}}});
}

Response Service::tile_he(const std::string& tile_id) {
  auto t = tile(tile_id);
  if (!t) return error(404, "unknown tile " + tile_id);
  return {200, "image/png", io::encode_png_rgb(t->he)};
}

Response Service::handle(const std::string& method, const std::string& path, const Query& query,
                         const std::string& body) {
  if (path.rfind("/api/", 0) != 0) return error(404, "not found");
  if (!loaded_) return error(503, "tile store not loaded");
  try {
    if (method == "GET" && path == "/api/channels") return channels();
    if (method == "GET" && path == "/api/preview") return preview(query);
    if (method == "GET" && path == "/api/raw") return raw(query);
    if (method == "GET" && path == "/api/corrected") return corrected(query);
    if (method == "POST" && path == "/api/params") return save_params(body);
    const std::string prefix = "/api/tile/";
    if (method == "GET" && path.rfind(prefix, 0) == 0 && path.size() > prefix.size() + 3 &&
        path.compare(path.size() - 3, 3, "/he") == 0) {
      return tile_he(path.substr(prefix.size(), path.size() - prefix.size() - 3));
    }
    return error(404, "no route for " + method + " " + path);
  } catch (const UserError& e) {
    return error(422, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

void Service::listen() {
  auto& srv = http_->server;
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    Query q;
    for (const auto& [k, v] : req.params) q[k] = v;
    const Response r = handle(req.method, req.path, q, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  srv.Get(R"(/api/.*)", route);
  srv.Post(R"(/api/.*)", route);
  if (!options_.static_dir.empty() && fs::is_directory(options_.static_dir)) {
    srv.set_mount_point("/", options_.static_dir.string());
  }
  int port = options_.port;
  if (port == 0) {
    port = srv.bind_to_any_port(options_.host);
  } else if (!srv.bind_to_port(options_.host, port)) {
    throw UserError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  }
  if (port <= 0) throw UserError("cannot bind " + options_.host);
  bound_port_ = port;
  listening_ = true;
  srv.listen_after_bind();
  listening_ = false;
}

void Service::stop() {
  http_->server.stop();
}

bool Service::wait_until_listening(int timeout_ms) const {
  for (int waited = 0; waited < timeout_ms; waited += 5) {
    if (listening_ && http_->server.is_running()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return false;
}

}  // namespace stainforge::afserve
