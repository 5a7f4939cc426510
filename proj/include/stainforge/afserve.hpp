#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "stainforge/image.hpp"
#include "stainforge/io.hpp"

namespace stainforge::afserve {

namespace fs = std::filesystem;

// Accepted parameter ranges; the tuning UI clamps its sliders to the same.
inline constexpr double kLambdaMax = 5.0;
inline constexpr double kBiasLimit = 50.0;

struct ServeOptions {
  fs::path manifest;
  fs::path panel;
  fs::path static_dir;  // optional UI bundle served at /
  fs::path audit_log;   // defaults to <panel>.audit.log
  std::string host = "127.0.0.1";
  int port = 8765;
};

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

using Query = std::map<std::string, std::string>;

/// Request handling without sockets; listen() wires it to HTTP.
class Service {
 public:
  explicit Service(ServeOptions options);

  /// Loads the manifest and checks the panel; on failure the service stays
  /// up and answers 503. Returns the error text, empty on success.
  std::string load();
  bool loaded() const { return loaded_; }

  Response handle(const std::string& method, const std::string& path, const Query& query,
                  const std::string& body);

  Response channels();
  Response preview(const Query& q);
  Response raw(const Query& q);
  Response corrected(const Query& q);
  Response save_params(const std::string& body);
  Response tile_he(const std::string& tile_id);

  /// Corrected channel exactly as the preview computes it (before windowing).
  ChannelImage corrected_channel(const std::string& tile_id, const std::string& channel, double lambda, double b);
  /// Upper display bound: 99.5th percentile of the raw channel (>= 1).
  double display_window(const ChannelImage& raw) const;
  static std::vector<std::uint8_t> window_to_u8(const ChannelImage& img, double hi);

  /// Blocks serving HTTP until stop().
  void listen();
  void stop();
  /// Port actually bound (useful with port 0).
  int bound_port() const { return bound_port_; }
  bool wait_until_listening(int timeout_ms) const;

 private:
  struct Tile {
    io::TileRecord record;
    ChannelStack mif;
    RgbImage he;
  };
  std::shared_ptr<const Tile> tile(const std::string& id);
  io::PanelConfig read_panel() const;

  ServeOptions options_;
  bool loaded_ = false;
  std::vector<io::TileRecord> records_;
  std::map<std::string, std::size_t> index_;
  std::mutex cache_mutex_;
  std::map<std::string, std::shared_ptr<const Tile>> cache_;
  mutable std::shared_mutex panel_mutex_;  // writers exclusive, readers shared
  std::atomic<int> bound_port_{0};
  std::atomic<bool> listening_{false};
  struct Http;
  std::shared_ptr<Http> http_;
};

}  // namespace stainforge::afserve
