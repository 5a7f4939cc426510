#include <doctest.h>

#include <thread>

#include <httplib.h>

#include "oracles.hpp"
#include "stainforge/afserve.hpp"
#include "stainforge/synth.hpp"
#include "stainforge/textio.hpp"

using namespace stainforge;
using namespace stainforge::afserve;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Fixture {
  fs::path dir;
  ServeOptions opt;
  std::string tile;

  explicit Fixture(const std::string& name) {
    dir = oracle::temp_dir(name);
    synth::SynthConfig c;
    c.tiles = 2;
    c.side = 32;
    synth::write_dataset(c, dir);
    opt.manifest = dir / "manifest.jsonl";
    opt.panel = dir / "panel.json";
    opt.port = 0;
    tile = io::load_manifest(opt.manifest).front().tile_id;
  }
};

json body(const Response& r) { return json::parse(r.body); }

}  // namespace

TEST_CASE("service without a store answers 503") {
  ServeOptions opt;
  opt.manifest = "/nonexistent/m.jsonl";
  opt.panel = "/nonexistent/p.json";
  Service s(opt);
  CHECK_FALSE(s.load().empty());
  CHECK(s.handle("GET", "/api/channels", {}, "").status == 503);
}

TEST_CASE("service handlers") {
  Fixture fx("afserve_handlers");
  Service s(fx.opt);
  REQUIRE(s.load().empty());

  SUBCASE("channels lists roles and limits") {
    const auto r = s.handle("GET", "/api/channels", {}, "");
    REQUIRE(r.status == 200);
    const auto j = body(r);
    CHECK(j["af_channel"] == "AF");
    CHECK(j["limits"]["lambda_max"] == kLambdaMax);
    CHECK(j["tiles"].size() == 2);
    bool saw_empty = false;
    for (const auto& c : j["channels"]) saw_empty |= c["role"] == "empty";
    CHECK(saw_empty);
  }
  SUBCASE("corrected values follow the subtraction") {
    const auto r = s.handle("GET", "/api/corrected", {{"tile", fx.tile}, {"channel", "CD3"}, {"lambda", "0.5"}, {"b", "3"}}, "");
    REQUIRE(r.status == 200);
    const auto j = body(r);
    const auto rec = io::load_manifest(fx.opt.manifest).front();
    const auto mif = io::read_channels(rec.mif_path, rec.mpp);
    const auto panel = io::load_panel(fx.opt.panel);
    const auto& cd3 = mif[panel.channel_index("CD3")];
    const auto& af = mif[panel.channel_index("AF")];
    const auto& v = j["values"];
    REQUIRE(v.size() == cd3.size());
    for (std::size_t i = 0; i < cd3.size(); ++i) {
      CHECK(v[i].get<double>() == std::max(0.0, cd3.pixels[i] - 0.5 * af.pixels[i] + 3));
    }
  }
  SUBCASE("preview is a png, side by side doubles the width") {
    const Query q{{"tile", fx.tile}, {"channel", "CD45"}, {"lambda", "1"}, {"b", "0"}};
    const auto r = s.handle("GET", "/api/preview", q, "");
    REQUIRE(r.status == 200);
    CHECK(r.content_type == "image/png");
    CHECK(r.body.substr(1, 3) == "PNG");
    auto q2 = q;
    q2["side_by_side"] = "1";
    CHECK(s.handle("GET", "/api/preview", q2, "").body.size() > r.body.size());
    CHECK(s.handle("GET", "/api/raw", {{"tile", fx.tile}, {"channel", "AF"}}, "").status == 200);
    CHECK(s.handle("GET", "/api/tile/" + fx.tile + "/he", {}, "").content_type == "image/png");
  }
  SUBCASE("validation") {
    auto get = [&](Query q) { return s.handle("GET", "/api/preview", q, "").status; };
    CHECK(get({{"tile", fx.tile}, {"channel", "CD3"}, {"lambda", "-0.1"}, {"b", "0"}}) == 422);
    CHECK(get({{"tile", fx.tile}, {"channel", "CD3"}, {"lambda", "5.01"}, {"b", "0"}}) == 422);
    CHECK(get({{"tile", fx.tile}, {"channel", "CD3"}, {"lambda", "1"}, {"b", "51"}}) == 422);
    CHECK(get({{"tile", fx.tile}, {"channel", "CD3"}, {"lambda", "nan"}, {"b", "0"}}) == 422);
    CHECK(get({{"tile", fx.tile}, {"channel", "CD3"}, {"b", "0"}}) == 422);
    CHECK(get({{"tile", "nope"}, {"channel", "CD3"}, {"lambda", "1"}, {"b", "0"}}) == 404);
    CHECK(get({{"tile", fx.tile}, {"channel", "CD99"}, {"lambda", "1"}, {"b", "0"}}) == 404);
    CHECK(get({{"tile", fx.tile}, {"channel", "CD3"}, {"lambda", "5"}, {"b", "-50"}}) == 200);
    CHECK(s.handle("GET", "/api/nothing", {}, "").status == 404);
  }
  SUBCASE("saving parameters") {
    auto post = [&](const json& j) { return s.handle("POST", "/api/params", {}, j.dump()); };
    auto r = post({{"channel", "CD3"}, {"lambda", 0.25}, {"b", -2}});
    REQUIRE(r.status == 200);
    auto panel = io::load_panel(fx.opt.panel);
    CHECK(panel.af_params("CD3").lambda == 0.25);
    CHECK(panel.af_params("CD3").b == -2);
    CHECK(textio::read_file(fs::path(fx.opt.panel.string() + ".audit.log")).find("CD3") != std::string::npos);

    CHECK(post({{"channel", "CD3"}, {"lambda", 1}, {"b", 0}, {"expected", {{"lambda", 9}, {"b", 0}}}}).status == 409);
    CHECK(post({{"channel", "CD3"}, {"lambda", 1}, {"b", 0}, {"expected", {{"lambda", 0.25}, {"b", -2}}}}).status ==
          200);
    CHECK(post({{"channel", "AF"}, {"lambda", 1}, {"b", 0}}).status == 422);
    CHECK(post({{"channel", "CD3"}, {"lambda", 6}, {"b", 0}}).status == 422);
    CHECK(post({{"channel", "CD3"}}).status == 422);
    CHECK(s.handle("POST", "/api/params", {}, "{not json").status == 400);
    // other channels untouched
    CHECK(io::load_panel(fx.opt.panel).af_params("CD45").lambda == panel.af_params("CD45").lambda);
  }
  SUBCASE("display window") {
    ChannelImage img(10, 10);
    for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<double>(i);
    CHECK(s.display_window(img) == doctest::Approx(98.505));
    CHECK(s.display_window(ChannelImage(4, 4)) == 1.0);
    const auto u8 = Service::window_to_u8(img, 50);
    CHECK(u8[0] == 0);
    CHECK(u8[50] == 255);
    CHECK(u8[99] == 255);
  }
}

TEST_CASE("HTTP round trip") {
  Fixture fx("afserve_http");
  Service s(fx.opt);
  REQUIRE(s.load().empty());
  std::thread t([&] { s.listen(); });
  REQUIRE(s.wait_until_listening(5000));
  httplib::Client cli("127.0.0.1", s.bound_port());
  auto res = cli.Get("/api/channels");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body)["tiles"].size() == 2);
  res = cli.Get("/api/preview?tile=" + fx.tile + "&channel=CD3&lambda=0.7&b=0");
  REQUIRE(res);
  CHECK(res->get_header_value("Content-Type") == "image/png");
  res = cli.Post("/api/params", R"({"channel": "PanCK", "lambda": 0.7, "b": 1.5})", "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  res = cli.Get("/api/preview?tile=" + fx.tile + "&channel=CD3&lambda=7&b=0");
  REQUIRE(res);
  CHECK(res->status == 422);
  s.stop();
  t.join();
  CHECK(io::load_panel(fx.opt.panel).af_params("PanCK").b == 1.5);
}
