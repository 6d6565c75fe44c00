#include <doctest.h>
#include <httplib.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <json.hpp>
#include <thread>

#include "apmg/decomposition.hpp"
#include "apmg/service.hpp"
#include "helpers.hpp"
#include "render_checks.hpp"

using namespace apmg;
using json = nlohmann::json;

namespace {

namespace beast = boost::beast;
namespace net = boost::asio;

// Sleeps on every batch so progressive passes take measurable time.
class SlowField : public Field {
 public:
  explicit SlowField(std::chrono::microseconds delay) : delay_(delay) {}
  void evaluate(std::span<const Vec3d> pts, std::span<float> out) const override {
    std::this_thread::sleep_for(delay_);
    for (std::size_t i = 0; i < pts.size(); ++i) out[i] = float(0.5 + 0.5 * pts[i][0]);
  }
  float vmin() const override { return 0.f; }
  float vmax() const override { return 1.f; }

 private:
  std::chrono::microseconds delay_;
};

struct Fixture {
  testing::TempDir dir{"svc"};
  Volume volume = testing::textured_volume({10, 9, 8});

  Fixture() {
    save_volume(dir / "vol.raw", dir / "vol.json", volume);
    ModelConfig mc;
    mc.grids = 2;
    mc.resolution = {4, 4, 4};
    Model m = init_model(mc);
    fit_range(m, volume);
    std::filesystem::create_directories(dir.path / "models");
    save_model(dir / "models/single.apmg", m);
    TrainConfig tc;
    tc.iterations = 30;
    tc.batch_size = 64;
    train_decomposed(volume, plan_partition(volume.dims(), 2, 1, 1, 1), mc, tc, 1, dir / "dec");
    std::ofstream(dir / "broken.apmg") << "not a model";
  }
};

std::string request_json(int w, int h, const std::string& id = "r", int samples = 16) {
  json j;
  j["camera"] = json::parse(camera_to_json(testing::oblique_camera(w, h)));
  j["samples_per_ray"] = samples;
  j["request_id"] = id;
  return j.dump();
}

std::vector<std::uint8_t> b64_decode(const std::string& s) {
  std::vector<std::uint8_t> out(beast::detail::base64::decoded_size(s.size()));
  out.resize(beast::detail::base64::decode(out.data(), s.data(), s.size()).first);
  return out;
}

class WsClient {
 public:
  explicit WsClient(unsigned short port) : ws_(ctx_) {
    net::ip::tcp::resolver res(ctx_);
    net::connect(ws_.next_layer(), res.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/api/progressive");
  }
  void send(const std::string& text) { ws_.write(net::buffer(text)); }
  json receive() {
    beast::flat_buffer buf;
    ws_.read(buf);
    return json::parse(beast::buffers_to_string(buf.data()));
  }
  void close() { ws_.close(beast::websocket::close_code::normal); }

 private:
  net::io_context ctx_;
  beast::websocket::stream<net::ip::tcp::socket> ws_;
};

}  // namespace

TEST_SUITE("service") {

TEST_CASE("artifact discovery and loading") {
  Fixture fx;
  const auto list = list_artifacts(fx.dir.path);
  using P = std::pair<std::string, std::string>;
  CHECK(list == std::vector<P>{{"broken.apmg", "model"},
                               {"dec/manifest.json", "decomposition"},
                               {"models/single.apmg", "model"},
                               {"vol.json", "volume"}});
  const Artifact v = load_artifact(fx.dir / "vol.json");
  CHECK(v.kind == "volume");
  CHECK(json::parse(v.meta_json)["dims"] == json::array({10, 9, 8}));
  const Artifact d = load_artifact(fx.dir / "dec/manifest.json");
  CHECK(d.kind == "decomposition");
  CHECK(json::parse(d.meta_json)["bricks"]["grid"] == json::array({2, 1, 1}));
  CHECK(load_artifact(fx.dir / "models/single.apmg").kind == "model");
  try {
    load_artifact(fx.dir / "missing.apmg");
    FAIL("expected an error");
  } catch (const ServiceError& e) {
    CHECK(e.status() == 404);
  }
  try {
    load_artifact(fx.dir / "broken.apmg");
    FAIL("expected an error");
  } catch (const ServiceError& e) {
    CHECK(e.status() == 400);
  }
}

TEST_CASE("base64") {
  CHECK(base64_encode({}) == "");
  CHECK(base64_encode({'f'}) == "Zg==");
  CHECK(base64_encode({'f', 'o', 'o', 'b'}) == "Zm9vYg==");
}

TEST_CASE("HTTP endpoints") {
  Fixture fx;
  Service svc({fx.dir.path, "127.0.0.1", 0});
  const unsigned short port = svc.start();
  REQUIRE(port != 0);
  httplib::Client cli("127.0.0.1", port);

  auto r = cli.Get("/api/meta");
  REQUIRE(r);
  CHECK(r->status == 409);
  r = cli.Post("/api/render", request_json(8, 8), "application/json");
  REQUIRE(r);
  CHECK(r->status == 409);

  r = cli.Get("/api/models");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(json::parse(r->body)["models"].size() == 4);

  r = cli.Post("/api/load", "{nope", "application/json");
  REQUIRE(r);
  CHECK(r->status == 400);
  r = cli.Post("/api/load", R"({"path":"missing.apmg"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 404);
  r = cli.Post("/api/load", R"({"path":"../../etc/passwd"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 404);
  r = cli.Post("/api/load", R"({"path":"broken.apmg"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 400);

  r = cli.Post("/api/load", R"({"path":"dec/manifest.json"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  const json meta = json::parse(r->body);
  CHECK(meta["kind"] == "decomposition");
  CHECK(meta["path"] == "dec/manifest.json");
  r = cli.Get("/api/meta");
  REQUIRE(r);
  CHECK(json::parse(r->body) == meta);

  const std::string req = request_json(12, 10);
  r = cli.Post("/api/render", req, "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->get_header_value("Content-Type") == "image/png");
  const auto expect = render_png(*load_artifact(fx.dir / "dec/manifest.json").field, parse_render_request(req));
  CHECK(r->body == std::string(expect.begin(), expect.end()));

  r = cli.Post("/api/render", R"({"camera":{"eye":[0,0,0],"look_at":[0,0,0]}})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 400);

  r = cli.Get("/api/stats");
  REQUIRE(r);
  const json stats = json::parse(r->body);
  CHECK(stats["frames"] == 1);
  CHECK(stats["last_frame_ms"].get<double>() >= 0.0);
  CHECK(stats["points_per_second"].get<double>() > 0.0);

  r = cli.Get("/api/render");
  REQUIRE(r);
  CHECK(r->status == 405);
  r = cli.Get("/api/elsewhere");
  REQUIRE(r);
  CHECK(r->status == 404);
  svc.stop();
}

TEST_CASE("progressive WebSocket stream matches a direct render") {
  Fixture fx;
  Service svc({fx.dir.path, "127.0.0.1", 0});
  const unsigned short port = svc.start();
  svc.load("vol.json");
  WsClient ws(port);
  const std::string req = request_json(9, 7, "first");
  ws.send(req);
  std::vector<json> msgs;
  for (;;) {
    msgs.push_back(ws.receive());
    if (msgs.back().value("final", false)) break;
  }
  REQUIRE(msgs.size() == 5);  // ceil(log2 9) + 1 levels
  for (std::size_t k = 0; k < msgs.size(); ++k) {
    CHECK(msgs[k]["request_id"] == "first");
    CHECK(msgs[k]["pass_index"] == k);
    CHECK(msgs[k]["level"] == k);
    CHECK(msgs[k]["passes"] == 5);
  }
  const auto direct = render_png(VolumeField(fx.volume), parse_render_request(req));
  CHECK(b64_decode(msgs.back()["png"]) == direct);

  ws.send("{broken");
  const json err = ws.receive();
  CHECK(err["status"] == 400);
  ws.send(R"({"request_id":"bad","camera":{"eye":[1,1,1],"look_at":[1,1,1]}})");
  const json err2 = ws.receive();
  CHECK(err2["request_id"] == "bad");
  CHECK(err2["status"] == 400);
  ws.close();
  svc.stop();
}

TEST_CASE("a new progressive request cancels the one in flight") {
  Fixture fx;
  Service svc({fx.dir.path, "127.0.0.1", 0});
  const unsigned short port = svc.start();
  Artifact slow;
  slow.kind = "model";
  slow.field = std::make_shared<SlowField>(std::chrono::microseconds(1500));
  slow.meta_json = "{}";
  svc.set_artifact(slow);

  WsClient ws(port);
  json a = json::parse(request_json(32, 32, "a", 4));
  a["batch_size"] = 4;  // one ray per evaluation, so late passes are slow
  ws.send(a.dump());
  const json first = ws.receive();
  CHECK(first["request_id"] == "a");
  CHECK(first["pass_index"] == 0);

  json b = a;
  b["request_id"] = "b";
  b["camera"]["width"] = b["camera"]["height"] = 4;
  ws.send(b.dump());

  int a_passes = 1;
  bool a_cancelled = false, b_final = false;
  int b_passes = 0;
  while (!b_final) {
    const json m = ws.receive();
    if (m["request_id"] == "a") {
      CHECK_FALSE(a_cancelled);  // nothing for a after its marker
      if (m.value("cancelled", false)) {
        a_cancelled = true;
        CHECK(m["passes_done"] == a_passes);
      } else {
        ++a_passes;
        CHECK_FALSE(m["final"].get<bool>());
      }
    } else {
      CHECK(a_cancelled);  // b starts only after a is wound down
      CHECK(m["request_id"] == "b");
      ++b_passes;
      b_final = m["final"].get<bool>();
    }
  }
  CHECK(a_cancelled);
  CHECK(a_passes < 6);
  CHECK(b_passes == 3);
  ws.close();
  svc.stop();
}

TEST_CASE("stop closes open connections") {
  Fixture fx;
  Service svc({fx.dir.path, "127.0.0.1", 0});
  const unsigned short port = svc.start();
  WsClient ws(port);
  httplib::Client cli("127.0.0.1", port);
  cli.set_keep_alive(true);
  REQUIRE(cli.Get("/api/stats"));
  const auto t0 = std::chrono::steady_clock::now();
  svc.stop();
  CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(5));
  CHECK_THROWS(ws.receive());
}

}
