#include "apmg/service.hpp"

#include <sys/socket.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <json.hpp>

namespace apmg {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Artifacts

namespace {

json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ServiceError(404, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ServiceError(400, p.string() + ": " + e.what());
  }
}

json extents_json(const Extent& e) { return {{"lo", e.lo}, {"hi", e.hi}}; }

}  // namespace

Artifact load_artifact(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::is_regular_file(path)) throw ServiceError(404, "no such artifact: " + path.string());
  Artifact a;
  a.path = path.string();
  json meta;
  try {
    if (path.extension() == ".apmg") {
      Model m = load_model(path);
      meta["kind"] = a.kind = "model";
      meta["dims"] = nullptr;
      meta["value_range"] = {m.vmin, m.vmax};
      meta["model_config"] = json::parse(model_config_json(m.config));
      meta["bricks"] = nullptr;
      a.field = std::make_shared<ModelField>(std::move(m));
    } else if (path.extension() == ".json") {
      const json j = read_json_file(path);
      if (j.contains("bricks")) {
        DecomposedModel dm = DecomposedModel::load(path);
        const DecompositionManifest man = load_manifest(path);
        meta["kind"] = a.kind = "decomposition";
        meta["dims"] = dm.plan().dims;
        meta["value_range"] = {dm.vmin(), dm.vmax()};
        meta["model_config"] = json::parse(model_config_json(man.model_config));
        json b;
        b["grid"] = dm.plan().grid;
        b["ghost"] = dm.plan().ghost;
        b["cores"] = json::array();
        for (const auto& br : dm.plan().bricks) b["cores"].push_back(extents_json(br.core));
        meta["bricks"] = b;
        a.field = std::make_shared<DecomposedField>(std::move(dm));
      } else if (j.contains("dims")) {
        auto raw = path;
        raw.replace_extension(".raw");
        if (!fs::is_regular_file(raw)) throw ServiceError(404, "missing raw data " + raw.string());
        Volume v = load_volume(raw, path);
        meta["kind"] = a.kind = "volume";
        meta["dims"] = v.dims();
        meta["value_range"] = {v.vmin(), v.vmax()};
        meta["bricks"] = nullptr;
        a.field = std::make_shared<VolumeField>(std::move(v));
      } else {
        throw ServiceError(400, "unrecognized artifact " + path.string());
      }
    } else {
      throw ServiceError(400, "unrecognized artifact " + path.string());
    }
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw ServiceError(400, e.what());
  }
  meta["path"] = a.path;
  a.meta_json = meta.dump();
  return a;
}

std::vector<std::pair<std::string, std::string>> list_artifacts(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, std::string>> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(root, fs::directory_options::skip_permission_denied)) {
    if (!entry.is_regular_file()) continue;
    const auto& p = entry.path();
    const std::string rel = fs::relative(p, root).generic_string();
    if (p.extension() == ".apmg") {
      if (!fs::exists(p.parent_path() / "manifest.json")) out.emplace_back(rel, "model");
    } else if (p.filename() == "manifest.json") {
      out.emplace_back(rel, "decomposition");
    } else if (p.extension() == ".json") {
      auto raw = p;
      raw.replace_extension(".raw");
      if (fs::exists(raw)) out.emplace_back(rel, "volume");
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::uint8_t> render_png(const Field& field, const RenderRequest& req, RenderStats* stats) {
  return encode_png(render_frame(field, req.camera, req.tf, req.config, stats));
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(beast::detail::base64::encoded_size(bytes.size()), '\0');
  out.resize(beast::detail::base64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Server

struct Service::Impl {
  ServiceOptions opts;
  net::io_context accept_ctx;
  tcp::acceptor acceptor{accept_ctx};
  unsigned short port = 0;
  std::thread accept_thread;
  std::atomic<bool> stopping{false};

  std::mutex artifact_mu;
  std::shared_ptr<const Artifact> artifact;

  std::mutex stats_mu;
  double last_frame_ms = 0.0;
  double points_per_second = 0.0;
  std::uint64_t frames = 0;

  std::mutex conn_mu;
  std::set<int> open_fds;
  std::vector<std::thread> connections;

  std::shared_ptr<const Artifact> current() {
    std::lock_guard lock(artifact_mu);
    return artifact;
  }

  void record(const RenderStats& s) {
    std::lock_guard lock(stats_mu);
    last_frame_ms = s.seconds * 1e3;
    points_per_second = s.seconds > 0 ? double(s.points) / s.seconds : 0.0;
    ++frames;
  }

  void accept_loop();
  void serve_connection(std::unique_ptr<net::io_context> ctx, tcp::socket sock);
  http::response<http::string_body> handle(const http::request<http::string_body>& req);
  void run_websocket(net::io_context& ctx, websocket::stream<tcp::socket>& ws);
};

namespace {

using Response = http::response<http::string_body>;

Response make_response(unsigned version, http::status status, std::string body, const char* type) {
  Response res{status, version};
  res.set(http::field::server, "apmg");
  res.set(http::field::content_type, type);
  res.set(http::field::access_control_allow_origin, "*");
  res.body() = std::move(body);
  res.prepare_payload();
  return res;
}

Response json_response(unsigned version, http::status status, const json& body) {
  return make_response(version, status, body.dump(), "application/json");
}

Response error_response(unsigned version, int status, const std::string& msg) {
  return json_response(version, static_cast<http::status>(status), json{{"error", msg}});
}

}  // namespace

Response Service::Impl::handle(const http::request<http::string_body>& req) {
  const unsigned v = req.version();
  const std::string target(req.target());
  const bool get = req.method() == http::verb::get;
  const bool post = req.method() == http::verb::post;
  try {
    if (target == "/api/models" && get) {
      json list = json::array();
      for (const auto& [path, kind] : list_artifacts(opts.root)) list.push_back({{"path", path}, {"kind", kind}});
      return json_response(v, http::status::ok, json{{"models", list}});
    }
    if (target == "/api/load" && post) {
      json body;
      try {
        body = json::parse(req.body());
      } catch (const json::exception& e) {
        throw ServiceError(400, std::string("invalid JSON: ") + e.what());
      }
      if (!body.is_object() || !body.contains("path") || !body["path"].is_string())
        throw ServiceError(400, "load requires {\"path\": string}");
      const std::string rel = body["path"].get<std::string>();
      const auto root = std::filesystem::weakly_canonical(opts.root);
      const auto full = std::filesystem::weakly_canonical(opts.root / rel);
      const auto [r_end, _] = std::mismatch(root.begin(), root.end(), full.begin(), full.end());
      if (r_end != root.end()) throw ServiceError(404, "artifact outside the service root");
      auto a = std::make_shared<Artifact>(load_artifact(full));
      a->path = rel;
      json meta = json::parse(a->meta_json);
      meta["path"] = rel;
      a->meta_json = meta.dump();
      {
        std::lock_guard lock(artifact_mu);
        artifact = a;
      }
      return make_response(v, http::status::ok, a->meta_json, "application/json");
    }
    if (target == "/api/meta" && get) {
      const auto a = current();
      if (!a) throw ServiceError(409, "nothing loaded");
      return make_response(v, http::status::ok, a->meta_json, "application/json");
    }
    if (target == "/api/render" && post) {
      const auto a = current();
      if (!a) throw ServiceError(409, "nothing loaded");
      RenderRequest rr;
      try {
        rr = parse_render_request(req.body());
      } catch (const std::exception& e) {
        throw ServiceError(400, e.what());
      }
      RenderStats stats;
      const auto png = render_png(*a->field, rr, &stats);
      record(stats);
      return make_response(v, http::status::ok, std::string(png.begin(), png.end()), "image/png");
    }
    if (target == "/api/stats" && get) {
      std::lock_guard lock(stats_mu);
      return json_response(v, http::status::ok,
                           json{{"last_frame_ms", last_frame_ms}, {"points_per_second", points_per_second},
                                {"frames", frames}});
    }
    const bool known = target == "/api/models" || target == "/api/load" || target == "/api/meta" ||
                       target == "/api/render" || target == "/api/stats" || target == "/api/progressive";
    if (known) return error_response(v, 405, "method not allowed");
    return error_response(v, 404, "unknown endpoint " + target);
  } catch (const ServiceError& e) {
    return error_response(v, e.status(), e.what());
  } catch (const std::exception& e) {
    return error_response(v, 500, e.what());
  }
}

namespace {

// One progressive session: the connection thread runs `ctx` (reads and
// writes), a worker thread renders and posts finished passes back to it.
class ProgressiveSession : public std::enable_shared_from_this<ProgressiveSession> {
 public:
  ProgressiveSession(net::io_context& ctx, websocket::stream<tcp::socket>& ws,
                     std::function<std::shared_ptr<const Artifact>()> artifact,
                     std::function<void(const RenderStats&)> record)
      : ctx_(ctx), ws_(ws), artifact_(std::move(artifact)), record_(std::move(record)) {}

  void start() {
    ws_.text(true);
    worker_ = std::thread([self = shared_from_this()] { self->work(); });
    read();
  }

  void finish() {
    {
      std::lock_guard lock(mu_);
      closing_ = true;
      if (cancel_) *cancel_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

 private:
  void read() {
    ws_.async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
  }

  void on_read(beast::error_code ec) {
    if (ec) return;  // closed; the connection thread finishes the session
    const std::string text = beast::buffers_to_string(buf_.data());
    buf_.consume(buf_.size());
    try {
      RenderRequest req = parse_render_request(text);
      std::optional<RenderRequest> dropped;
      {
        std::lock_guard lock(mu_);
        if (cancel_) *cancel_ = true;
        if (pending_) dropped = std::move(pending_);
        pending_ = std::move(req);
      }
      cv_.notify_all();
      if (dropped)
        send(json{{"request_id", dropped->request_id}, {"cancelled", true}, {"passes_done", 0}}.dump());
    } catch (const std::exception& e) {
      std::string id;
      try {
        const json j = json::parse(text);
        if (j.is_object() && j.contains("request_id"))
          id = j["request_id"].is_string() ? j["request_id"].get<std::string>() : j["request_id"].dump();
      } catch (const json::exception&) {
      }
      send(json{{"request_id", id}, {"error", e.what()}, {"status", 400}}.dump());
    }
    read();
  }

  void send(std::string msg) {
    queue_.push_back(std::move(msg));
    if (queue_.size() == 1) write();
  }

  void write() {
    ws_.async_write(net::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      self->queue_.pop_front();
      if (!self->queue_.empty()) self->write();
    });
  }

  void post(std::string msg) {
    net::post(ctx_, [self = shared_from_this(), m = std::move(msg)]() mutable { self->send(std::move(m)); });
  }

  void work() {
    for (;;) {
      RenderRequest req;
      std::shared_ptr<std::atomic<bool>> cancel;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return closing_ || pending_; });
        if (closing_) return;
        req = std::move(*pending_);
        pending_.reset();
        cancel_ = cancel = std::make_shared<std::atomic<bool>>(false);
      }
      const auto a = artifact_();
      if (!a) {
        post(json{{"request_id", req.request_id}, {"error", "nothing loaded"}, {"status", 409}}.dump());
        continue;
      }
      const auto passes = progressive_schedule(req.camera.width, req.camera.height);
      try {
        ProgressiveResult res = render_progressive(
            *a->field, req.camera, req.tf, req.config,
            [&](int index, const ProgressivePass& pass, const Image& preview) {
              json m;
              m["request_id"] = req.request_id;
              m["pass_index"] = index;
              m["level"] = pass.level;
              m["passes"] = passes.size();
              m["final"] = index + 1 == static_cast<int>(passes.size());
              m["png"] = base64_encode(encode_png(preview));
              post(m.dump());
              return !cancel->load();
            });
        if (res.cancelled)
          post(json{{"request_id", req.request_id}, {"cancelled", true}, {"passes_done", res.passes_done}}.dump());
        else
          record_(res.stats);
      } catch (const std::exception& e) {
        post(json{{"request_id", req.request_id}, {"error", e.what()}, {"status", 400}}.dump());
      }
    }
  }

  net::io_context& ctx_;
  websocket::stream<tcp::socket>& ws_;
  std::function<std::shared_ptr<const Artifact>()> artifact_;
  std::function<void(const RenderStats&)> record_;
  beast::flat_buffer buf_;
  std::deque<std::string> queue_;  // touched only on the connection thread

  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<RenderRequest> pending_;
  std::shared_ptr<std::atomic<bool>> cancel_;
  bool closing_ = false;
  std::thread worker_;
};

}  // namespace

void Service::Impl::run_websocket(net::io_context& ctx, websocket::stream<tcp::socket>& ws) {
  auto session = std::make_shared<ProgressiveSession>(
      ctx, ws, [this] { return current(); }, [this](const RenderStats& s) { record(s); });
  session->start();
  ctx.run();
  session->finish();
}

void Service::Impl::serve_connection(std::unique_ptr<net::io_context> ctx, tcp::socket sock) {
  const int fd = sock.native_handle();
  try {
    beast::flat_buffer buf;
    for (;;) {
      http::request<http::string_body> req;
      beast::error_code ec;
      http::read(sock, buf, req, ec);
      if (ec) break;
      if (websocket::is_upgrade(req)) {
        if (req.target() != "/api/progressive") {
          http::write(sock, error_response(req.version(), 404, "unknown websocket endpoint"), ec);
          break;
        }
        websocket::stream<tcp::socket> ws(std::move(sock));
        ws.accept(req);
        run_websocket(*ctx, ws);
        break;
      }
      Response res = handle(req);
      res.keep_alive(req.keep_alive());
      http::write(sock, res, ec);
      if (ec || !req.keep_alive()) break;
    }
  } catch (const std::exception& e) {
    if (!stopping) std::cerr << "connection error: " << e.what() << '\n';
  }
  std::lock_guard lock(conn_mu);
  open_fds.erase(fd);
}

void Service::Impl::accept_loop() {
  while (!stopping) {
    auto ctx = std::make_unique<net::io_context>();
    tcp::socket sock(*ctx);
    beast::error_code ec;
    acceptor.accept(sock, ec);
    if (stopping) break;
    if (ec) continue;
    std::lock_guard lock(conn_mu);
    open_fds.insert(sock.native_handle());
    connections.emplace_back([this, c = std::move(ctx), s = std::move(sock)]() mutable {
      serve_connection(std::move(c), std::move(s));
    });
  }
}

Service::Service(ServiceOptions opts) : impl_(std::make_unique<Impl>()) { impl_->opts = std::move(opts); }

Service::~Service() { stop(); }

unsigned short Service::start() {
  auto& I = *impl_;
  const tcp::endpoint ep(net::ip::make_address(I.opts.address), I.opts.port);
  I.acceptor.open(ep.protocol());
  I.acceptor.set_option(net::socket_base::reuse_address(true));
  I.acceptor.bind(ep);
  I.acceptor.listen();
  I.port = I.acceptor.local_endpoint().port();
  I.accept_thread = std::thread([&I] { I.accept_loop(); });
  return I.port;
}

void Service::stop() {
  auto& I = *impl_;
  if (!I.accept_thread.joinable() || I.stopping.exchange(true)) return;
  {
    // Wake the blocking accept.
    net::io_context tmp;
    tcp::socket poke(tmp);
    beast::error_code ec;
    poke.connect(tcp::endpoint(net::ip::make_address(I.opts.address == "0.0.0.0" ? "127.0.0.1" : I.opts.address),
                               I.port),
                 ec);
  }
  I.accept_thread.join();
  beast::error_code ec;
  I.acceptor.close(ec);
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(I.conn_mu);
    for (int fd : I.open_fds) ::shutdown(fd, SHUT_RDWR);
    threads = std::move(I.connections);
  }
  for (auto& t : threads) t.join();
}

void Service::load(const std::string& relative_path) {
  auto a = std::make_shared<Artifact>(load_artifact(impl_->opts.root / relative_path));
  std::lock_guard lock(impl_->artifact_mu);
  impl_->artifact = std::move(a);
}

void Service::set_artifact(Artifact artifact) {
  auto a = std::make_shared<Artifact>(std::move(artifact));
  std::lock_guard lock(impl_->artifact_mu);
  impl_->artifact = std::move(a);
}

}  // namespace apmg
