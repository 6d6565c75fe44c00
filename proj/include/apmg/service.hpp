#pragma once

// HTTP + WebSocket service exposing a loaded field to interactive viewers.
//
//   GET  /api/models        loadable artifacts under the service root
//   POST /api/load          {"path": "..."} relative to the root
//   GET  /api/meta          dims, value range, brick layout
//   POST /api/render        RenderRequest JSON -> image/png
//   WS   /api/progressive   RenderRequest JSON text frames in; one JSON text
//                           frame per completed pass out
//   GET  /api/stats         last frame time and query throughput

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "apmg/render.hpp"

namespace apmg {

class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct Artifact {
  std::string path;
  std::string kind;  // "model", "decomposition" or "volume"
  std::shared_ptr<const Field> field;
  std::string meta_json;
};

/// Loads a model (.apmg), a decomposition manifest, or a raw volume given by
/// its header JSON (the .raw file sits next to it with the same stem).
Artifact load_artifact(const std::filesystem::path& path);

/// Artifacts found below `root`, as paths relative to it.
std::vector<std::pair<std::string, std::string>> list_artifacts(const std::filesystem::path& root);

/// Direct render of a request, PNG-encoded. Shared by the CLI and the service.
std::vector<std::uint8_t> render_png(const Field& field, const RenderRequest& req, RenderStats* stats = nullptr);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

struct ServiceOptions {
  std::filesystem::path root = ".";
  std::string address = "127.0.0.1";
  unsigned short port = 8080;  // 0 picks a free port
};

class Service {
 public:
  explicit Service(ServiceOptions opts);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and starts accepting in the background; returns the bound port.
  unsigned short start();
  /// Closes the listener and all connections, then joins their threads.
  void stop();

  void load(const std::string& relative_path);
  void set_artifact(Artifact artifact);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace apmg
