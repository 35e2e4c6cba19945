#pragma once

#include "palpation/service.hpp"

#include <memory>
#include <string>

namespace palpation {

/// JSON-over-HTTP front end for a SessionManager, with a server-sent-events
/// stream per session.
///
///   POST /sessions                        create, body = create request
///   GET  /sessions                        list ids
///   POST /sessions/import                 import + replay an export bundle
///   POST /sessions/{id}/register          register, body = cloud request
///   PUT  /sessions/{id}/roi               set ROI, body = ROI
///   POST /sessions/{id}/run               {"mode": "step"|"continuous", "budget": n}
///   POST /sessions/{id}/pause, /stop
///   GET  /sessions/{id}/state?what=grid|heatmap|blended|probes|registration|status[&opacity=]
///   GET  /sessions/{id}/heatmap.png, heatmap.rgba, blended.png, blended.rgba [?opacity=]
///   GET  /sessions/{id}/export
///   GET  /sessions/{id}/events[?since=seq&limit=n]   text/event-stream
class ApiServer {
 public:
  explicit ApiServer(SessionManager& manager);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds to host:port (port 0 picks a free port) and returns the port.
  int bind(const std::string& host, int port);
  /// Serves on a background thread after bind().
  void start();
  /// Serves on the calling thread after bind() until stop().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace palpation
