#include "palpation/http_api.hpp"

#include <httplib.h>

#include <thread>

namespace palpation {

using nlohmann::json;

struct ApiServer::Impl {
  SessionManager& manager;
  httplib::Server server;
  std::thread thread;

  explicit Impl(SessionManager& m) : manager(m) { routes(); }

  static void send_json(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static json body_of(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::exception& e) {
      throw Error(std::string("malformed JSON body: ") + e.what());
    }
  }

  static std::optional<double> opacity_of(const httplib::Request& req) {
    if (!req.has_param("opacity")) return std::nullopt;
    try {
      return std::stod(req.get_param_value("opacity"));
    } catch (const std::exception&) {
      throw Error("opacity must be a number");
    }
  }

  // Wraps a handler with the error-to-status mapping.
  template <class F>
  static httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const NotFound& e) {
        send_json(res, {{"error", e.what()}}, 404);
      } catch (const Conflict& e) {
        send_json(res, {{"error", e.what()}}, 409);
      } catch (const RegistrationFailed& e) {
        send_json(res, {{"error", e.what()}, {"diagnostics", e.diagnostics}}, 422);
      } catch (const Error& e) {
        send_json(res, {{"error", e.what()}}, 400);
      } catch (const json::exception& e) {
        send_json(res, {{"error", e.what()}}, 400);
      } catch (const std::exception& e) {
        send_json(res, {{"error", e.what()}}, 500);
      }
    };
  }

  void send_texture(httplib::Response& res, const Texture& tex, int step, bool png) {
    res.set_header("X-Step", std::to_string(step));
    res.set_header("X-Width", std::to_string(tex.width));
    res.set_header("X-Height", std::to_string(tex.height));
    if (png) {
      const auto bytes = encode_png(tex);
      res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/png");
    } else {
      res.set_content(reinterpret_cast<const char*>(tex.rgba.data()), tex.rgba.size(), "application/octet-stream");
    }
  }

  void routes() {
    auto& m = manager;
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });

    server.Post("/sessions", guarded([&m](const auto& req, auto& res) {
      send_json(res, {{"id", m.create(body_of(req))}}, 201);
    }));
    server.Get("/sessions", guarded([&m](const auto&, auto& res) { send_json(res, {{"sessions", m.list()}}); }));
    server.Post("/sessions/import", guarded([&m](const auto& req, auto& res) {
      send_json(res, {{"id", m.import_session(body_of(req))}}, 201);
    }));
    server.Post(R"(/sessions/([^/]+)/register)", guarded([&m](const auto& req, auto& res) {
      send_json(res, to_json(m.register_session(req.matches[1], body_of(req))));
    }));
    server.Put(R"(/sessions/([^/]+)/roi)", guarded([&m](const auto& req, auto& res) {
      send_json(res, m.set_roi(req.matches[1], body_of(req)));
    }));
    server.Post(R"(/sessions/([^/]+)/run)", guarded([&m](const auto& req, auto& res) {
      const json body = body_of(req);
      const std::string mode = body.value("mode", std::string("step"));
      std::optional<int> budget;
      if (body.contains("budget") && !body.at("budget").is_null()) budget = body.at("budget").get<int>();
      if (mode == "step")
        send_json(res, m.run(req.matches[1], RunMode::step, budget));
      else if (mode == "continuous")
        send_json(res, m.run(req.matches[1], RunMode::continuous, budget), 202);
      else
        throw Error("mode must be step or continuous");
    }));
    server.Post(R"(/sessions/([^/]+)/pause)", guarded([&m](const auto& req, auto& res) {
      send_json(res, m.pause(req.matches[1]));
    }));
    server.Post(R"(/sessions/([^/]+)/stop)", guarded([&m](const auto& req, auto& res) {
      send_json(res, m.stop(req.matches[1]));
    }));
    server.Get(R"(/sessions/([^/]+)/state)", guarded([&m](const auto& req, auto& res) {
      const std::string what = req.has_param("what") ? req.get_param_value("what") : "status";
      send_json(res, m.state(req.matches[1], what, opacity_of(req)));
    }));
    server.Get(R"(/sessions/([^/]+)/heatmap\.png)", guarded([&m](const auto& req, auto& res) {
      int step = 0;
      const auto png = m.heatmap_png(req.matches[1], &step);
      res.set_header("X-Step", std::to_string(step));
      res.set_content(reinterpret_cast<const char*>(png->data()), png->size(), "image/png");
    }));
    server.Get(R"(/sessions/([^/]+)/heatmap\.rgba)", guarded([this, &m](const auto& req, auto& res) {
      int step = 0;
      const auto heat = m.heatmap(req.matches[1], &step);
      send_texture(res, heat->image, step, false);
    }));
    server.Get(R"(/sessions/([^/]+)/blended\.(png|rgba))", guarded([this, &m](const auto& req, auto& res) {
      int step = 0;
      const auto tex = m.blended(req.matches[1], opacity_of(req), &step);
      send_texture(res, *tex, step, req.matches[2] == "png");
    }));
    server.Get(R"(/sessions/([^/]+)/export)", guarded([&m](const auto& req, auto& res) {
      send_json(res, m.export_session(req.matches[1]));
    }));
    server.Get(R"(/sessions/([^/]+)/events)", guarded([&m](const auto& req, auto& res) {
      const EventChannel* channel = &m.events(req.matches[1]);
      std::uint64_t since = 0;
      if (req.has_param("since"))
        since = std::stoull(req.get_param_value("since"));
      else if (req.has_header("Last-Event-ID"))
        since = std::stoull(req.get_header_value("Last-Event-ID"));
      const long limit = req.has_param("limit") ? std::stol(req.get_param_value("limit")) : -1;
      struct Cursor {
        std::uint64_t last;
        long sent = 0;
      };
      auto cursor = std::make_shared<Cursor>(Cursor{since});
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider("text/event-stream", [channel, cursor, limit](std::size_t, httplib::DataSink& sink) {
        const auto events = channel->wait(cursor->last, std::chrono::milliseconds(500));
        if (events.empty()) {
          static const std::string keepalive = ": keep-alive\n\n";
          return sink.write(keepalive.data(), keepalive.size());
        }
        for (const auto& e : events) {
          const std::string frame =
              "id: " + std::to_string(e.seq) + "\nevent: " + e.type + "\ndata: " + e.data + "\n\n";
          if (!sink.write(frame.data(), frame.size())) return false;
          cursor->last = e.seq;
          if (limit >= 0 && ++cursor->sent >= limit) {
            sink.done();
            return true;
          }
        }
        return true;
      });
    }));
  }
};

ApiServer::ApiServer(SessionManager& manager) : impl_(std::make_unique<Impl>(manager)) {}

ApiServer::~ApiServer() { stop(); }

int ApiServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw Error("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void ApiServer::start() {
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void ApiServer::serve() { impl_->server.listen_after_bind(); }

void ApiServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace palpation
