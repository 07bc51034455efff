#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "lmprobe/gateway.hpp"

namespace lmprobe {

/// Serves any Backend (typically a MockBackend fixture) over the HTTP
/// protocol, so record/replay and client code can be exercised against a
/// real transport. Used by the `serve` subcommand and the test suite.
class FixtureServer {
public:
  explicit FixtureServer(std::shared_ptr<Backend> backend)
      : backend_(std::move(backend)) {
    server_.Post("/v1/fillmask", [this](const httplib::Request& req,
                                        httplib::Response& res) {
      handle(req, res, [&](const json& body) {
        return backend_->fill_mask_raw(body.at("text").get<std::string>(),
                                       body.at("top_k").get<int>());
      });
    });
    server_.Post("/v1/generate", [this](const httplib::Request& req,
                                        httplib::Response& res) {
      handle(req, res, [&](const json& body) {
        GenerateRequest gen;
        gen.prompt = body.at("prompt").get<std::string>();
        gen.mode = body.at("mode").get<std::string>() == "greedy"
                       ? DecodeMode::kGreedy
                       : DecodeMode::kMultinomial;
        gen.num_samples = body.at("n").get<int>();
        gen.max_new_tokens = body.at("max_new_tokens").get<int>();
        gen.seed = body.at("seed").get<std::uint64_t>();
        gen.stop = body.at("stop").get<std::vector<std::string>>();
        return backend_->generate_raw(gen);
      });
    });
  }

  ~FixtureServer() { stop(); }

  /// Binds to an ephemeral localhost port and serves from a background
  /// thread. Returns the bound port.
  int start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) {
      throw Error("fixture server failed to bind a port");
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on a fixed port, blocking the calling thread.
  void serve_blocking(const std::string& host, int port) {
    if (!server_.listen(host, port)) {
      throw Error("fixture server failed to listen on " + host + ":" +
                  std::to_string(port));
    }
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  std::string endpoint() const {
    return "http://127.0.0.1:" + std::to_string(port_);
  }

private:
  template <typename Fn>
  void handle(const httplib::Request& req, httplib::Response& res, Fn&& fn) {
    try {
      const json body = json::parse(req.body);
      res.set_content(fn(body).dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  }

  std::shared_ptr<Backend> backend_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace lmprobe
