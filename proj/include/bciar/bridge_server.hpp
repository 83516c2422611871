#pragma once

// HTTP surface for the operator console.
//
//   POST /session   {"experiment":3,"seed":7,"condition":"Neurofeedback","driver":"console"}
//   GET  /state     latest snapshot
//   POST /target    {"target_id":2,"marker_id":12} -> {"accepted":true} | 409 {"accepted":false}
//   GET  /stream    NDJSON snapshots at 20 Hz, chunked
//   POST /stream    NDJSON console commands, {"command":"mi_left"} per line,
//                   with an X-Client-Id header
//
// The vendored HTTP library has no WebSocket support, so the stream is split
// into a long-lived chunked GET and command POSTs.

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

// Eigen must precede httplib: <resolv.h> defines a _res macro that breaks
// Eigen's product kernels.
#include <Eigen/Dense>
#include <httplib.h>
#include <json.hpp>

#include "bciar/bridge.hpp"
#include "bciar/config.hpp"
#include "bciar/session.hpp"

namespace bciar::bridge {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 0;             // 0 picks a free port
  double time_scale = 1.0;  // simulated seconds per wall second
  std::size_t subscriber_capacity = 64;
};

class BridgeServer {
 public:
  BridgeServer(ExperimentConfig base, session::SessionSpec spec, ServerOptions opt = {})
      : base_(std::move(base)), opt_(std::move(opt)) {
    if (!(opt_.time_scale > 0.0)) throw Error(Errc::InvalidConfig, "time scale must be positive");
    session_ = std::make_unique<session::LiveSession>(base_, spec);
    latest_ = to_json(session_->snapshot()).dump();
    routes();
  }

  ~BridgeServer() { stop(); }

  BridgeServer(const BridgeServer&) = delete;
  BridgeServer& operator=(const BridgeServer&) = delete;

  // Binds, then serves and simulates on background threads. Returns the port.
  int start() {
    port_ = opt_.port == 0 ? http_.bind_to_any_port(opt_.host) : (http_.bind_to_port(opt_.host, opt_.port) ? opt_.port : -1);
    if (port_ < 0) throw Error(Errc::Unreachable, "cannot bind " + opt_.host + ":" + std::to_string(opt_.port));
    running_ = true;
    sim_ = std::thread([this] { simulate(); });
    listener_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (!running_.exchange(false)) return;
    http_.stop();
    if (listener_.joinable()) listener_.join();
    if (sim_.joinable()) sim_.join();
  }

  int port() const { return port_; }

  std::string state() const {
    std::lock_guard lk(mu_);
    return latest_;
  }

  std::size_t subscribers() const {
    std::lock_guard lk(sub_mu_);
    return subs_.size();
  }

 private:
  using Buffer = DropOldestBuffer<std::string>;

  void simulate() {
    using clock = std::chrono::steady_clock;
    const auto period = std::chrono::duration_cast<clock::duration>(
        std::chrono::duration<double>(1.0 / (eeg::kSampleRate * opt_.time_scale)));
    auto next = clock::now();
    while (running_) {
      std::optional<std::string> line;
      {
        std::lock_guard lk(mu_);
        if (auto s = session_->tick()) latest_ = *(line = to_json(*s).dump());
      }
      if (line) publish(*line);
      next += period;
      std::this_thread::sleep_until(next);
    }
  }

  void publish(const std::string& line) {
    std::lock_guard lk(sub_mu_);
    for (const auto& b : subs_) b->push(line);
  }

  static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  void routes() {
    http_.Post("/session", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto j = nlohmann::json::parse(req.body);
        session::SessionSpec spec;
        spec.experiment = j.value("experiment", 3);
        spec.seed = j.value("seed", base_.seed);
        spec.condition = ar::condition_from_string(j.value("condition", std::string("Neurofeedback")));
        spec.driver = session::driver_from_string(j.value("driver", std::string("console")));
        if (spec.experiment < 1 || spec.experiment > 3) throw Error(Errc::InvalidArgument, "experiment must be 1-3");
        ExperimentConfig cfg = base_;
        cfg.seed = spec.seed;
        auto fresh = std::make_unique<session::LiveSession>(cfg, spec);
        std::lock_guard lk(mu_);
        session_ = std::move(fresh);
        controller_.clear();
        latest_ = to_json(session_->snapshot()).dump();
        reply(res, 200, {{"experiment", spec.experiment},
                         {"seed", spec.seed},
                         {"condition", ar::to_string(spec.condition)},
                         {"driver", session::to_string(spec.driver)}});
      } catch (const nlohmann::json::exception& e) {
        reply(res, 400, {{"error", e.what()}});
      } catch (const Error& e) {
        reply(res, 400, {{"error", e.what()}});
      }
    });

    http_.Get("/state", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(state(), "application/json");
    });

    http_.Post("/target", [this](const httplib::Request& req, httplib::Response& res) {
      TargetMessage m;
      try {
        const auto j = nlohmann::json::parse(req.body);
        m = {j.at("target_id").get<int>(), j.at("marker_id").get<int>()};
      } catch (const nlohmann::json::exception& e) {
        return reply(res, 400, {{"accepted", false}, {"reason", e.what()}});
      }
      try {
        std::lock_guard lk(mu_);
        switch (session_->submit_target(m)) {
          case session::RobotService::Ack::Accepted: return reply(res, 200, {{"accepted", true}});
          case session::RobotService::Ack::Duplicate: return reply(res, 200, {{"accepted", true}, {"duplicate", true}});
          case session::RobotService::Ack::Busy: return reply(res, 409, {{"accepted", false}, {"reason", "busy"}});
        }
      } catch (const Error& e) {
        return reply(res, 404, {{"accepted", false}, {"reason", e.what()}});
      }
    });

    // The first client id to send commands owns the session's command
    // channel; snapshot readers are unrestricted.
    http_.Post("/stream", [this](const httplib::Request& req, httplib::Response& res) {
      const auto client = req.get_header_value("X-Client-Id");
      if (client.empty()) return reply(res, 400, {{"error", "missing X-Client-Id"}});
      {
        std::lock_guard lk(mu_);
        if (controller_.empty()) controller_ = client;
        if (controller_ != client) return reply(res, 409, {{"error", "session has a command client"}});
      }
      nlohmann::json accepted = nlohmann::json::array();
      std::istringstream in(req.body);
      std::string line;
      try {
        while (std::getline(in, line)) {
          if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
          const auto cmd = nlohmann::json::parse(line).at("command").get<std::string>();
          std::lock_guard lk(mu_);
          accepted.push_back(session_->command(cmd));
        }
      } catch (const nlohmann::json::exception& e) {
        return reply(res, 400, {{"error", e.what()}});
      } catch (const Error& e) {
        return reply(res, 400, {{"error", e.what()}});
      }
      reply(res, 200, {{"accepted", accepted}});
    });

    http_.Get("/stream", [this](const httplib::Request&, httplib::Response& res) {
      auto buf = std::make_shared<Buffer>(opt_.subscriber_capacity);
      {
        std::lock_guard lk(sub_mu_);
        subs_.push_back(buf);
      }
      res.set_chunked_content_provider(
          "application/x-ndjson",
          [this, buf](std::size_t, httplib::DataSink& sink) {
            while (running_) {
              auto lines = buf->drain();
              if (lines.empty()) {
                std::this_thread::sleep_for(std::chrono::milliseconds(5));
                continue;
              }
              for (auto& l : lines) {
                l += '\n';
                if (!sink.write(l.data(), l.size())) return false;
              }
              return true;
            }
            sink.done();
            return true;
          },
          [this, buf](bool) {
            std::lock_guard lk(sub_mu_);
            std::erase(subs_, buf);
          });
    });
  }

  ExperimentConfig base_;
  ServerOptions opt_;
  httplib::Server http_;
  int port_ = -1;
  std::atomic<bool> running_{false};
  std::thread sim_, listener_;

  mutable std::mutex mu_;
  std::unique_ptr<session::LiveSession> session_;
  std::string latest_;
  std::string controller_;

  mutable std::mutex sub_mu_;
  std::vector<std::shared_ptr<Buffer>> subs_;
};

// ---------------------------------------------------------------------------
// Clients

struct ConfirmReply {
  bool accepted = false;
  bool duplicate = false;
};

// Posts a target confirmation. Throws Unreachable when no server answers and
// Rejected when the robot side refuses the target.
inline ConfirmReply http_confirm(const std::string& host, int port, const TargetMessage& m, double timeout_s = 1.0) {
  httplib::Client cli(host, port);
  const auto to = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(timeout_s));
  cli.set_connection_timeout(to);
  cli.set_read_timeout(to);
  const nlohmann::json body{{"target_id", m.target_id}, {"marker_id", m.marker_id}};
  const auto res = cli.Post("/target", body.dump(), "application/json");
  if (!res) throw Error(Errc::Unreachable, host + ":" + std::to_string(port) + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw Error(Errc::Rejected, "target " + std::to_string(m.target_id) + ": " + res->body);
  const auto j = nlohmann::json::parse(res->body);
  return {j.at("accepted").get<bool>(), j.value("duplicate", false)};
}

// Reads `count` snapshots from /stream.
inline std::vector<Snapshot> read_stream(const std::string& host, int port, std::size_t count, double timeout_s = 10.0) {
  httplib::Client cli(host, port);
  const auto to = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::duration<double>(timeout_s));
  cli.set_read_timeout(to);
  std::vector<Snapshot> out;
  std::string pending;
  const auto res = cli.Get("/stream", [&](const char* data, std::size_t n) {
    pending.append(data, n);
    for (auto nl = pending.find('\n'); nl != std::string::npos && out.size() < count; nl = pending.find('\n')) {
      out.push_back(snapshot_from_json(nlohmann::json::parse(pending.substr(0, nl))));
      pending.erase(0, nl + 1);
    }
    return out.size() < count;
  });
  if (out.size() < count) {
    throw Error(Errc::Unreachable, "stream ended after " + std::to_string(out.size()) + " snapshots");
  }
  return out;
}

}  // namespace bciar::bridge
