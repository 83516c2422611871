#pragma once

// Wire layer between the AR side and the robot side: OSC target frames,
// snapshot records for the console stream, a drop-oldest buffer, an
// injectable-latency link model and a loopback UDP transport.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <deque>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bciar/error.hpp"
#include "bciar/rng.hpp"

namespace bciar::bridge {

using Bytes = std::vector<std::uint8_t>;

struct TargetMessage {
  std::int32_t target_id = 0;
  std::int32_t marker_id = 0;
  bool operator==(const TargetMessage&) const = default;
};

inline constexpr std::string_view kOscAddress = "/bci/target";

namespace detail {

inline void put_padded(Bytes& out, std::string_view s) {
  out.insert(out.end(), s.begin(), s.end());
  out.push_back(0);
  while (out.size() % 4) out.push_back(0);
}

inline void put_i32(Bytes& out, std::int32_t v) {
  const auto u = static_cast<std::uint32_t>(v);
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(u >> shift));
}

// Reads a null-terminated, 4-aligned OSC string starting at `pos`.
inline std::string get_padded(std::span<const std::uint8_t> in, std::size_t& pos) {
  std::size_t end = pos;
  while (end < in.size() && in[end] != 0) ++end;
  if (end >= in.size()) throw Error(Errc::MalformedFrame, "unterminated OSC string");
  std::string s(reinterpret_cast<const char*>(in.data() + pos), end - pos);
  std::size_t next = end + 1;
  while (next % 4) {
    if (next >= in.size() || in[next] != 0) throw Error(Errc::MalformedFrame, "bad OSC string padding");
    ++next;
  }
  pos = next;
  return s;
}

inline std::int32_t get_i32(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw Error(Errc::MalformedFrame, "truncated OSC argument");
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u = (u << 8) | in[pos + static_cast<std::size_t>(i)];
  pos += 4;
  return static_cast<std::int32_t>(u);
}

}  // namespace detail

inline Bytes encode_osc_target(const TargetMessage& m) {
  if (m.target_id < 0 || m.marker_id < 0) throw Error(Errc::InvalidArgument, "target ids must be non-negative");
  Bytes out;
  detail::put_padded(out, kOscAddress);
  detail::put_padded(out, ",ii");
  detail::put_i32(out, m.target_id);
  detail::put_i32(out, m.marker_id);
  return out;
}

inline TargetMessage decode_osc_target(std::span<const std::uint8_t> in) {
  if (in.size() % 4) throw Error(Errc::MalformedFrame, "OSC frame length not a multiple of 4");
  std::size_t pos = 0;
  if (detail::get_padded(in, pos) != kOscAddress) throw Error(Errc::MalformedFrame, "unexpected OSC address");
  if (detail::get_padded(in, pos) != ",ii") throw Error(Errc::MalformedFrame, "unexpected OSC type tag");
  TargetMessage m;
  m.target_id = detail::get_i32(in, pos);
  m.marker_id = detail::get_i32(in, pos);
  if (pos != in.size()) throw Error(Errc::MalformedFrame, "trailing bytes after OSC arguments");
  if (m.target_id < 0 || m.marker_id < 0) throw Error(Errc::MalformedFrame, "negative target id");
  return m;
}

// ---------------------------------------------------------------------------
// Snapshots

struct Snapshot {
  std::uint64_t tick = 0;
  double t = 0.0;
  double s_t = 0.0;
  std::string command = "none";
  int cursor = 0;
  double sway_x = 0.0;
  std::string condition;
  std::string phase;
  std::array<double, 6> joints{};
  std::string gripper = "Open";
  std::optional<int> confirmed_target;
  std::string robot_phase = "idle";
  double lift_progress = 0.0;  // 0..1 of the confirm dwell
  struct Metrics {
    double itr = 0.0;
    double sci = 0.0;
    double latency_s = 0.0;
    double fpr = 0.0;
    int selections = 0;
  } metrics;
};

inline nlohmann::json to_json(const Snapshot& s) {
  nlohmann::json j;
  j["tick"] = s.tick;
  j["t"] = s.t;
  j["s_t"] = s.s_t;
  j["command"] = s.command;
  j["cursor"] = s.cursor;
  j["sway_x"] = s.sway_x;
  j["condition"] = s.condition;
  j["phase"] = s.phase;
  j["joints"] = s.joints;
  j["gripper"] = s.gripper;
  j["confirmed_target"] = s.confirmed_target ? nlohmann::json(*s.confirmed_target) : nlohmann::json(nullptr);
  j["robot_phase"] = s.robot_phase;
  j["lift_progress"] = s.lift_progress;
  j["metrics"] = {{"itr", s.metrics.itr},
                  {"sci", s.metrics.sci},
                  {"latency_s", s.metrics.latency_s},
                  {"fpr", s.metrics.fpr},
                  {"selections", s.metrics.selections}};
  return j;
}

inline Snapshot snapshot_from_json(const nlohmann::json& j) {
  try {
    Snapshot s;
    s.tick = j.at("tick").get<std::uint64_t>();
    s.t = j.at("t").get<double>();
    s.s_t = j.at("s_t").get<double>();
    s.command = j.at("command").get<std::string>();
    s.cursor = j.at("cursor").get<int>();
    s.sway_x = j.at("sway_x").get<double>();
    s.condition = j.at("condition").get<std::string>();
    s.phase = j.at("phase").get<std::string>();
    s.joints = j.at("joints").get<std::array<double, 6>>();
    s.gripper = j.at("gripper").get<std::string>();
    if (!j.at("confirmed_target").is_null()) s.confirmed_target = j.at("confirmed_target").get<int>();
    s.robot_phase = j.at("robot_phase").get<std::string>();
    s.lift_progress = j.at("lift_progress").get<double>();
    const auto& m = j.at("metrics");
    s.metrics = {m.at("itr").get<double>(), m.at("sci").get<double>(), m.at("latency_s").get<double>(),
                 m.at("fpr").get<double>(), m.at("selections").get<int>()};
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("snapshot: ") + e.what());
  }
}

// Bounded FIFO that never blocks the producer: beyond capacity the oldest
// element is discarded.
template <typename T>
class DropOldestBuffer {
 public:
  explicit DropOldestBuffer(std::size_t capacity = 64) : capacity_(capacity) {
    if (capacity_ == 0) throw Error(Errc::InvalidArgument, "buffer capacity must be positive");
  }

  void push(T v) {
    std::lock_guard lk(mu_);
    if (q_.size() == capacity_) {
      q_.pop_front();
      ++dropped_;
    }
    q_.push_back(std::move(v));
  }

  std::optional<T> pop() {
    std::lock_guard lk(mu_);
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

  std::vector<T> drain() {
    std::lock_guard lk(mu_);
    std::vector<T> out(std::make_move_iterator(q_.begin()), std::make_move_iterator(q_.end()));
    q_.clear();
    return out;
  }

  std::size_t size() const {
    std::lock_guard lk(mu_);
    return q_.size();
  }
  std::size_t dropped() const {
    std::lock_guard lk(mu_);
    return dropped_;
  }
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::deque<T> q_;
  std::size_t dropped_ = 0;
};

// ---------------------------------------------------------------------------
// Link model

struct LinkConfig {
  double latency_s = 0.0;
  double jitter_s = 0.0;  // uniform extra delay in [0, jitter)
  double loss = 0.0;      // independent drop probability
};

// Simulated-time transport. Delivery keeps send order: a message never
// overtakes an earlier one even when its jitter draw is smaller.
template <typename T>
class SimulatedLink {
 public:
  SimulatedLink(LinkConfig cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    if (cfg_.latency_s < 0 || cfg_.jitter_s < 0 || cfg_.loss < 0 || cfg_.loss > 1) {
      throw Error(Errc::InvalidConfig, "link latency/jitter must be >= 0 and loss in [0,1]");
    }
  }

  void send(double t, T msg) {
    const bool lost = cfg_.loss > 0.0 && rng_.bernoulli(cfg_.loss);
    const double extra = cfg_.jitter_s > 0.0 ? rng_.uniform(0.0, cfg_.jitter_s) : 0.0;
    if (lost) {
      ++lost_;
      return;
    }
    last_due_ = std::max(last_due_, t + cfg_.latency_s + extra);
    q_.push_back({last_due_, std::move(msg)});
  }

  // Everything due at or before t, in send order.
  std::vector<std::pair<double, T>> poll(double t) {
    std::vector<std::pair<double, T>> out;
    while (!q_.empty() && q_.front().first <= t + 1e-12) {
      out.push_back(std::move(q_.front()));
      q_.pop_front();
    }
    return out;
  }

  std::size_t in_flight() const { return q_.size(); }
  std::size_t lost() const { return lost_; }

 private:
  LinkConfig cfg_;
  Rng rng_;
  std::deque<std::pair<double, T>> q_;
  double last_due_ = 0.0;
  std::size_t lost_ = 0;
};

// ---------------------------------------------------------------------------
// UDP datagrams on IPv4.

class UdpSocket {
 public:
  UdpSocket() : fd_(::socket(AF_INET, SOCK_DGRAM, 0)) {
    if (fd_ < 0) throw Error(Errc::Unreachable, "cannot create UDP socket");
  }
  UdpSocket(const UdpSocket&) = delete;
  UdpSocket& operator=(const UdpSocket&) = delete;
  ~UdpSocket() {
    if (fd_ >= 0) ::close(fd_);
  }

  // Binds to 127.0.0.1:port (0 = ephemeral) and returns the bound port.
  int bind_loopback(int port = 0) {
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(static_cast<std::uint16_t>(port));
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0) {
      throw Error(Errc::Unreachable, "cannot bind UDP port " + std::to_string(port));
    }
    socklen_t len = sizeof a;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&a), &len);
    return ntohs(a.sin_port);
  }

  void send_to(const std::string& host, int port, std::span<const std::uint8_t> data) {
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &a.sin_addr) != 1) throw Error(Errc::Unreachable, "bad host " + host);
    const auto n = ::sendto(fd_, data.data(), data.size(), 0, reinterpret_cast<sockaddr*>(&a), sizeof a);
    if (n != static_cast<ssize_t>(data.size())) throw Error(Errc::Unreachable, "UDP send failed");
  }

  std::optional<Bytes> receive(double timeout_s) {
    timeval tv{};
    if (timeout_s < 1e-6) timeout_s = 1e-6;  // zero would block forever
    tv.tv_sec = static_cast<time_t>(timeout_s);
    tv.tv_usec = static_cast<suseconds_t>((timeout_s - static_cast<double>(tv.tv_sec)) * 1e6);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    Bytes buf(2048);
    const auto n = ::recv(fd_, buf.data(), buf.size(), 0);
    if (n < 0) return std::nullopt;
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }

 private:
  int fd_;
};

}  // namespace bciar::bridge
