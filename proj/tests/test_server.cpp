#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "bciar/bridge_server.hpp"

using namespace bciar;
using namespace bciar::bridge;

namespace {

session::SessionSpec spec_for(int experiment) {
  session::SessionSpec s;
  s.experiment = experiment;
  s.seed = 11;
  return s;
}

Snapshot get_state(int port) {
  httplib::Client cli("127.0.0.1", port);
  const auto res = cli.Get("/state");
  if (!res || res->status != 200) throw Error(Errc::Unreachable, "state");
  return snapshot_from_json(nlohmann::json::parse(res->body));
}

httplib::Result post_commands(int port, const std::string& client, const std::string& body) {
  httplib::Client cli("127.0.0.1", port);
  return cli.Post("/stream", {{"X-Client-Id", client}}, body, "application/x-ndjson");
}

}  // namespace

TEST(BridgeServer, StateAndStream) {
  BridgeServer server(ExperimentConfig{}, spec_for(2), {.time_scale = 2.0});
  const int port = server.start();
  const auto snaps = read_stream("127.0.0.1", port, 20);
  for (std::size_t i = 1; i < snaps.size(); ++i) EXPECT_GT(snaps[i].tick, snaps[i - 1].tick);
  EXPECT_EQ(snaps.back().condition, "Neurofeedback");
  EXPECT_GE(get_state(port).tick, snaps.back().tick);
  server.stop();
}

TEST(BridgeServer, SessionEndpointReconfigures) {
  BridgeServer server(ExperimentConfig{}, spec_for(2), {.time_scale = 2.0});
  const int port = server.start();
  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Post("/session", R"({"experiment":2,"seed":5,"condition":"Sham"})", "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(nlohmann::json::parse(res->body).at("condition"), "Sham");
  EXPECT_EQ(get_state(port).condition, "Sham");

  res = cli.Post("/session", R"({"experiment":2,"condition":"Holographic"})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  res = cli.Post("/session", "not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(get_state(port).condition, "Sham");
}

TEST(BridgeServer, ConfirmIsIdempotentAndBusyIsRejected) {
  BridgeServer server(ExperimentConfig{}, spec_for(3));
  const int port = server.start();
  const auto first = http_confirm("127.0.0.1", port, {0, 10});
  EXPECT_TRUE(first.accepted);
  EXPECT_FALSE(first.duplicate);
  const auto again = http_confirm("127.0.0.1", port, {0, 10});
  EXPECT_TRUE(again.accepted);
  EXPECT_TRUE(again.duplicate);
  try {
    http_confirm("127.0.0.1", port, {1, 11});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::Rejected);
  }
  EXPECT_THROW(http_confirm("127.0.0.1", port, {42, 52}), Error);
  std::this_thread::sleep_for(std::chrono::milliseconds(150));  // next 20 Hz snapshot
  EXPECT_EQ(get_state(port).confirmed_target, 0);
}

TEST(BridgeServer, ConfirmWithoutServerIsUnreachable) {
  int port = 0;
  {
    BridgeServer server(ExperimentConfig{}, spec_for(2));
    port = server.start();
  }
  try {
    http_confirm("127.0.0.1", port, {0, 10}, 0.2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::Unreachable);
  }
}

TEST(BridgeServer, KeyCommandReflectedWithinOneHundredMs) {
  BridgeServer server(ExperimentConfig{}, spec_for(2));
  const int port = server.start();
  while (get_state(port).phase != "Decide") std::this_thread::sleep_for(std::chrono::milliseconds(20));

  std::atomic<bool> seen{false};
  std::chrono::steady_clock::time_point sent, reflected;
  std::thread reader([&] {
    httplib::Client cli("127.0.0.1", port);
    std::string pending;
    cli.Get("/stream", [&](const char* d, std::size_t n) {
      pending.append(d, n);
      for (auto nl = pending.find('\n'); nl != std::string::npos; nl = pending.find('\n')) {
        const auto s = snapshot_from_json(nlohmann::json::parse(pending.substr(0, nl)));
        pending.erase(0, nl + 1);
        if (s.command == "mi_left" && s.s_t < 0.0) {
          reflected = std::chrono::steady_clock::now();
          seen = true;
          return false;
        }
      }
      return true;
    });
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(200));
  sent = std::chrono::steady_clock::now();
  const auto res = post_commands(port, "console", R"({"command":"mi_left"})");
  ASSERT_TRUE(res);
  EXPECT_EQ(nlohmann::json::parse(res->body).at("accepted")[0], true);
  reader.join();
  ASSERT_TRUE(seen);
  EXPECT_LT(std::chrono::duration<double>(reflected - sent).count(), 0.1);
}

TEST(BridgeServer, SingleCommandClient) {
  BridgeServer server(ExperimentConfig{}, spec_for(2));
  const int port = server.start();
  auto res = post_commands(port, "a", "{\"command\":\"mi_release\"}\n{\"command\":\"pause\"}\n");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(nlohmann::json::parse(res->body).at("accepted").size(), 2u);
  res = post_commands(port, "b", R"({"command":"pause"})");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);
  res = post_commands(port, "a", R"({"command":"fly"})");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  httplib::Client cli("127.0.0.1", port);
  res = cli.Post("/stream", R"({"command":"pause"})", "application/x-ndjson");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
}

TEST(BridgeServer, StalledSubscriberDoesNotBlockTheTick) {
  BridgeServer server(ExperimentConfig{}, spec_for(2), {.time_scale = 4.0});
  const int port = server.start();

  // A subscriber that requests the stream and never reads it.
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  ASSERT_GE(fd, 0);
  int small = 1024;
  ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &small, sizeof small);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  const std::string req = "GET /stream HTTP/1.1\r\nHost: localhost\r\n\r\n";
  ASSERT_EQ(::send(fd, req.data(), req.size(), 0), static_cast<ssize_t>(req.size()));

  const auto t0 = get_state(port).tick;
  std::this_thread::sleep_for(std::chrono::seconds(2));
  const auto t1 = get_state(port).tick;
  // 2 s at 4x is 1024 ticks; allow for scheduling slack.
  EXPECT_GT(t1 - t0, 700u);
  ::close(fd);
}

TEST(BridgeServer, StopsWithOpenStream) {
  auto server = std::make_unique<BridgeServer>(ExperimentConfig{}, spec_for(2));
  const int port = server->start();
  std::thread reader([port] {
    httplib::Client cli("127.0.0.1", port);
    cli.Get("/stream", [](const char*, std::size_t) { return true; });
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  EXPECT_EQ(server->subscribers(), 1u);
  const auto t0 = std::chrono::steady_clock::now();
  server->stop();
  reader.join();
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 5.0);
}
