#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "bciar/bridge.hpp"

using namespace bciar;
using namespace bciar::bridge;

namespace {

Errc decode_error(const Bytes& b) {
  try {
    decode_osc_target(b);
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::InvalidArgument;  // sentinel: decoded fine
}

}  // namespace

TEST(Osc, GoldenFrame) {
  const Bytes golden{0x2F, 0x62, 0x63, 0x69, 0x2F, 0x74, 0x61, 0x72, 0x67, 0x65, 0x74, 0x00,
                     0x2C, 0x69, 0x69, 0x00, 0x00, 0x00, 0x00, 0x03, 0x00, 0x00, 0x00, 0x07};
  EXPECT_EQ(encode_osc_target({3, 7}), golden);
  EXPECT_EQ(decode_osc_target(golden), (TargetMessage{3, 7}));
}

TEST(Osc, ZeroIds) {
  const auto b = encode_osc_target({0, 0});
  ASSERT_EQ(b.size(), 24u);
  EXPECT_EQ(b[19], 0);
  EXPECT_EQ(b[23], 0);
  EXPECT_EQ(decode_osc_target(b), (TargetMessage{0, 0}));
}

TEST(Osc, RoundTripRandom) {
  Rng rng(5);
  for (int k = 0; k < 1000; ++k) {
    const TargetMessage m{static_cast<std::int32_t>(rng.uniform_int(0, 2147483647)),
                          static_cast<std::int32_t>(rng.uniform_int(0, 2147483647))};
    const auto b = encode_osc_target(m);
    ASSERT_EQ(b.size(), 24u);
    ASSERT_EQ(decode_osc_target(b), m) << k;
  }
}

TEST(Osc, BigEndianArguments) {
  const auto b = encode_osc_target({0x01020304, 258});
  EXPECT_EQ(std::vector<std::uint8_t>(b.begin() + 16, b.end()),
            (std::vector<std::uint8_t>{1, 2, 3, 4, 0, 0, 1, 2}));
}

TEST(Osc, NegativeIdsRejected) {
  EXPECT_THROW(encode_osc_target({-1, 0}), Error);
  auto b = encode_osc_target({1, 2});
  b[16] = 0xFF;
  EXPECT_EQ(decode_error(b), Errc::MalformedFrame);
}

TEST(Osc, MalformedFrames) {
  const auto good = encode_osc_target({3, 7});
  auto truncated = good;
  truncated.resize(20);
  EXPECT_EQ(decode_error(truncated), Errc::MalformedFrame);
  auto odd = good;
  odd.pop_back();
  EXPECT_EQ(decode_error(odd), Errc::MalformedFrame);
  auto addr = good;
  addr[5] = 'x';
  EXPECT_EQ(decode_error(addr), Errc::MalformedFrame);
  auto tag = good;
  tag[14] = 'f';
  EXPECT_EQ(decode_error(tag), Errc::MalformedFrame);
  auto trailing = good;
  trailing.insert(trailing.end(), {0, 0, 0, 0});
  EXPECT_EQ(decode_error(trailing), Errc::MalformedFrame);
  auto padding = good;
  padding[15] = 1;
  EXPECT_EQ(decode_error(padding), Errc::MalformedFrame);
  EXPECT_EQ(decode_error(Bytes{}), Errc::MalformedFrame);
  EXPECT_EQ(decode_error(Bytes(24, 0x41)), Errc::MalformedFrame);
}

TEST(Snapshot, JsonRoundTrip) {
  Snapshot s;
  s.tick = 1234;
  s.t = 9.640625;
  s.s_t = -0.25;
  s.command = "Left";
  s.cursor = 2;
  s.sway_x = -0.125;
  s.condition = "Neurofeedback";
  s.phase = "Decide";
  s.joints = {0.1, -0.2, 0.3, -0.4, 0.5, -0.6};
  s.gripper = "Closed";
  s.confirmed_target = 3;
  s.robot_phase = "to_grasp";
  s.lift_progress = 0.5;
  s.metrics = {14.8, 0.41, 0.02, 0.05, 7};
  const auto back = snapshot_from_json(nlohmann::json::parse(to_json(s).dump()));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_EQ(back.confirmed_target, 3);

  s.confirmed_target.reset();
  const auto j = to_json(s);
  EXPECT_TRUE(j["confirmed_target"].is_null());
  EXPECT_FALSE(snapshot_from_json(j).confirmed_target.has_value());
}

TEST(Snapshot, MissingFieldIsParseError) {
  auto j = to_json(Snapshot{});
  j.erase("cursor");
  try {
    snapshot_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ParseError);
  }
}

TEST(DropOldestBuffer, KeepsNewest) {
  DropOldestBuffer<int> b(64);
  for (int i = 0; i < 100; ++i) b.push(i);
  EXPECT_EQ(b.size(), 64u);
  EXPECT_EQ(b.dropped(), 36u);
  const auto v = b.drain();
  ASSERT_EQ(v.size(), 64u);
  for (int i = 0; i < 64; ++i) EXPECT_EQ(v[static_cast<std::size_t>(i)], 36 + i);
  EXPECT_FALSE(b.pop().has_value());
}

TEST(DropOldestBuffer, ConcurrentProducerNeverBlocks) {
  DropOldestBuffer<int> b(8);
  std::atomic<bool> done{false};
  std::thread producer([&] {
    for (int i = 0; i < 10000; ++i) b.push(i);
    done = true;
  });
  int last = -1;
  std::size_t popped = 0;
  for (;;) {
    const bool finished = done;
    if (auto v = b.pop()) {
      EXPECT_GT(*v, last);
      last = *v;
      ++popped;
    } else if (finished) {
      break;
    }
  }
  producer.join();
  EXPECT_EQ(last, 9999);
  EXPECT_EQ(popped + b.dropped(), 10000u);
}

TEST(DropOldestBuffer, ZeroCapacity) { EXPECT_THROW(DropOldestBuffer<int>(0), Error); }

TEST(SimulatedLink, LatencyAndOrder) {
  SimulatedLink<int> link({0.02, 0.05, 0.0}, 3);
  for (int i = 0; i < 200; ++i) link.send(i * 0.001, i);
  EXPECT_TRUE(link.poll(0.0199).empty());
  std::vector<int> got;
  double last_due = 0;
  for (double t = 0; t < 1.0; t += 0.005) {
    for (const auto& [due, v] : link.poll(t)) {
      EXPECT_GE(due, v * 0.001 + 0.02 - 1e-12);
      EXPECT_LE(due, t + 1e-12);
      EXPECT_GE(due, last_due);
      last_due = due;
      got.push_back(v);
    }
  }
  ASSERT_EQ(got.size(), 200u);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(got[static_cast<std::size_t>(i)], i);
  EXPECT_EQ(link.lost(), 0u);
}

TEST(SimulatedLink, LossRate) {
  SimulatedLink<int> link({0.0, 0.0, 0.25}, 8);
  for (int i = 0; i < 4000; ++i) link.send(0.0, i);
  EXPECT_EQ(link.lost() + link.in_flight(), 4000u);
  EXPECT_NEAR(static_cast<double>(link.lost()) / 4000.0, 0.25, 0.03);
}

TEST(SimulatedLink, InvalidConfig) {
  EXPECT_THROW(SimulatedLink<int>({-0.1, 0, 0}, 1), Error);
  EXPECT_THROW(SimulatedLink<int>({0, 0, 1.5}, 1), Error);
}

TEST(Udp, LoopbackOscFrame) {
  UdpSocket rx, tx;
  const int port = rx.bind_loopback(0);
  ASSERT_GT(port, 0);
  tx.send_to("127.0.0.1", port, encode_osc_target({3, 7}));
  const auto got = rx.receive(1.0);
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(decode_osc_target(*got), (TargetMessage{3, 7}));
  EXPECT_FALSE(rx.receive(0.01).has_value());
}
