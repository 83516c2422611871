#include <gtest/gtest.h>

#include "bciar/session.hpp"

using namespace bciar;
using namespace bciar::session;

namespace {

SessionSpec console_spec(int experiment) {
  SessionSpec s;
  s.experiment = experiment;
  s.seed = 3;
  return s;
}

// Ticks until `pred` holds on a snapshot or `max_s` of simulated time passes.
template <typename Pred>
std::optional<bridge::Snapshot> run_until(LiveSession& s, double max_s, Pred pred) {
  const auto n = static_cast<int>(max_s * eeg::kSampleRate);
  for (int i = 0; i < n; ++i) {
    if (auto snap = s.tick(); snap && pred(*snap)) return snap;
  }
  return std::nullopt;
}

}  // namespace

TEST(LiveSession, FiveSecondsAtTwentyHz) {
  LiveSession s(ExperimentConfig{}, console_spec(2));
  int n = 0;
  std::uint64_t last_tick = 0;
  for (int i = 0; i < 5 * 128; ++i) {
    if (auto snap = s.tick()) {
      ++n;
      EXPECT_GT(snap->tick, last_tick);
      last_tick = snap->tick;
    }
  }
  EXPECT_NEAR(n, 100, 1);
}

TEST(LiveSession, MiLeftDrivesCursorAfterDwell) {
  LiveSession s(ExperimentConfig{}, console_spec(2));
  ASSERT_TRUE(run_until(s, 5, [](const bridge::Snapshot& x) { return x.phase == "Decide"; }));
  const int start = s.ar_state().cursor;
  ASSERT_TRUE(s.command("mi_left"));
  const double t0 = s.time();

  const auto neg = run_until(s, 1, [](const bridge::Snapshot& x) { return x.s_t < 0.0; });
  ASSERT_TRUE(neg);
  EXPECT_EQ(neg->command, "mi_left");
  EXPECT_EQ(neg->cursor, start);

  const auto moved = run_until(s, 2, [&](const bridge::Snapshot& x) { return x.cursor != start; });
  ASSERT_TRUE(moved);
  EXPECT_EQ(moved->cursor, start - 1);
  EXPECT_GE(moved->t - t0, ExperimentConfig{}.ar.dwell.dwell_s - 1e-9);
  EXPECT_GT(moved->metrics.sci, 0.0);
}

TEST(LiveSession, PhaseGuardsAndUnknownCommands) {
  LiveSession s(ExperimentConfig{}, console_spec(2));
  EXPECT_EQ(s.ar_state().phase, ar::Phase::Prepare);
  EXPECT_FALSE(s.command("mi_left"));
  EXPECT_FALSE(s.command("mi_lift"));
  EXPECT_TRUE(s.command("mi_release"));
  EXPECT_THROW(s.command("jump"), Error);
  EXPECT_EQ(s.command_log().size(), 1u);
}

TEST(LiveSession, PauseFreezesSimulatedTime) {
  LiveSession s(ExperimentConfig{}, console_spec(2));
  for (int i = 0; i < 64; ++i) s.tick();
  ASSERT_TRUE(s.command("pause"));
  const double t = s.time();
  int snaps = 0;
  for (int i = 0; i < 128; ++i) snaps += s.tick().has_value();
  EXPECT_EQ(s.time(), t);
  EXPECT_EQ(snaps, 20);
  ASSERT_TRUE(s.command("pause"));
  s.tick();
  EXPECT_GT(s.time(), t);
}

TEST(LiveSession, ResetStartsAFreshTrial) {
  LiveSession s(ExperimentConfig{}, console_spec(2));
  ASSERT_TRUE(run_until(s, 5, [](const bridge::Snapshot& x) { return x.phase == "Decide"; }));
  const int trial = s.trial();
  ASSERT_TRUE(s.command("reset"));
  EXPECT_EQ(s.trial(), trial + 1);
  EXPECT_EQ(s.ar_state().phase, ar::Phase::Prepare);
}

TEST(LiveSession, LiftHeldConfirmsAndArmRunsGraspSequence) {
  LiveSession s(ExperimentConfig{}, console_spec(3));
  ASSERT_TRUE(run_until(s, 5, [](const bridge::Snapshot& x) { return x.phase == "Decide"; }));
  const int cursor = s.ar_state().cursor;
  ASSERT_TRUE(s.command("mi_lift"));

  double progress = 0.0;
  const auto confirmed = run_until(s, 5, [&](const bridge::Snapshot& x) {
    if (x.phase == "Confirm") {
      EXPECT_GE(x.lift_progress, progress);
      progress = x.lift_progress;
    }
    return x.confirmed_target.has_value();
  });
  ASSERT_TRUE(confirmed);
  EXPECT_EQ(*confirmed->confirmed_target, s.scene().objects[static_cast<std::size_t>(cursor)].target_id);
  EXPECT_GT(progress, 0.9);

  std::vector<std::string> phases;
  const auto done = run_until(s, 40, [&](const bridge::Snapshot& x) {
    if (phases.empty() || phases.back() != x.robot_phase) phases.push_back(x.robot_phase);
    return x.robot_phase == "Grasped";
  });
  ASSERT_TRUE(done);
  const std::vector<std::string> expected{"to_above", "to_app", "to_grasp", "close", "lift"};
  auto it = phases.begin();
  for (const auto& e : expected) {
    it = std::find(it, phases.end(), e);
    ASSERT_NE(it, phases.end()) << e;
  }
  EXPECT_EQ(phases.front(), "to_observation");
  EXPECT_NE(std::find(phases.begin(), phases.end(), "planning"), phases.end());

  // The arm homes, then the next trial starts after the pause.
  const auto next = run_until(s, 10, [](const bridge::Snapshot& x) { return x.phase == "Prepare"; });
  ASSERT_TRUE(next);
  EXPECT_EQ(s.trial(), 2);
  EXPECT_EQ(next->joints, pipeline::home_joints());
  EXPECT_EQ(next->robot_phase, "idle");
}

TEST(LiveSession, TargetSubmissionIsIdempotentAndBusyGuarded) {
  LiveSession s(ExperimentConfig{}, console_spec(3));
  const auto& objs = s.scene().objects;
  const bridge::TargetMessage a{objs[0].target_id, objs[0].marker_id}, b{objs[1].target_id, objs[1].marker_id};
  EXPECT_EQ(s.submit_target(a), RobotService::Ack::Accepted);
  EXPECT_EQ(s.submit_target(a), RobotService::Ack::Duplicate);
  EXPECT_EQ(s.submit_target(b), RobotService::Ack::Busy);
  EXPECT_THROW(s.submit_target({99, 1}), Error);
  EXPECT_THROW(s.submit_target({a.target_id, a.marker_id + 1}), Error);
}

TEST(RobotService, AcceptsAgainAfterFinish) {
  RobotService r;
  EXPECT_EQ(r.submit(1), RobotService::Ack::Accepted);
  EXPECT_TRUE(r.busy());
  r.finish();
  EXPECT_EQ(r.submit(2), RobotService::Ack::Accepted);
  r.finish();
  EXPECT_EQ(r.submit(1), RobotService::Ack::Duplicate);
  r.reset();
  EXPECT_EQ(r.submit(1), RobotService::Ack::Accepted);
}

TEST(LiveSession, SimulatedDriverSelectsAndReportsMetrics) {
  SessionSpec spec = console_spec(2);
  spec.driver = Driver::Simulated;
  LiveSession s(ExperimentConfig{}, spec);
  EXPECT_FALSE(s.command("mi_left"));
  const auto snap = run_until(s, 60, [](const bridge::Snapshot& x) { return x.metrics.selections >= 3; });
  ASSERT_TRUE(snap);
  EXPECT_GT(snap->metrics.itr, 0.0);
  EXPECT_GT(snap->metrics.latency_s, 0.0);
  EXPECT_LT(snap->metrics.latency_s, 6.0);
  EXPECT_NE(snap->command, "mi_left");
}

TEST(LiveSession, SameSeedSameSnapshots) {
  SessionSpec spec = console_spec(3);
  spec.driver = Driver::Simulated;
  LiveSession a(ExperimentConfig{}, spec), b(ExperimentConfig{}, spec);
  for (int i = 0; i < 128 * 20; ++i) {
    const auto x = a.tick(), y = b.tick();
    ASSERT_EQ(x.has_value(), y.has_value());
    if (x) ASSERT_EQ(bridge::to_json(*x).dump(), bridge::to_json(*y).dump());
  }
}

TEST(LiveSession, InvalidSnapshotRate) {
  SessionSpec spec = console_spec(2);
  spec.snapshot_hz = 0.0;
  EXPECT_THROW(LiveSession(ExperimentConfig{}, spec), Error);
}
