#pragma once

// Live closed-loop session for the operator console. Advances on the 128 Hz
// tick and emits a snapshot every 1/20 s of simulated time. In console-driven
// mode key commands stand in for the decoder output; in simulated mode a
// synthetic subject steers toward a random cue.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "bciar/ar_loop.hpp"
#include "bciar/bridge.hpp"
#include "bciar/config.hpp"
#include "bciar/experiments.hpp"
#include "bciar/metrics.hpp"
#include "bciar/pipeline.hpp"

namespace bciar::session {

using eeg::Command;

enum class Driver { Console, Simulated };

inline std::string_view to_string(Driver d) { return d == Driver::Console ? "console" : "simulated"; }

inline Driver driver_from_string(std::string_view s) {
  if (s == "console") return Driver::Console;
  if (s == "simulated") return Driver::Simulated;
  throw Error(Errc::InvalidArgument, "unknown driver: " + std::string(s));
}

struct SessionSpec {
  int experiment = 3;
  std::uint64_t seed = 1;
  ar::Condition condition = ar::Condition::Neurofeedback;
  Driver driver = Driver::Console;
  double snapshot_hz = 20.0;
  double next_trial_delay_s = 2.0;  // pause between a finished trial and the next
};

// Robot-side acceptance of confirmed targets. Idempotent per (session,
// target_id); a different target while the arm is moving is refused.
class RobotService {
 public:
  enum class Ack { Accepted, Duplicate, Busy };

  Ack submit(int target_id) {
    if (accepted_.contains(target_id)) return Ack::Duplicate;
    if (busy_) return Ack::Busy;
    accepted_.insert(target_id);
    busy_ = true;
    return Ack::Accepted;
  }
  void finish() { busy_ = false; }
  void reset() {
    busy_ = false;
    accepted_.clear();
  }
  bool busy() const { return busy_; }

 private:
  bool busy_ = false;
  std::set<int> accepted_;
};

inline constexpr std::array<std::string_view, 6> kCommands = {"mi_left", "mi_right", "mi_lift",
                                                               "mi_release", "pause",  "reset"};

class LiveSession {
 public:
  LiveSession(const ExperimentConfig& cfg, SessionSpec spec)
      : cfg_(cfg), spec_(spec), arm_(), eTc_true_(experiments::true_eTc(cfg)) {
    cfg_.validate();
    if (!(spec_.snapshot_hz > 0.0 && spec_.snapshot_hz <= eeg::kSampleRate)) {
      throw Error(Errc::InvalidConfig, "snapshot rate must be in (0, 128] Hz");
    }
    if (spec_.experiment == 3) {
      eTc_est_ = pipeline::calibrate_hand_eye(cfg_, eTc_true_, derive_seed(spec_.seed, experiments::kHandEyeSeed)).eTc;
    }
    if (spec_.driver == Driver::Simulated) model_ = experiments::train_subject(cfg_, 0);
    start_trial();
  }

  const SessionSpec& spec() const { return spec_; }
  std::uint64_t tick_count() const { return tick_; }
  double time() const { return t_; }
  int trial() const { return trial_; }
  const ar::ArState& ar_state() const { return loop_->state(); }
  const pipeline::Scene& scene() const { return scene_; }
  bool paused() const { return paused_; }
  const std::vector<std::string>& command_log() const { return command_log_; }

  // Applies a console command. Returns false when the current phase does not
  // accept it (lateral and lift keys outside Decide/Confirm).
  bool command(std::string_view name) {
    if (std::find(kCommands.begin(), kCommands.end(), name) == kCommands.end()) {
      throw Error(Errc::InvalidArgument, "unknown command: " + std::string(name));
    }
    if (name == "pause") {
      paused_ = !paused_;
      log_command(name);
      return true;
    }
    if (name == "reset") {
      log_command(name);
      start_trial();
      return true;
    }
    if (spec_.driver != Driver::Console) return false;
    const auto phase = loop_->state().phase;
    if (name == "mi_release") {
      key_ = "none";
      log_command(name);
      return true;
    }
    const bool lateral = name == "mi_left" || name == "mi_right";
    if (phase == ar::Phase::Execute || phase == ar::Phase::Prepare || (lateral && phase != ar::Phase::Decide)) {
      return false;
    }
    key_ = std::string(name);
    log_command(name);
    return true;
  }

  // Target confirmation arriving from outside (HTTP or OSC).
  RobotService::Ack submit_target(const bridge::TargetMessage& m) {
    const auto& objs = scene_.objects;
    const bool known = std::any_of(objs.begin(), objs.end(), [&](const pipeline::SceneObject& o) {
      return o.target_id == m.target_id && o.marker_id == m.marker_id;
    });
    if (!known) throw Error(Errc::InvalidArgument, "unknown target " + std::to_string(m.target_id));
    const auto ack = robot_.submit(m.target_id);
    if (ack == RobotService::Ack::Accepted) start_robot(scene_.by_target(m.target_id));
    return ack;
  }

  // Advances one 1/128 s tick. Returns a snapshot on rate boundaries.
  std::optional<bridge::Snapshot> tick() {
    ++tick_;
    if (!paused_) advance(1.0 / eeg::kSampleRate);
    const auto k = static_cast<std::uint64_t>(std::floor(static_cast<double>(tick_) * spec_.snapshot_hz / eeg::kSampleRate + 1e-9));
    if (k == emitted_) return std::nullopt;
    emitted_ = k;
    return snapshot();
  }

  bridge::Snapshot snapshot() const {
    const auto& st = loop_->state();
    bridge::Snapshot s;
    s.tick = tick_;
    s.t = t_;
    s.s_t = last_.s_t;
    s.command = spec_.driver == Driver::Console ? key_ : std::string(eeg::to_string(last_.label));
    s.cursor = st.cursor;
    s.sway_x = st.sway_x;
    s.condition = std::string(ar::to_string(spec_.condition));
    s.phase = std::string(ar::to_string(st.phase));
    s.joints = joints_;
    s.gripper = gripper_ == robot::Gripper::Closed ? "Closed" : "Open";
    s.confirmed_target = confirmed_;
    s.robot_phase = robot_phase_;
    if (st.phase == ar::Phase::Confirm) s.lift_progress = std::clamp(st.lift_clock / cfg_.ar.lift_dwell_s, 0.0, 1.0);
    s.metrics.selections = static_cast<int>(decision_times_.size());
    if (!decision_times_.empty()) {
      const double p = static_cast<double>(decision_times_.size()) / concluded_;
      const double tm = metrics::mean_sd(decision_times_).mean;
      s.metrics.itr = metrics::itr(3, p, tm).bits_per_min;
      s.metrics.latency_s = tm;
    }
    if (trace_.samples.size() >= 2) s.metrics.sci = metrics::sci(trace_);
    if (decisions_ > 0) s.metrics.fpr = metrics::fpr(false_positives_, decisions_);
    return s;
  }

 private:
  void log_command(std::string_view name) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", t_);
    command_log_.push_back(std::string(buf) + " " + std::string(name));
  }

  void start_trial() {
    ++trial_;
    const auto seed = derive_seed(spec_.seed, 0x11FEu, static_cast<std::uint64_t>(trial_));
    if (spec_.experiment == 3) {
      scene_ = pipeline::make_scene(cfg_.scene, derive_seed(seed, experiments::kSceneSeed));
    } else {
      scene_ = {};
      for (const auto& t : ar::default_targets(cfg_.scene.n_targets)) scene_.objects.push_back({t.target_id, t.marker_id, {}, {}});
    }
    loop_.emplace(scene_.targets(), spec_.condition, derive_seed(seed, experiments::kArSeed), cfg_.ar);
    Rng rng(derive_seed(seed, experiments::kCueSeed));
    cue_ = rng.uniform_int(0, static_cast<int>(scene_.objects.size()) - 1);
    if (spec_.driver == Driver::Simulated) {
      source_.emplace(cfg_.profile(0), derive_seed(seed, experiments::kEegSeed));
      decoder_.emplace(model_);
    }
    last_ = {};
    key_ = "none";
    trace_ = {};
    trace_dir_ = 0;
    confirmed_.reset();
    robot_.reset();
    robot_log_.reset();
    robot_phase_ = spec_.experiment == 3 ? "idle" : "disabled";
    gripper_ = robot::Gripper::Open;
    next_trial_at_.reset();
  }

  void start_robot(const pipeline::SceneObject& obj) {
    confirmed_ = obj.target_id;
    if (spec_.experiment != 3) {
      robot_.finish();
      next_trial_at_ = t_ + spec_.next_trial_delay_s;
      return;
    }
    const pipeline::RobotContext ctx{cfg_, arm_, eTc_true_, eTc_est_};
    const auto rt = pipeline::run_robot_side(ctx, obj, derive_seed(spec_.seed, 0x4B07u, static_cast<std::uint64_t>(trial_)));
    robot_log_ = rt.exec;
    robot_t0_ = t_;
    robot_plan_s_ = rt.t_plan;
    robot_from_ = pipeline::home_joints();
    robot_obs_ = rt.observation;
    robot_obs_s_ = rt.to_observation_s;
    robot_phase_ = "to_observation";
  }

  mi::ClassifierOutput console_output() const {
    mi::ClassifierOutput o;
    if (key_ == "mi_left") {
      o.label = Command::Left;
      o.s_t = -0.8;
    } else if (key_ == "mi_right") {
      o.label = Command::Right;
      o.s_t = 0.8;
    } else if (key_ == "mi_lift") {
      o.label = Command::Lift;
    }
    return o;
  }

  void advance(double dt) {
    t_ += dt;
    if (next_trial_at_ && t_ >= *next_trial_at_ - 1e-9) {
      start_trial();
      return;
    }
    if (robot_log_) {
      animate_robot();
      return;
    }
    if (loop_->done()) return;

    const auto& st = loop_->state();
    int dir = 0;
    if (spec_.driver == Driver::Simulated) {
      Command intent = Command::Neutral;
      if (st.phase == ar::Phase::Decide) {
        if (st.cursor != cue_) {
          dir = cue_ > st.cursor ? 1 : -1;
          intent = dir > 0 ? Command::Right : Command::Left;
        } else {
          intent = Command::Lift;
        }
      } else if (st.phase == ar::Phase::Confirm) {
        intent = Command::Lift;
      }
      if (auto o = decoder_->push(source_->next(intent, loop_->congruent(dir)))) last_ = *o;
    } else {
      last_ = console_output();
      dir = last_.s_t > 0 ? 1 : last_.s_t < 0 ? -1 : 0;
    }
    if (st.phase == ar::Phase::Decide && dir != 0) {
      if (trace_dir_ == 0) trace_dir_ = trace_.direction = dir;
      trace_.samples.push_back({st.t, last_.s_t});
    }
    for (const auto& e : loop_->step(last_, dt)) {
      if (e.kind == ar::EventKind::CursorMove) {
        ++decisions_;
        if ((e.detail.starts_with("Right") ? 1 : -1) != dir) ++false_positives_;
      } else if (e.kind == ar::EventKind::PhaseChange && e.detail == ar::to_string(ar::Phase::Confirm)) {
        ++decisions_;
        decide_at_confirm_ = loop_->state().decide_clock;
      } else if (e.kind == ar::EventKind::TargetConfirmed) {
        ++concluded_;
        decision_times_.push_back(decide_at_confirm_);
        key_ = "none";
        const auto& obj = scene_.by_target(e.value);
        if (robot_.submit(obj.target_id) == RobotService::Ack::Accepted) start_robot(obj);
      } else if (e.kind == ar::EventKind::Timeout) {
        ++concluded_;
        next_trial_at_ = t_ + spec_.next_trial_delay_s;
      }
    }
  }

  void animate_robot() {
    const auto& log = *robot_log_;
    const double te = t_ - robot_t0_ - robot_plan_s_;
    if (te < 0.0) {
      // Move to the observation pose, then perceive and plan there.
      const double u = robot_obs_s_ > 0.0 ? std::min(1.0, (t_ - robot_t0_) / robot_obs_s_) : 1.0;
      for (std::size_t i = 0; i < robot::kJoints; ++i) joints_[i] = robot_from_[i] + u * (robot_obs_[i] - robot_from_[i]);
      robot_phase_ = u < 1.0 ? "to_observation" : "planning";
      return;
    }
    if (te >= log.t_exec) {
      // Outcome stays displayed while the arm returns home at the fast speed.
      robot_phase_ = std::string(robot::to_string(log.outcome));
      gripper_ = robot::Gripper::Open;
      const double th = te - log.t_exec;
      const double u = robot_obs_s_ > 0.0 ? std::min(1.0, th / robot_obs_s_) : 1.0;
      const auto& home = pipeline::home_joints();
      for (std::size_t i = 0; i < robot::kJoints; ++i) joints_[i] = log.final_q[i] + u * (home[i] - log.final_q[i]);
      if (u >= 1.0) {
        robot_log_.reset();
        robot_.finish();
        next_trial_at_ = t_ + spec_.next_trial_delay_s;
      }
      return;
    }
    joints_ = robot::joints_at(log, te).first;
    double left = te;
    for (const auto& seg : log.segments) {
      if (left <= seg.duration) {
        robot_phase_ = seg.label;
        gripper_ = seg.gripper;
        break;
      }
      left -= seg.duration;
    }
  }

  ExperimentConfig cfg_;
  SessionSpec spec_;
  robot::ArmModel arm_;
  Pose eTc_true_;
  Pose eTc_est_;
  mi::LinearModel model_;

  std::uint64_t tick_ = 0;
  std::uint64_t emitted_ = 0;
  double t_ = 0.0;
  bool paused_ = false;
  int trial_ = 0;
  int concluded_ = 0;  // trials that ended in a confirmation or a timeout

  pipeline::Scene scene_;
  std::optional<ar::ArLoop> loop_;
  std::optional<eeg::EegSource> source_;
  std::optional<mi::OnlineDecoder> decoder_;
  int cue_ = 0;
  mi::ClassifierOutput last_;
  std::string key_ = "none";
  std::vector<std::string> command_log_;

  metrics::ControlTrace trace_;
  int trace_dir_ = 0;
  std::vector<double> decision_times_;
  double decide_at_confirm_ = 0.0;
  std::size_t decisions_ = 0;
  std::size_t false_positives_ = 0;

  RobotService robot_;
  std::optional<int> confirmed_;
  std::optional<robot::ExecutionLog> robot_log_;
  double robot_t0_ = 0.0;
  double robot_plan_s_ = 0.0;
  robot::Joints robot_from_{}, robot_obs_{};
  double robot_obs_s_ = 0.0;
  std::string robot_phase_ = "idle";
  robot::Joints joints_ = pipeline::home_joints();
  robot::Gripper gripper_ = robot::Gripper::Open;
  std::optional<double> next_trial_at_;
};

}  // namespace bciar::session
