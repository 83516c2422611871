#pragma once

// Kinematic 6-DOF arm: standard DH forward kinematics, damped least squares IK,
// grasp waypoint synthesis and a segment-timed execution model with re-grasp,
// safe-return and search-scan recovery.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bciar/error.hpp"
#include "bciar/geom.hpp"

namespace bciar::robot {

inline constexpr int kJoints = 6;
using Joints = std::array<double, kJoints>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

struct DhRow {
  double a = 0.0;      // mm
  double alpha = 0.0;  // rad
  double d = 0.0;      // mm
  double theta_offset = 0.0;
};

// Defaults approximate a 280 mm-reach desktop cobot. Configuration, not
// vendor ground truth.
struct ArmModel {
  std::array<DhRow, kJoints> dh{{
      {0.0, std::numbers::pi / 2, 131.22, 0.0},
      {-110.4, 0.0, 0.0, -std::numbers::pi / 2},
      {-96.0, 0.0, 0.0, 0.0},
      {0.0, std::numbers::pi / 2, 63.4, -std::numbers::pi / 2},
      {0.0, -std::numbers::pi / 2, 75.05, std::numbers::pi / 2},
      {0.0, 0.0, 45.6, 0.0},
  }};
  std::array<std::array<double, 2>, kJoints> limits{{
      {-2.93, 2.93}, {-2.93, 2.93}, {-2.93, 2.93}, {-2.93, 2.93}, {-2.93, 2.93}, {-3.05, 3.05}}};
  Pose tool_offset = Pose::from_translation(0, 0, 110);  // flange -> gripper tip
  double reach_mm = 280.0;

  void validate() const {
    for (int i = 0; i < kJoints; ++i) {
      const auto& r = dh[static_cast<std::size_t>(i)];
      if (!std::isfinite(r.a) || !std::isfinite(r.alpha) || !std::isfinite(r.d) || !std::isfinite(r.theta_offset)) {
        throw Error(Errc::InvalidConfig, "DH row " + std::to_string(i) + " not finite");
      }
      const auto& l = limits[static_cast<std::size_t>(i)];
      if (!(l[0] < l[1])) throw Error(Errc::InvalidConfig, "joint limits not ordered for joint " + std::to_string(i));
    }
    if (!(reach_mm > 0.0)) throw Error(Errc::InvalidConfig, "reach must be positive");
  }

  bool within_limits(const Joints& q) const {
    for (std::size_t i = 0; i < kJoints; ++i) {
      if (!(q[i] >= limits[i][0] && q[i] <= limits[i][1])) return false;
    }
    return true;
  }
};

inline Mat4 dh_transform(const DhRow& r, double q) {
  const double th = q + r.theta_offset;
  const double ct = std::cos(th), st = std::sin(th), ca = std::cos(r.alpha), sa = std::sin(r.alpha);
  Mat4 m;
  m << ct, -st * ca, st * sa, r.a * ct,
       st, ct * ca, -ct * sa, r.a * st,
       0, sa, ca, r.d,
       0, 0, 0, 1;
  return m;
}

namespace detail {

// Frames 0..6 (base, then after each joint) without limit checks.
inline std::array<Mat4, kJoints + 1> frames(const Joints& q, const ArmModel& m) {
  std::array<Mat4, kJoints + 1> f;
  f[0] = Mat4::Identity();
  for (std::size_t i = 0; i < kJoints; ++i) f[i + 1] = f[i] * dh_transform(m.dh[i], q[i]);
  return f;
}

inline Pose fk_unchecked(const Joints& q, const ArmModel& m) { return Pose::from_matrix(frames(q, m)[kJoints]); }

// Geometric Jacobian of the flange, rows (v; w).
inline Eigen::Matrix<double, 6, kJoints> jacobian(const Joints& q, const ArmModel& m) {
  const auto f = frames(q, m);
  const Vec3 pe = f[kJoints].block<3, 1>(0, 3);
  Eigen::Matrix<double, 6, kJoints> j;
  for (std::size_t i = 0; i < kJoints; ++i) {
    const Vec3 z = f[i].block<3, 1>(0, 2);
    const Vec3 p = f[i].block<3, 1>(0, 3);
    j.block<3, 1>(0, static_cast<Eigen::Index>(i)) = z.cross(pe - p);
    j.block<3, 1>(3, static_cast<Eigen::Index>(i)) = z;
  }
  return j;
}

}  // namespace detail

inline Pose fk(const Joints& q, const ArmModel& m = {}) {
  for (std::size_t i = 0; i < kJoints; ++i) {
    if (!(q[i] >= m.limits[i][0] && q[i] <= m.limits[i][1])) {
      throw Error(Errc::JointLimit, "joint " + std::to_string(i + 1) + " outside limits");
    }
  }
  return detail::fk_unchecked(q, m);
}

struct IkOptions {
  int max_iterations = 200;
  double pos_tol_mm = 0.5;
  double rot_tol_deg = 0.1;
  // Iteration continues past the acceptance tolerance down to these, unless
  // it stalls or hits the cap first.
  double converge_pos_mm = 1e-4;
  double converge_rot_deg = 1e-5;
  double damping = 5.0;             // lambda, in mm-equivalent units
  double rot_weight_mm = 100.0;     // mm per rad in the error norm
  double max_step_rad = 0.3;
  int stall_window = 25;            // iterations without 1% improvement
};

struct IkResult {
  Joints q{};
  int iterations = 0;
  double pos_err_mm = 0.0;
  double rot_err_deg = 0.0;
};

inline IkResult ik(const Pose& target, const Joints& seed, const ArmModel& m = {}, const IkOptions& opt = {}) {
  if (!target.translation().allFinite() || !target.rotation().coeffs().allFinite()) {
    throw Error(Errc::InvalidPose, "IK target not finite");
  }
  Joints q = seed;
  for (std::size_t i = 0; i < kJoints; ++i) q[i] = std::clamp(q[i], m.limits[i][0], m.limits[i][1]);

  const Mat3 rt = target.rotation_matrix();
  double lambda = opt.damping;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  for (int it = 0;; ++it) {
    const Pose cur = detail::fk_unchecked(q, m);
    const Vec3 ep = target.translation() - cur.translation();
    const Vec3 er = log_so3(rt * cur.rotation_matrix().transpose());
    const double pe = ep.norm(), re = er.norm() * kRadToDeg;
    const bool accepted = pe <= opt.pos_tol_mm && re <= opt.rot_tol_deg;
    if (pe <= opt.converge_pos_mm && re <= opt.converge_rot_deg) return {q, it, pe, re};
    const double cost = pe + opt.rot_weight_mm * er.norm();
    if (cost < 0.99 * best) {
      best = cost;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (it >= opt.max_iterations || since_best >= opt.stall_window) {
      if (accepted) return {q, it, pe, re};
      throw Error(Errc::IkFailure, std::string(it >= opt.max_iterations ? "IK hit the iteration cap" : "IK stalled") +
                                       " (pos " + std::to_string(pe) + " mm)");
    }

    Eigen::Matrix<double, 6, kJoints> j = detail::jacobian(q, m);
    j.bottomRows<3>() *= opt.rot_weight_mm;
    Vec6 e;
    e << ep, opt.rot_weight_mm * er;
    // Damping fades as the error shrinks so the final approach is Gauss-Newton.
    const double lam = lambda * std::min(1.0, cost / 10.0);
    const Mat6 jjt = j * j.transpose() + lam * lam * Mat6::Identity();
    Vec6 dq = j.transpose() * jjt.ldlt().solve(e);
    const double big = dq.cwiseAbs().maxCoeff();
    if (big > opt.max_step_rad) dq *= opt.max_step_rad / big;

    bool clamped = false;
    for (std::size_t i = 0; i < kJoints; ++i) {
      const double v = q[i] + dq(static_cast<Eigen::Index>(i));
      q[i] = std::clamp(v, m.limits[i][0], m.limits[i][1]);
      clamped = clamped || q[i] != v;
    }
    // Re-damp when a limit bites so the next step does not push into it again.
    lambda = clamped ? std::min(lambda * 2.0, 1e3) : std::max(opt.damping, lambda * 0.5);
  }
}

// ---------------------------------------------------------------------------
// Waypoints

enum class Speed { Fast, Moderate, Slow };

inline std::string_view to_string(Speed s) {
  switch (s) {
    case Speed::Fast: return "fast";
    case Speed::Moderate: return "moderate";
    case Speed::Slow: return "slow";
  }
  return "?";
}

struct SpeedTable {
  double fast = 1.0, moderate = 0.5, slow = 0.2;  // rad/s, joint space
  double operator()(Speed s) const { return s == Speed::Fast ? fast : s == Speed::Moderate ? moderate : slow; }
};

struct GraspOffsets {
  double z_offset = 80.0;
  double z_approach = 30.0;
  double z_gripper = 110.0;
  double z_lift = 80.0;
  double z_return = 40.0;

  void validate() const {
    if (!(z_approach >= 0.0 && z_offset >= z_approach && z_lift >= 0.0 && z_return >= 0.0)) {
      throw Error(Errc::InvalidConfig, "grasp offsets must satisfy z_offset >= z_approach >= 0, z_lift >= 0");
    }
  }
};

struct WaypointSet {
  Pose t_above, t_app, t_grasp, t_lift;
  Pose t_return;  // t_lift raised by z_return, the exit point before going home
  std::array<Speed, 3> descent{Speed::Fast, Speed::Moderate, Speed::Slow};  // ->above, ->app, ->grasp
};

inline WaypointSet synth_waypoints(const Pose& bTo, const GraspOffsets& off, const Quat& current_orientation,
                                   double reach_mm = ArmModel{}.reach_mm) {
  if (!(bTo.translation().norm() <= reach_mm)) {
    throw Error(Errc::OutOfWorkspace, "object beyond " + std::to_string(reach_mm) + " mm reach");
  }
  const Vec3 grasp = bTo.translation() + Vec3(0, 0, off.z_gripper);
  WaypointSet w;
  w.t_grasp = Pose(current_orientation, grasp);
  w.t_app = Pose(current_orientation, grasp + Vec3(0, 0, off.z_approach));
  w.t_above = Pose(current_orientation, grasp + Vec3(0, 0, off.z_offset));
  w.t_lift = Pose(current_orientation, grasp + Vec3(0, 0, off.z_lift));
  w.t_return = Pose(current_orientation, w.t_lift.translation() + Vec3(0, 0, off.z_return));
  return w;
}

// ---------------------------------------------------------------------------
// Execution

enum class Outcome { Grasped, IkFailure, SearchAborted, SafeReturned };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::Grasped: return "Grasped";
    case Outcome::IkFailure: return "IkFailure";
    case Outcome::SearchAborted: return "SearchAborted";
    case Outcome::SafeReturned: return "SafeReturned";
  }
  return "?";
}

enum class Gripper { Open, Closed };

struct Segment {
  std::string label;
  Joints q0{}, q1{};
  double speed = 0.0;  // rad/s; 0 for stationary gripper actions
  double duration = 0.0;
  Gripper gripper = Gripper::Open;  // state during the segment
};

struct ExecConfig {
  SpeedTable speeds;
  double grasp_tolerance_mm = 10.0;
  int max_regrasps = 1;
  double gripper_s = 0.8;          // open or close
  double plan_overhead_s = 0.5;    // fixed planning cost
  double ik_iteration_s = 0.002;   // modelled cost per IK iteration
  double scan_yaw_rad = 0.35;      // search scan sweeps joint 1 by this much
  IkOptions ik;
};

struct ExecutionLog {
  double t_plan = 0.0;
  double t_exec = 0.0;
  Outcome outcome = Outcome::SafeReturned;
  int regrasp_count = 0;
  std::vector<Segment> segments;
  Joints final_q{};
  double tip_error_mm = -1.0;  // at the last closure, -1 if never closed
};

enum class VisionAction { Accept, SearchMode };

namespace detail {

inline void add_move(ExecutionLog& log, const std::string& label, const Joints& a, const Joints& b, double speed,
                     Gripper g) {
  double dmax = 0.0;
  for (std::size_t i = 0; i < kJoints; ++i) dmax = std::max(dmax, std::abs(b[i] - a[i]));
  log.segments.push_back({label, a, b, speed, dmax / speed, g});
}

inline void add_hold(ExecutionLog& log, const std::string& label, const Joints& q, double s, Gripper g) {
  log.segments.push_back({label, q, q, 0.0, s, g});
}

}  // namespace detail

struct ExecRequest {
  WaypointSet waypoints;
  Joints observation{};           // start and end configuration
  Vec3 object_true{};             // ground truth used by the grasp predicate
  VisionAction vision = VisionAction::Accept;
  // Called before a re-grasp. The arm is back at the observation pose; the
  // callback returns fresh waypoints (or none to retry the old ones) and the
  // time the re-detection took. When empty the old waypoints are retried
  // straight from the approach pose.
  struct Refresh {
    std::optional<WaypointSet> waypoints;
    double hold_s = 0.0;
  };
  std::function<Refresh()> refresh;
  const std::atomic<bool>* cancel = nullptr;
};

inline ExecutionLog execute(const ExecRequest& req, const ArmModel& m = {}, const ExecConfig& cfg = {}) {
  ExecutionLog log;
  const Joints obs = req.observation;
  Joints q = obs;
  auto finish = [&](Outcome o) {
    log.outcome = o;
    log.final_q = q;
    log.t_exec = 0.0;
    for (const auto& s : log.segments) log.t_exec += s.duration;
    return log;
  };
  auto cancelled = [&] { return req.cancel && req.cancel->load(); };

  if (req.vision == VisionAction::SearchMode) {
    Joints left = obs, right = obs;
    left[0] = std::clamp(obs[0] + cfg.scan_yaw_rad, m.limits[0][0], m.limits[0][1]);
    right[0] = std::clamp(obs[0] - cfg.scan_yaw_rad, m.limits[0][0], m.limits[0][1]);
    detail::add_move(log, "scan_left", obs, left, cfg.speeds.moderate, Gripper::Open);
    detail::add_move(log, "scan_right", left, right, cfg.speeds.moderate, Gripper::Open);
    detail::add_move(log, "scan_home", right, obs, cfg.speeds.moderate, Gripper::Open);
    return finish(Outcome::SearchAborted);
  }

  int ik_iters = 0;
  using Plan = std::array<Joints, 5>;  // above, app, grasp, lift, return
  auto plan_all = [&](const WaypointSet& w) {
    Plan p{};
    Joints seed = obs;
    const Pose* targets[5] = {&w.t_above, &w.t_app, &w.t_grasp, &w.t_lift, &w.t_return};
    for (std::size_t i = 0; i < 5; ++i) {
      const auto r = ik(*targets[i], seed, m, cfg.ik);
      ik_iters += r.iterations;
      p[i] = r.q;
      seed = r.q;
    }
    return p;
  };
  auto plan_time = [&] { return cfg.plan_overhead_s + cfg.ik_iteration_s * ik_iters; };

  Plan plan;
  try {
    plan = plan_all(req.waypoints);
  } catch (const Error& e) {
    if (e.code() != Errc::IkFailure) throw;
    log.t_plan = plan_time();
    return finish(Outcome::IkFailure);
  }

  const auto& sp = req.waypoints.descent;
  for (int attempt = 0;; ++attempt) {
    if (cancelled()) break;
    detail::add_move(log, "to_above", q, plan[0], cfg.speeds(sp[0]), Gripper::Open);
    detail::add_move(log, "to_app", plan[0], plan[1], cfg.speeds(sp[1]), Gripper::Open);
    detail::add_move(log, "to_grasp", plan[1], plan[2], cfg.speeds(sp[2]), Gripper::Open);
    q = plan[2];
    detail::add_hold(log, "close", q, cfg.gripper_s, Gripper::Closed);
    const Vec3 tip = (detail::fk_unchecked(q, m) * m.tool_offset).translation();
    log.tip_error_mm = (tip - req.object_true).norm();
    if (log.tip_error_mm <= cfg.grasp_tolerance_mm) {
      detail::add_move(log, "lift", q, plan[3], cfg.speeds.moderate, Gripper::Closed);
      detail::add_move(log, "return_up", plan[3], plan[4], cfg.speeds.moderate, Gripper::Closed);
      detail::add_move(log, "return_home", plan[4], obs, cfg.speeds.fast, Gripper::Closed);
      q = obs;
      log.t_plan = plan_time();
      return finish(Outcome::Grasped);
    }
    detail::add_hold(log, "open", q, cfg.gripper_s, Gripper::Open);
    detail::add_move(log, "back_to_app", q, plan[1], cfg.speeds(sp[2]), Gripper::Open);
    q = plan[1];
    if (attempt >= cfg.max_regrasps || cancelled()) break;
    ++log.regrasp_count;
    if (req.refresh) {
      detail::add_move(log, "retreat_above", q, plan[0], cfg.speeds.moderate, Gripper::Open);
      detail::add_move(log, "to_observation", plan[0], obs, cfg.speeds.fast, Gripper::Open);
      q = obs;
      const auto fresh = req.refresh();
      detail::add_hold(log, "redetect", q, fresh.hold_s, Gripper::Open);
      if (fresh.waypoints) {
        try {
          plan = plan_all(*fresh.waypoints);
        } catch (const Error& e) {
          if (e.code() != Errc::IkFailure) throw;
          break;
        }
      }
    }
  }
  // Safe return: clear the object vertically, then home.
  if (q != obs) {
    detail::add_move(log, "retreat_above", q, plan[0], cfg.speeds.moderate, Gripper::Open);
    detail::add_move(log, "return_home", plan[0], obs, cfg.speeds.fast, Gripper::Open);
    q = obs;
  }
  log.t_plan = plan_time();
  return finish(Outcome::SafeReturned);
}

// Joint configuration and gripper state at time t into the segment list.
inline std::pair<Joints, Gripper> joints_at(const ExecutionLog& log, double t) {
  for (const auto& s : log.segments) {
    if (t <= s.duration) {
      const double u = s.duration > 0.0 ? t / s.duration : 1.0;
      Joints q;
      for (std::size_t i = 0; i < kJoints; ++i) q[i] = s.q0[i] + u * (s.q1[i] - s.q0[i]);
      return {q, s.gripper};
    }
    t -= s.duration;
  }
  return {log.final_q, log.segments.empty() ? Gripper::Open : log.segments.back().gripper};
}

inline void write_execution_csv_header(std::ostream& out) { out << "trial,t_plan,t_exec,outcome,regrasps\n"; }

inline void write_execution_csv(std::ostream& out, int trial, const ExecutionLog& log) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,", trial, log.t_plan, log.t_exec);
  out << buf << to_string(log.outcome) << ',' << log.regrasp_count << '\n';
}

}  // namespace bciar::robot
