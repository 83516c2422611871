#pragma once

// Robot side of a closed-loop grasp trial: tabletop scene, hand-eye capture,
// observation pose, marker acquisition with the retry supervisor and pose
// filter, waypoint planning and execution.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bciar/config.hpp"
#include "bciar/handeye.hpp"
#include "bciar/rng.hpp"
#include "bciar/robot_arm.hpp"
#include "bciar/vision.hpp"

namespace bciar::pipeline {

struct SceneObject {
  int target_id = 0;
  int marker_id = 0;
  Pose bTo;         // marker frame on the block top, z up
  Vec3 layout_mm;   // coarse layout position used to aim the camera
};

// Objects are listed in AR lane order, left to right as seen from behind the
// robot (decreasing base y).
struct Scene {
  std::vector<SceneObject> objects;
  const SceneObject& by_target(int id) const {
    for (const auto& o : objects) {
      if (o.target_id == id) return o;
    }
    throw Error(Errc::InvalidArgument, "no object with target id " + std::to_string(id));
  }
  std::vector<ar::Target> targets() const {
    std::vector<ar::Target> t;
    for (const auto& o : objects) t.push_back({o.target_id, o.marker_id});
    return t;
  }
};

// Uniform placement in the square region (base at the middle of its near
// edge), restricted to the reachable annulus, with a minimum separation.
inline Scene make_scene(const SceneConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5CE4Eu));
  const double half = cfg.region_mm / 2.0;
  std::vector<Vec3> pts;
  for (int attempt = 0; pts.size() < static_cast<std::size_t>(cfg.n_targets); ++attempt) {
    if (attempt > 100000) throw Error(Errc::InvalidConfig, "cannot place objects with the configured separation");
    const Vec3 p(rng.uniform(0.0, cfg.region_mm), rng.uniform(-half, half), cfg.block_height_mm);
    const double r = std::hypot(p.x(), p.y());
    if (r < cfg.reach_min_mm || r > cfg.reach_max_mm) continue;
    bool ok = true;
    for (const auto& q : pts) ok = ok && std::hypot(p.x() - q.x(), p.y() - q.y()) >= cfg.min_separation_mm;
    if (ok) pts.push_back(p);
  }
  std::sort(pts.begin(), pts.end(), [](const Vec3& a, const Vec3& b) { return a.y() > b.y(); });
  Scene s;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    SceneObject o;
    o.target_id = static_cast<int>(i);
    o.marker_id = 10 + static_cast<int>(i);
    o.bTo = Pose(Quat(Eigen::AngleAxisd(rng.uniform(-std::numbers::pi, std::numbers::pi), Vec3::UnitZ())), pts[i]);
    o.layout_mm = pts[i] + Vec3(rng.normal(0, cfg.layout_sigma_mm), rng.normal(0, cfg.layout_sigma_mm), 0.0);
    s.objects.push_back(o);
  }
  return s;
}

// Flange pointing straight down, yawed toward the bearing of `p`.
inline Quat top_down(const Vec3& p) {
  const Quat down(Mat3{{1, 0, 0}, {0, -1, 0}, {0, 0, -1}});
  return Quat(Eigen::AngleAxisd(std::atan2(p.y(), p.x()), Vec3::UnitZ())) * down;
}

// Flange pose that puts the camera straight above `p` at the configured height.
inline Pose observation_pose(const Vec3& p, const Pose& eTc, double height_mm) {
  const Quat q = top_down(p);
  const Vec3 cam_offset = q * eTc.translation();
  return Pose(q, Vec3(p.x() - cam_offset.x(), p.y() - cam_offset.y(), height_mm));
}

inline const robot::Joints& home_joints() {
  static const robot::Joints q{0.0, 0.0, -1.0, -0.5, 0.0, 0.0};
  return q;
}

// ---------------------------------------------------------------------------
// Hand-eye capture against a fixed calibration board.

inline handeye::CalibrationReport calibrate_hand_eye(const ExperimentConfig& cfg, const Pose& eTc_true,
                                                     std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xCA1Bu));
  const auto& cc = cfg.calibration;
  const vision::FiducialMarker board{99, cc.board_side_mm};
  const Pose bTt = Pose::from_translation(170.0, 0.0, 0.0);
  handeye::CalibrationOptions opt;
  opt.camera = cfg.vision.camera;
  opt.target = board;
  std::vector<handeye::CalibrationSample> samples;
  for (int attempt = 0; static_cast<int>(samples.size()) < cc.samples; ++attempt) {
    if (attempt > 20 * cc.samples) throw Error(Errc::InvalidConfig, "calibration views never see the board");
    // Camera above the board, looking at it from the side and rolled.
    const double s = cc.view_spread_mm;
    const Vec3 eye(170.0 + rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(200, 260));
    const Vec3 z = (bTt.translation() + Vec3(rng.uniform(-20, 20), rng.uniform(-20, 20), 0) - eye).normalized();
    const Vec3 x = z.cross(Vec3::UnitY()).normalized();
    Mat3 r;
    r.col(0) = x;
    r.col(1) = z.cross(x);
    r.col(2) = z;
    const Pose bTc = Pose::from_rotation(r * exp_so3(Vec3(0, 0, rng.uniform(-0.8, 0.8))), eye);
    const Pose cTt_true = bTc.inverse() * bTt;
    // The view is static, so corners are averaged over the frames.
    vision::Detection det;
    det.marker_id = board.marker_id;
    for (auto& c : det.corners) c.setZero();
    bool seen = true;
    for (int f = 0; f < cc.frames_per_view && seen; ++f) {
      const auto obs = vision::project_marker(cTt_true, board, cfg.vision.camera, cfg.vision.noise_px, rng);
      const auto* d = std::get_if<vision::Detection>(&obs);
      if (!d) {
        seen = false;
        break;
      }
      for (std::size_t i = 0; i < 4; ++i) det.corners[i] += d->corners[i] / cc.frames_per_view;
    }
    if (!seen) continue;
    vision::PnpResult pnp;
    try {
      pnp = vision::solve_pnp(det, board, cfg.vision.camera);
    } catch (const Error&) {
      continue;
    }
    const double sr = cc.rot_noise_deg * kDegToRad, st = cc.trans_noise_mm;
    const Pose bTe_true = bTc * eTc_true.inverse();
    const Pose bTe(bTe_true.rotation() * Quat(exp_so3(Vec3(rng.normal(0, sr), rng.normal(0, sr), rng.normal(0, sr)))),
                   bTe_true.translation() + Vec3(rng.normal(0, st), rng.normal(0, st), rng.normal(0, st)));
    samples.push_back({bTe, pnp.cTo, det});
  }
  return handeye::calibrate(samples, opt);
}

// ---------------------------------------------------------------------------
// Per-trial robot side.

enum class FailureClass { None, EegMisclassification, ArRobotMappingError, VisionFailure, IkFailure, Timeout };

inline std::string_view to_string(FailureClass f) {
  switch (f) {
    case FailureClass::None: return "";
    case FailureClass::EegMisclassification: return "EegMisclassification";
    case FailureClass::ArRobotMappingError: return "ArRobotMappingError";
    case FailureClass::VisionFailure: return "VisionFailure";
    case FailureClass::IkFailure: return "IkFailure";
    case FailureClass::Timeout: return "Timeout";
  }
  return "?";
}

struct Acquisition {
  std::optional<Pose> cTo;  // empty when the supervisor fell back to search
  double duration_s = 0.0;
  int frames = 0;
  int rejected = 0;
};

// Reads frames until `cfg.frames` are accepted (through the filter when
// enabled) or the supervisor demands search mode.
inline Acquisition acquire(const Pose& cTo_true, const vision::FiducialMarker& marker, const VisionConfig& cfg,
                           Rng& rng) {
  Acquisition a;
  vision::DetectionSupervisor sup(cfg.search);
  vision::PoseFilter filter(cfg.filter ? cfg.filter_cfg : vision::FilterConfig::disabled());
  int accepted = 0;
  while (accepted < cfg.frames) {
    ++a.frames;
    a.duration_s += cfg.frame_period_s;
    const bool occlude = cfg.occlusion_rate > 0.0 && rng.bernoulli(cfg.occlusion_rate);
    auto obs = vision::project_marker(cTo_true, marker, cfg.camera, cfg.noise_px, rng, occlude);
    std::optional<Pose> est;
    if (auto* det = std::get_if<vision::Detection>(&obs)) {
      try {
        const auto r = vision::solve_pnp(*det, marker, cfg.camera);
        det->reprojection_error = r.reproj_err;
        est = r.cTo;
      } catch (const Error&) {
        obs = vision::Occluded{marker.marker_id, "pnp failed"};
      }
    }
    const auto act = sup.next(obs);
    if (act.kind == vision::Action::SearchMode) return a;
    if (act.kind == vision::Action::Retry) {
      ++a.rejected;
      continue;
    }
    a.cTo = filter.push(*est);
    ++accepted;
  }
  return a;
}

struct RobotTrial {
  robot::ExecutionLog exec;
  FailureClass failure = FailureClass::None;
  double t_plan = 0.0;  // observation move + acquisition + planning
  double t_exec = 0.0;
  double estimate_error_mm = -1.0;  // |bTo_est - bTo_true| of the first acquisition
  robot::Joints observation{};
  robot::Joints home{};
  double to_observation_s = 0.0;
};

struct RobotContext {
  const ExperimentConfig& cfg;
  const robot::ArmModel& arm;
  const Pose& eTc_true;
  const Pose& eTc_est;
};

inline RobotTrial run_robot_side(const RobotContext& ctx, const SceneObject& obj, std::uint64_t seed) {
  const auto& cfg = ctx.cfg;
  Rng rng(derive_seed(seed, 0x0B07u));
  RobotTrial out;
  out.home = home_joints();

  // Move to the observation pose above the coarse layout position, pulled
  // back into the reachable annulus.
  Vec3 aim = obj.layout_mm;
  const double r = std::hypot(aim.x(), aim.y());
  if (r > 0.0) {
    const double rc = std::clamp(r, cfg.scene.reach_min_mm, cfg.scene.reach_max_mm);
    aim.x() *= rc / r;
    aim.y() *= rc / r;
  }
  const Pose obs_flange = observation_pose(aim, ctx.eTc_est, cfg.scene.observation_height_mm);
  robot::Joints q0 = out.home;
  q0[0] = std::atan2(obs_flange.translation().y(), obs_flange.translation().x());
  robot::IkResult obs_ik;
  try {
    obs_ik = robot::ik(obs_flange, q0, ctx.arm, cfg.exec.ik);
  } catch (const Error& e) {
    if (e.code() != Errc::IkFailure) throw;
    out.failure = FailureClass::IkFailure;
    out.exec.outcome = robot::Outcome::IkFailure;
    out.exec.final_q = out.home;
    out.t_plan = cfg.exec.plan_overhead_s;
    return out;
  }
  out.observation = obs_ik.q;
  double dmax = 0.0;
  for (std::size_t i = 0; i < robot::kJoints; ++i) dmax = std::max(dmax, std::abs(obs_ik.q[i] - out.home[i]));
  out.to_observation_s = dmax / cfg.exec.speeds.fast;

  const vision::FiducialMarker marker{obj.marker_id, cfg.scene.marker_side_mm};
  const Vec3 bias(cfg.vision.bias_mm[0], cfg.vision.bias_mm[1], cfg.vision.bias_mm[2]);
  const Pose bTf_obs = robot::fk(obs_ik.q, ctx.arm);

  auto estimate_from = [&](const robot::Joints& q, Acquisition& acq) -> std::optional<Pose> {
    const Pose bTf = robot::fk(q, ctx.arm);
    const Pose cTo_true = (bTf * ctx.eTc_true).inverse() * obj.bTo;
    acq = acquire(cTo_true, marker, cfg.vision, rng);
    if (!acq.cTo) return std::nullopt;
    const Pose est = bTf * ctx.eTc_est * *acq.cTo;
    return Pose(est.rotation(), est.translation() + bias);
  };

  Acquisition first;
  const auto bTo_est = estimate_from(obs_ik.q, first);
  const double plan_base = cfg.exec.plan_overhead_s + out.to_observation_s + first.duration_s;

  robot::ExecRequest req;
  req.observation = obs_ik.q;
  req.object_true = obj.bTo.translation();
  if (!bTo_est) {
    req.vision = robot::VisionAction::SearchMode;
    out.exec = robot::execute(req, ctx.arm, cfg.exec);
    out.failure = FailureClass::VisionFailure;
    out.t_plan = plan_base;
    out.t_exec = out.exec.t_exec;
    return out;
  }
  out.estimate_error_mm = (bTo_est->translation() - obj.bTo.translation()).norm();
  try {
    req.waypoints = robot::synth_waypoints(*bTo_est, cfg.offsets, bTf_obs.rotation(), ctx.arm.reach_mm);
  } catch (const Error& e) {
    if (e.code() != Errc::OutOfWorkspace) throw;
    out.failure = FailureClass::IkFailure;
    out.exec.outcome = robot::Outcome::IkFailure;
    out.exec.final_q = obs_ik.q;
    out.t_plan = plan_base;
    return out;
  }
  // Re-grasp re-acquires from the observation pose with the same pipeline.
  req.refresh = [&]() {
    robot::ExecRequest::Refresh r;
    Acquisition again;
    const auto est = estimate_from(obs_ik.q, again);
    r.hold_s = again.duration_s;
    if (est) {
      try {
        r.waypoints = robot::synth_waypoints(*est, cfg.offsets, bTf_obs.rotation(), ctx.arm.reach_mm);
      } catch (const Error& e) {
        if (e.code() != Errc::OutOfWorkspace) throw;
      }
    }
    return r;
  };
  out.exec = robot::execute(req, ctx.arm, cfg.exec);
  out.t_plan = plan_base + out.exec.t_plan;
  out.t_exec = out.exec.t_exec;
  switch (out.exec.outcome) {
    case robot::Outcome::Grasped: out.failure = FailureClass::None; break;
    case robot::Outcome::IkFailure: out.failure = FailureClass::IkFailure; break;
    case robot::Outcome::SearchAborted:
    case robot::Outcome::SafeReturned: out.failure = FailureClass::VisionFailure; break;
  }
  return out;
}

}  // namespace bciar::pipeline
