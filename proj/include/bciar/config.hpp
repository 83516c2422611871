#pragma once

// Experiment configuration. Defaults reproduce the protocols; a JSON file
// overrides any subset of keys. Unknown keys are rejected so typos surface.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bciar/ar_loop.hpp"
#include "bciar/bridge.hpp"
#include "bciar/eeg_sim.hpp"
#include "bciar/error.hpp"
#include "bciar/robot_arm.hpp"
#include "bciar/vision.hpp"

namespace bciar {

struct SubjectConfig {
  std::vector<double> erd_depth{0.30, 0.30, 0.30};  // Left, Right, Lift
  double noise_floor_uv = 3.0;
  double sway_gain = 0.5;
};

struct TrainingConfig {
  int reps_per_command = 12;  // 12-16
  int rounds = 3;
  int validation_reps = 12;   // per command, plus as many Neutral trials
};

struct SceneConfig {
  int n_targets = 4;
  double region_mm = 400.0;      // square, robot base at the middle of the near edge
  double reach_min_mm = 120.0;
  double reach_max_mm = 220.0;
  double min_separation_mm = 60.0;
  double block_height_mm = 25.0;  // marker sits on the block top
  double marker_side_mm = 15.0;
  double layout_sigma_mm = 15.0;  // error of the coarse layout that aims the camera
  double observation_height_mm = 220.0;
};

struct VisionConfig {
  vision::CameraModel camera{300.0, 300.0, 160.0, 120.0, 0, 0, 0, 0, 0, 320, 240};
  double noise_px = 1.0;
  int frames = 10;              // frames per acquisition
  double frame_period_s = 1.0 / 30.0;
  std::vector<double> bias_mm{0.0, 0.0, 0.0};  // injected error on the object estimate, base frame
  bool filter = true;
  vision::FilterConfig filter_cfg{};
  vision::SearchPolicy search{};
  double occlusion_rate = 0.0;
};

struct CalibrationConfig {
  int samples = 12;
  int frames_per_view = 30;  // corner detections averaged per static view
  double board_side_mm = 100.0;
  double view_spread_mm = 100.0;  // lateral spread of the camera around the board
  double rot_noise_deg = 0.05;
  double trans_noise_mm = 0.2;
  std::vector<double> eTc_record{1, 0, 0, 0, 0.0, 45.0, 20.0};  // qw qx qy qz x y z
};

struct ExperimentConfig {
  int experiment = 1;
  std::uint64_t seed = 1;
  int n_subjects = 3;
  int trials_per_subject = 12;            // Exp-3 K
  int trials_per_condition = 70;          // Exp-2, per subject
  int block_size = 10;                    // Exp-2 ITR blocks
  std::vector<std::string> conditions{"NoAr", "Static", "Sham", "Neurofeedback"};
  std::string exp3_condition = "Neurofeedback";
  SubjectConfig subject;
  TrainingConfig training;
  ar::ArConfig ar;
  SceneConfig scene;
  VisionConfig vision;
  CalibrationConfig calibration;
  robot::GraspOffsets offsets{60.0, 30.0, 110.0, 60.0, 20.0};
  robot::ExecConfig exec;
  bridge::LinkConfig link{0.02, 0.01, 0.0};
  int confirm_retries = 3;
  double confirm_timeout_s = 0.5;
  double gsr_floor = 0.8;

  void validate() const {
    if (experiment < 1 || experiment > 3) throw Error(Errc::InvalidConfig, "experiment must be 1, 2 or 3");
    if (n_subjects < 1) throw Error(Errc::InvalidConfig, "n_subjects must be >= 1");
    if (trials_per_subject < 1 || trials_per_condition < 1) throw Error(Errc::InvalidConfig, "trial counts must be >= 1");
    if (block_size < 1) throw Error(Errc::InvalidConfig, "block_size must be >= 1");
    if (training.reps_per_command < 12 || training.reps_per_command > 16) {
      throw Error(Errc::InvalidConfig, "reps_per_command must be in [12,16]");
    }
    if (training.validation_reps < 1) throw Error(Errc::InvalidConfig, "validation_reps must be >= 1");
    if (subject.erd_depth.size() != 3) throw Error(Errc::InvalidConfig, "erd_depth needs 3 values");
    if (scene.n_targets < 3 || scene.n_targets > 5) throw Error(Errc::InvalidConfig, "n_targets must be 3-5");
    if (!(scene.reach_min_mm > 0 && scene.reach_min_mm < scene.reach_max_mm)) {
      throw Error(Errc::InvalidConfig, "reach annulus must satisfy 0 < min < max");
    }
    if (vision.bias_mm.size() != 3) throw Error(Errc::InvalidConfig, "vision.bias_mm needs 3 values");
    if (vision.frames < 1) throw Error(Errc::InvalidConfig, "vision.frames must be >= 1");
    if (calibration.samples < 3) throw Error(Errc::InvalidConfig, "calibration.samples must be >= 3");
    if (calibration.frames_per_view < 1) throw Error(Errc::InvalidConfig, "calibration.frames_per_view must be >= 1");
    if (!(calibration.board_side_mm > 0)) throw Error(Errc::InvalidConfig, "calibration.board_side_mm must be > 0");
    if (calibration.eTc_record.size() != 7) throw Error(Errc::InvalidConfig, "calibration.eTc_record needs 7 values");
    if (experiment == 2) {
      for (auto c : ar::kAllConditions) {
        if (std::find(conditions.begin(), conditions.end(), std::string(ar::to_string(c))) == conditions.end()) {
          throw Error(Errc::InvalidConfig, "Exp-2 needs all four conditions, missing " + std::string(ar::to_string(c)));
        }
      }
    }
    for (const auto& c : conditions) ar::condition_from_string(c);
    ar::condition_from_string(exp3_condition);
    vision.camera.validate();
    vision.filter_cfg.validate();
    offsets.validate();
    profile(0).validate();
  }

  eeg::SubjectProfile profile(int /*subject*/) const {
    eeg::SubjectProfile p;
    for (std::size_t i = 0; i < 3 && i < subject.erd_depth.size(); ++i) p.erd_depth[i] = subject.erd_depth[i];
    p.noise_floor_uv = subject.noise_floor_uv;
    p.sway_gain = subject.sway_gain;
    return p;
  }
};

// ---------------------------------------------------------------------------
// JSON mapping. Every field is listed once in `visit` so reading and writing
// cannot drift apart.

namespace detail {

struct JsonWriter {
  nlohmann::json& j;
  template <typename T>
  void operator()(const char* key, T& v) {
    j[key] = v;
  }
  template <typename F>
  void object(const char* key, F&& f) {
    nlohmann::json sub = nlohmann::json::object();
    JsonWriter w{sub};
    f(w);
    j[key] = sub;
  }
};

struct JsonReader {
  const nlohmann::json& j;
  std::string path;
  std::vector<std::string> seen{};

  template <typename T>
  void operator()(const char* key, T& v) {
    seen.emplace_back(key);
    if (!j.contains(key)) return;
    try {
      v = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::InvalidConfig, "config key " + path + key + ": " + e.what());
    }
  }
  template <typename F>
  void object(const char* key, F&& f) {
    seen.emplace_back(key);
    if (!j.contains(key)) return;
    if (!j.at(key).is_object()) throw Error(Errc::InvalidConfig, "config key " + path + key + " must be an object");
    JsonReader r{j.at(key), path + key + "."};
    f(r);
    r.finish();
  }
  void finish() const {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (std::find(seen.begin(), seen.end(), it.key()) == seen.end()) {
        throw Error(Errc::InvalidConfig, "unknown config key " + path + it.key());
      }
    }
  }
};

template <typename V>
void visit(ExperimentConfig& c, V& v) {
  v("experiment", c.experiment);
  v("seed", c.seed);
  v("n_subjects", c.n_subjects);
  v("trials_per_subject", c.trials_per_subject);
  v("trials_per_condition", c.trials_per_condition);
  v("block_size", c.block_size);
  v("conditions", c.conditions);
  v("exp3_condition", c.exp3_condition);
  v("confirm_retries", c.confirm_retries);
  v("confirm_timeout_s", c.confirm_timeout_s);
  v("gsr_floor", c.gsr_floor);
  v.object("subject", [&](auto& s) {
    s("erd_depth", c.subject.erd_depth);
    s("noise_floor_uv", c.subject.noise_floor_uv);
    s("sway_gain", c.subject.sway_gain);
  });
  v.object("training", [&](auto& s) {
    s("reps_per_command", c.training.reps_per_command);
    s("rounds", c.training.rounds);
    s("validation_reps", c.training.validation_reps);
  });
  v.object("ar", [&](auto& s) {
    s("prepare_s", c.ar.prepare_s);
    s("decide_s", c.ar.decide_s);
    s("lift_entry_s", c.ar.lift_entry_s);
    s("lift_dwell_s", c.ar.lift_dwell_s);
    s("lift_grace_s", c.ar.lift_grace_s);
    s("confirm_window_s", c.ar.confirm_window_s);
    s("omega", c.ar.omega);
    s("amplitude", c.ar.amplitude);
    s("visible_sway", c.ar.visible_sway);
    s("dwell_threshold", c.ar.dwell.threshold);
    s("dwell_s", c.ar.dwell.dwell_s);
    s("refractory_s", c.ar.dwell.refractory_s);
  });
  v.object("scene", [&](auto& s) {
    s("n_targets", c.scene.n_targets);
    s("region_mm", c.scene.region_mm);
    s("reach_min_mm", c.scene.reach_min_mm);
    s("reach_max_mm", c.scene.reach_max_mm);
    s("min_separation_mm", c.scene.min_separation_mm);
    s("block_height_mm", c.scene.block_height_mm);
    s("marker_side_mm", c.scene.marker_side_mm);
    s("layout_sigma_mm", c.scene.layout_sigma_mm);
    s("observation_height_mm", c.scene.observation_height_mm);
  });
  v.object("vision", [&](auto& s) {
    s("fx", c.vision.camera.fx);
    s("fy", c.vision.camera.fy);
    s("cx", c.vision.camera.cx);
    s("cy", c.vision.camera.cy);
    s("k1", c.vision.camera.k1);
    s("k2", c.vision.camera.k2);
    s("k3", c.vision.camera.k3);
    s("p1", c.vision.camera.p1);
    s("p2", c.vision.camera.p2);
    s("width", c.vision.camera.width);
    s("height", c.vision.camera.height);
    s("noise_px", c.vision.noise_px);
    s("frames", c.vision.frames);
    s("frame_period_s", c.vision.frame_period_s);
    s("bias_mm", c.vision.bias_mm);
    s("filter", c.vision.filter);
    s("ema_alpha", c.vision.filter_cfg.ema_alpha);
    s("median_window", c.vision.filter_cfg.median_window);
    s("max_retries", c.vision.search.max_retries);
    s("reproj_threshold_px", c.vision.search.reproj_threshold_px);
    s("occlusion_rate", c.vision.occlusion_rate);
  });
  v.object("calibration", [&](auto& s) {
    s("samples", c.calibration.samples);
    s("frames_per_view", c.calibration.frames_per_view);
    s("board_side_mm", c.calibration.board_side_mm);
    s("view_spread_mm", c.calibration.view_spread_mm);
    s("rot_noise_deg", c.calibration.rot_noise_deg);
    s("trans_noise_mm", c.calibration.trans_noise_mm);
    s("eTc_record", c.calibration.eTc_record);
  });
  v.object("offsets", [&](auto& s) {
    s("z_offset", c.offsets.z_offset);
    s("z_approach", c.offsets.z_approach);
    s("z_gripper", c.offsets.z_gripper);
    s("z_lift", c.offsets.z_lift);
    s("z_return", c.offsets.z_return);
  });
  v.object("exec", [&](auto& s) {
    s("speed_fast", c.exec.speeds.fast);
    s("speed_moderate", c.exec.speeds.moderate);
    s("speed_slow", c.exec.speeds.slow);
    s("grasp_tolerance_mm", c.exec.grasp_tolerance_mm);
    s("max_regrasps", c.exec.max_regrasps);
    s("gripper_s", c.exec.gripper_s);
    s("plan_overhead_s", c.exec.plan_overhead_s);
    s("ik_iteration_s", c.exec.ik_iteration_s);
  });
  v.object("link", [&](auto& s) {
    s("latency_s", c.link.latency_s);
    s("jitter_s", c.link.jitter_s);
    s("loss", c.link.loss);
  });
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  nlohmann::json j = nlohmann::json::object();
  detail::JsonWriter w{j};
  detail::visit(c, w);
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
  if (!j.is_object()) throw Error(Errc::InvalidConfig, "config root must be a JSON object");
  detail::JsonReader r{j, ""};
  detail::visit(base, r);
  r.finish();
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::InvalidConfig, "cannot open config " + path);
  try {
    return config_from_json(nlohmann::json::parse(in), base);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::InvalidConfig, "config " + path + ": " + e.what());
  }
}

}  // namespace bciar
