#pragma once

// Eye-in-hand calibration. Each sample pairs the flange pose bTe (forward
// kinematics) with the camera->target pose cTt (PnP). The target is fixed in
// the base frame, so bTe_i * X * cTt_i is constant and consecutive samples give
// A X = X B with
//   A = bTe_j^-1 bTe_i,   B = cTt_j cTt_i^-1.
// Rotation comes from the null vector of the stacked quaternion constraints,
// translation from linear least squares on (R_A - I) t_X = R_X t_B - t_A.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bciar/error.hpp"
#include "bciar/geom.hpp"
#include "bciar/vision.hpp"

namespace bciar::handeye {

struct CalibrationSample {
  Pose bTe;
  Pose cTt;
  std::optional<vision::Detection> detection;  // raw corners, if the capture kept them
};

struct CalibrationReport {
  Pose eTc;
  double mean_reproj_px = 0.0;
  double repeatability_mm = 0.0;
  int n_motions = 0;
  Pose bTt;  // target pose in base implied by the solution
};

struct CalibrationOptions {
  double min_axis_separation_deg = 5.0;
  double min_rotation_deg = 1.0;  // motions rotating less than this carry no axis
  vision::CameraModel camera;
  vision::FiducialMarker target;
};

namespace detail {

inline Eigen::Matrix4d left_mult(const Quat& q) {
  Eigen::Matrix4d m;
  // Quaternion product p*x as a matrix acting on x = (w, x, y, z).
  m << q.w(), -q.x(), -q.y(), -q.z(),
       q.x(),  q.w(), -q.z(),  q.y(),
       q.y(),  q.z(),  q.w(), -q.x(),
       q.z(), -q.y(),  q.x(),  q.w();
  return m;
}

inline Eigen::Matrix4d right_mult(const Quat& q) {
  Eigen::Matrix4d m;
  // x*q as a matrix acting on x.
  m << q.w(), -q.x(), -q.y(), -q.z(),
       q.x(),  q.w(),  q.z(), -q.y(),
       q.y(), -q.z(),  q.w(),  q.x(),
       q.z(),  q.y(), -q.x(),  q.w();
  return m;
}

inline double axis_separation_deg(const Vec3& a, const Vec3& b) {
  // Axes are lines: a and -a count as parallel.
  const double c = std::abs(a.normalized().dot(b.normalized()));
  const double s = a.normalized().cross(b.normalized()).norm();
  return std::atan2(s, c) * kRadToDeg;
}

struct Motion {
  Pose a, b;
};

}  // namespace detail

// RMS distance of the translations to their centroid.
inline double repeatability(const std::vector<Pose>& poses) {
  if (poses.size() < 2) throw Error(Errc::TooFewSamples, "repeatability needs at least 2 poses");
  Vec3 c = Vec3::Zero();
  for (const auto& p : poses) c += p.translation();
  c /= static_cast<double>(poses.size());
  double ss = 0.0;
  for (const auto& p : poses) ss += (p.translation() - c).squaredNorm();
  return std::sqrt(ss / static_cast<double>(poses.size()));
}

// Chordal mean of rotations plus mean translation.
inline Pose average_pose(const std::vector<Pose>& poses) {
  Eigen::Matrix4d acc = Eigen::Matrix4d::Zero();
  Vec3 t = Vec3::Zero();
  for (const auto& p : poses) {
    const Eigen::Vector4d q = p.rotation().coeffs();
    acc += q * q.transpose();
    t += p.translation();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(acc);
  const Eigen::Vector4d v = es.eigenvectors().col(3);
  return Pose(Quat(v(3), v(0), v(1), v(2)), t / static_cast<double>(poses.size()));
}

inline CalibrationReport calibrate(const std::vector<CalibrationSample>& samples, const CalibrationOptions& opt = {}) {
  if (samples.size() < 3) throw Error(Errc::TooFewSamples, "calibration needs at least 3 samples");

  std::vector<detail::Motion> motions;
  std::vector<Vec3> axes;
  for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
    const auto& s0 = samples[i];
    const auto& s1 = samples[i + 1];
    detail::Motion m{s1.bTe.inverse() * s0.bTe, s1.cTt * s0.cTt.inverse()};
    motions.push_back(m);
    const Eigen::AngleAxisd aa(m.a.rotation());
    if (aa.angle() * kRadToDeg > opt.min_rotation_deg) axes.push_back(aa.axis());
  }

  bool spread = false;
  for (std::size_t i = 0; i < axes.size() && !spread; ++i) {
    for (std::size_t j = i + 1; j < axes.size(); ++j) {
      if (detail::axis_separation_deg(axes[i], axes[j]) >= opt.min_axis_separation_deg) {
        spread = true;
        break;
      }
    }
  }
  if (!spread) {
    throw Error(Errc::DegenerateMotions, "motion set needs two rotation axes at least " +
                                             std::to_string(opt.min_axis_separation_deg) + " deg apart");
  }

  // qA * qX = qX * qB  ->  (L(qA) - R(qB)) qX = 0.
  Eigen::MatrixXd m(4 * motions.size(), 4);
  for (std::size_t k = 0; k < motions.size(); ++k) {
    Quat qa = motions[k].a.rotation();
    Quat qb = motions[k].b.rotation();
    if (qa.w() < 0) qa.coeffs() *= -1.0;
    if (qb.w() < 0) qb.coeffs() *= -1.0;
    m.block<4, 4>(static_cast<Eigen::Index>(4 * k), 0) = detail::left_mult(qa) - detail::right_mult(qb);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
  const Eigen::Vector4d x = svd.matrixV().col(3);
  const Quat qx(x(0), x(1), x(2), x(3));
  const Mat3 rx = qx.normalized().toRotationMatrix();

  Eigen::MatrixXd c(3 * motions.size(), 3);
  Eigen::VectorXd d(3 * motions.size());
  for (std::size_t k = 0; k < motions.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(3 * k);
    c.block<3, 3>(r, 0) = motions[k].a.rotation_matrix() - Mat3::Identity();
    d.segment<3>(r) = rx * motions[k].b.translation() - motions[k].a.translation();
  }
  const Vec3 tx = c.colPivHouseholderQr().solve(d);

  CalibrationReport rep;
  rep.eTc = Pose(qx, tx);
  rep.n_motions = static_cast<int>(motions.size());

  std::vector<Pose> targets;
  for (const auto& s : samples) targets.push_back(s.bTe * rep.eTc * s.cTt);
  rep.bTt = average_pose(targets);
  rep.repeatability_mm = repeatability(targets);

  // Reprojection: the target pose implied by the solution, mapped back into
  // each camera frame and compared against the corners that were measured
  // (or, if the sample carries none, against the projection of its cTt).
  double acc = 0.0;
  for (const auto& s : samples) {
    const Pose predicted = (s.bTe * rep.eTc).inverse() * rep.bTt;
    vision::Detection ref;
    if (s.detection) {
      ref = *s.detection;
    } else {
      const auto corners = opt.target.corners();
      for (std::size_t i = 0; i < 4; ++i) ref.corners[i] = opt.camera.project(s.cTt.apply(corners[i]));
    }
    acc += vision::mean_reprojection_error(predicted, ref, opt.target, opt.camera);
  }
  rep.mean_reproj_px = acc / static_cast<double>(samples.size());
  return rep;
}

// Key-value text: one key per line, pose as a 7-number record.
inline void save_calibration(std::ostream& out, const CalibrationReport& r) {
  char buf[64];
  out << "format bciar-handeye 1\n";
  out << "eTc " << format_record(r.eTc) << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", r.mean_reproj_px);
  out << "mean_reproj_px " << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", r.repeatability_mm);
  out << "repeatability_mm " << buf << "\n";
  out << "n_motions " << r.n_motions << "\n";
}

inline CalibrationReport load_calibration(std::istream& in) {
  CalibrationReport r;
  std::string line;
  bool header = false, pose = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string val = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "format") {
      if (val != "bciar-handeye 1") throw Error(Errc::ParseError, "unknown calibration format: " + val);
      header = true;
    } else if (key == "eTc") {
      r.eTc = parse_record(val);
      pose = true;
    } else if (key == "mean_reproj_px") {
      r.mean_reproj_px = std::stod(val);
    } else if (key == "repeatability_mm") {
      r.repeatability_mm = std::stod(val);
    } else if (key == "n_motions") {
      r.n_motions = std::stoi(val);
    } else {
      throw Error(Errc::ParseError, "unknown calibration key: " + key);
    }
  }
  if (!header || !pose) throw Error(Errc::ParseError, "calibration file missing format or eTc");
  return r;
}

}  // namespace bciar::handeye
