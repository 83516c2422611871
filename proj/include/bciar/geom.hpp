#pragma once

// Rigid-body poses and frame chaining.
//
// A Pose stores a unit quaternion and a translation in millimeters. Public
// helpers take degrees; radians are used internally. Framed poses carry the
// parent/child frame tags so that chains like base <- flange <- camera <- object
// are checked at composition time.

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "bciar/error.hpp"

namespace bciar {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Quat = Eigen::Quaterniond;

class Pose {
 public:
  Pose() : q_(Quat::Identity()), t_(Vec3::Zero()) {}

  // Normalizes q. Throws InvalidPose for zero or non-finite input.
  Pose(const Quat& q, const Vec3& t_mm) : q_(q), t_(t_mm) {
    const double n = q_.norm();
    if (!std::isfinite(n) || n < 1e-12 || !t_.allFinite()) {
      throw Error(Errc::InvalidPose, "quaternion must be finite and non-zero");
    }
    q_.coeffs() /= n;
  }

  static Pose identity() { return {}; }
  static Pose from_translation(double x, double y, double z) { return {Quat::Identity(), Vec3(x, y, z)}; }
  static Pose from_translation(const Vec3& t) { return {Quat::Identity(), t}; }
  static Pose from_axis_angle_deg(const Vec3& axis, double deg, const Vec3& t = Vec3::Zero()) {
    return {Quat(Eigen::AngleAxisd(deg * kDegToRad, axis.normalized())), t};
  }
  static Pose rot_x_deg(double deg) { return from_axis_angle_deg(Vec3::UnitX(), deg); }
  static Pose rot_y_deg(double deg) { return from_axis_angle_deg(Vec3::UnitY(), deg); }
  static Pose rot_z_deg(double deg) { return from_axis_angle_deg(Vec3::UnitZ(), deg); }

  // Projects the rotation block onto SO(3) before conversion.
  static Pose from_matrix(const Mat4& m) {
    Eigen::JacobiSVD<Mat3> svd(m.topLeftCorner<3, 3>(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
      Mat3 u = svd.matrixU();
      u.col(2) *= -1.0;
      r = u * svd.matrixV().transpose();
    }
    return {Quat(r), m.topRightCorner<3, 1>()};
  }
  static Pose from_rotation(const Mat3& r, const Vec3& t) {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r;
    m.topRightCorner<3, 1>() = t;
    return from_matrix(m);
  }

  const Quat& rotation() const { return q_; }
  const Vec3& translation() const { return t_; }
  Mat3 rotation_matrix() const { return q_.toRotationMatrix(); }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = q_.toRotationMatrix();
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

  Vec3 apply(const Vec3& p) const { return q_ * p + t_; }

  Pose inverse() const {
    const Quat qi = q_.conjugate();
    return {qi, -(qi * t_)};
  }

  // Matrix-product semantics: (a * b).apply(p) == a.apply(b.apply(p)).
  friend Pose operator*(const Pose& a, const Pose& b) {
    return {a.q_ * b.q_, a.q_ * b.t_ + a.t_};
  }

  // [qw,qx,qy,qz,tx,ty,tz]
  std::array<double, 7> to_record() const {
    return {q_.w(), q_.x(), q_.y(), q_.z(), t_.x(), t_.y(), t_.z()};
  }
  static Pose from_record(const std::array<double, 7>& r) {
    return {Quat(r[0], r[1], r[2], r[3]), Vec3(r[4], r[5], r[6])};
  }

 private:
  Quat q_;
  Vec3 t_;
};

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }
inline Pose invert(const Pose& p) { return p.inverse(); }

// Geodesic angle between two rotations, degrees. atan2 keeps resolution for
// tiny angles where acos of the dot product saturates.
inline double rotation_angle_deg(const Quat& a, const Quat& b) {
  const Quat d = a.conjugate() * b;
  return 2.0 * std::atan2(d.vec().norm(), std::abs(d.w())) * kRadToDeg;
}

inline double translation_distance(const Pose& a, const Pose& b) {
  return (a.translation() - b.translation()).norm();
}

// Rotation vector (axis * angle, radians) of R.
inline Vec3 log_so3(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.axis() * aa.angle();
}

inline Mat3 exp_so3(const Vec3& w) {
  const double a = w.norm();
  if (a < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(a, w / a).toRotationMatrix();
}

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

inline std::string format_record(const Pose& p) {
  const auto r = p.to_record();
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < r.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", r[i]);
    if (i) out += ',';
    out += buf;
  }
  return out;
}

inline Pose parse_record(std::string_view text) {
  std::array<double, 7> r{};
  std::string s(text);
  for (char& c : s) {
    if (c == ',' || c == '[' || c == ']') c = ' ';
  }
  std::istringstream in(s);
  for (double& v : r) {
    if (!(in >> v)) throw Error(Errc::ParseError, "pose record needs 7 numbers: " + std::string(text));
  }
  std::string extra;
  if (in >> extra) throw Error(Errc::ParseError, "trailing data in pose record: " + std::string(text));
  return Pose::from_record(r);
}

enum class Frame { Base, EndEffector, Camera, Object };

inline std::string_view to_string(Frame f) {
  switch (f) {
    case Frame::Base: return "B";
    case Frame::EndEffector: return "E";
    case Frame::Camera: return "C";
    case Frame::Object: return "O";
  }
  return "?";
}

// ^parent T_child
struct FramedPose {
  Pose pose;
  Frame parent;
  Frame child;
};

inline FramedPose compose(const FramedPose& a, const FramedPose& b) {
  if (a.child != b.parent) {
    throw Error(Errc::FrameMismatch, std::string("cannot chain ") + std::string(to_string(a.parent)) + "<-" +
                                         std::string(to_string(a.child)) + " with " +
                                         std::string(to_string(b.parent)) + "<-" + std::string(to_string(b.child)));
  }
  return {a.pose * b.pose, a.parent, b.child};
}

// ^B T_O = ^B T_E * ^E T_C * ^C T_O
inline FramedPose chain_base_object(const FramedPose& bTe, const FramedPose& eTc, const FramedPose& cTo) {
  if (bTe.parent != Frame::Base || bTe.child != Frame::EndEffector || eTc.parent != Frame::EndEffector ||
      eTc.child != Frame::Camera || cTo.parent != Frame::Camera || cTo.child != Frame::Object) {
    throw Error(Errc::FrameMismatch, "expected B<-E, E<-C, C<-O");
  }
  return compose(compose(bTe, eTc), cTo);
}

}  // namespace bciar
