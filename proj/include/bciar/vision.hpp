#pragma once

// Fiducial vision: pinhole camera with 5-coefficient distortion, synthetic
// marker-corner observations, planar PnP (homography init + LM refinement),
// temporal pose filtering and the retry / search-mode supervisor.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "bciar/error.hpp"
#include "bciar/geom.hpp"
#include "bciar/rng.hpp"

namespace bciar::vision {

struct CameraModel {
  double fx = 600.0, fy = 600.0;
  double cx = 320.0, cy = 240.0;
  double k1 = 0.0, k2 = 0.0, k3 = 0.0;  // radial
  double p1 = 0.0, p2 = 0.0;            // tangential
  int width = 640, height = 480;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw Error(Errc::InvalidConfig, "focal lengths must be positive");
    if (!(cx > 0.0 && cx < width && cy > 0.0 && cy < height)) {
      throw Error(Errc::InvalidConfig, "principal point must lie inside the image");
    }
  }

  bool has_distortion() const { return k1 != 0.0 || k2 != 0.0 || k3 != 0.0 || p1 != 0.0 || p2 != 0.0; }

  // Normalized undistorted -> normalized distorted (Brown-Conrady).
  Vec2 distort(const Vec2& n) const {
    const double x = n.x(), y = n.y();
    const double r2 = x * x + y * y;
    const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
    return {x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y};
  }

  // Inverse of distort by fixed-point iteration.
  Vec2 undistort(const Vec2& d) const {
    if (!has_distortion()) return d;
    Vec2 n = d;
    for (int i = 0; i < 50; ++i) {
      const Vec2 err = distort(n) - d;
      n -= err;
      if (err.norm() < 1e-15) break;
    }
    return n;
  }

  Vec2 to_pixel(const Vec2& normalized_distorted) const {
    return {fx * normalized_distorted.x() + cx, fy * normalized_distorted.y() + cy};
  }

  Vec2 to_normalized(const Vec2& px) const { return {(px.x() - cx) / fx, (px.y() - cy) / fy}; }

  // Camera-frame point -> pixel, distortion applied.
  Vec2 project(const Vec3& p) const { return to_pixel(distort({p.x() / p.z(), p.y() / p.z()})); }

  bool inside(const Vec2& px) const { return px.x() >= 0.0 && px.x() < width && px.y() >= 0.0 && px.y() < height; }
};

struct FiducialMarker {
  int marker_id = 0;
  double side_mm = 40.0;

  // Counter-clockwise from top-left, in the marker plane z = 0.
  std::array<Vec3, 4> corners() const {
    const double h = side_mm / 2.0;
    return {Vec3(-h, h, 0), Vec3(-h, -h, 0), Vec3(h, -h, 0), Vec3(h, h, 0)};
  }
};

struct Detection {
  int marker_id = 0;
  std::array<Vec2, 4> corners{};
  double reprojection_error = 0.0;  // filled in after solve_pnp
};

struct Occluded {
  int marker_id = 0;
  std::string reason;
};

using Observation = std::variant<Detection, Occluded>;

// Synthetic detector: projects the marker corners through the camera and adds
// isotropic Gaussian pixel noise.
inline Observation project_marker(const Pose& cTo, const FiducialMarker& marker, const CameraModel& camera,
                                  double noise_sigma_px, Rng& rng, bool occlude = false) {
  if (occlude) return Occluded{marker.marker_id, "injected"};
  Detection d;
  d.marker_id = marker.marker_id;
  const auto pts = marker.corners();
  for (std::size_t i = 0; i < 4; ++i) {
    const Vec3 p = cTo.apply(pts[i]);
    if (!(p.z() > 0.0)) return Occluded{marker.marker_id, "behind camera"};
    Vec2 px = camera.project(p);
    if (noise_sigma_px > 0.0) px += Vec2(rng.normal(0.0, noise_sigma_px), rng.normal(0.0, noise_sigma_px));
    if (!px.allFinite() || !camera.inside(px)) return Occluded{marker.marker_id, "outside image"};
    d.corners[i] = px;
  }
  return d;
}

inline Observation project_marker(const Pose& cTo, const FiducialMarker& marker, const CameraModel& camera,
                                  double noise_sigma_px, std::uint64_t seed, bool occlude = false) {
  Rng rng(seed);
  return project_marker(cTo, marker, camera, noise_sigma_px, rng, occlude);
}

// Mean per-corner pixel distance between the observed corners and the
// projection of the marker at cTo.
inline double mean_reprojection_error(const Pose& cTo, const Detection& det, const FiducialMarker& marker,
                                      const CameraModel& camera) {
  const auto pts = marker.corners();
  double acc = 0.0;
  for (std::size_t i = 0; i < 4; ++i) acc += (camera.project(cTo.apply(pts[i])) - det.corners[i]).norm();
  return acc / 4.0;
}

struct PnpOptions {
  int max_iterations = 500;
  double step_tolerance = 1e-13;
  double gradient_tolerance = 1e-12;
  double cost_tolerance = 1e-15;  // relative decrease treated as stagnation
};

struct PnpResult {
  Pose cTo;
  double reproj_err = 0.0;
  int iterations = 0;
};

namespace detail {

// Planar homography H with [x y 1]^T ~ H [X Y 1]^T from 4+ correspondences
// (Hartley-normalized DLT).
inline Mat3 homography(const std::vector<Vec2>& obj, const std::vector<Vec2>& img) {
  auto normalizer = [](const std::vector<Vec2>& p) {
    Vec2 c = Vec2::Zero();
    for (const auto& q : p) c += q;
    c /= static_cast<double>(p.size());
    double d = 0.0;
    for (const auto& q : p) d += (q - c).norm();
    d /= static_cast<double>(p.size());
    const double s = std::sqrt(2.0) / d;
    Mat3 t;
    t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
    return t;
  };
  const Mat3 to = normalizer(obj), ti = normalizer(img);
  const auto n = static_cast<Eigen::Index>(obj.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(std::max<Eigen::Index>(2 * n, 9), 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 o = to * Vec3(obj[static_cast<std::size_t>(i)].x(), obj[static_cast<std::size_t>(i)].y(), 1.0);
    const Vec3 m = ti * Vec3(img[static_cast<std::size_t>(i)].x(), img[static_cast<std::size_t>(i)].y(), 1.0);
    const double X = o.x() / o.z(), Y = o.y() / o.z(), x = m.x() / m.z(), y = m.y() / m.z();
    a.row(2 * i) << -X, -Y, -1, 0, 0, 0, x * X, x * Y, x;
    a.row(2 * i + 1) << 0, 0, 0, -X, -Y, -1, y * X, y * Y, y;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return ti.inverse() * hn * to;
}

inline double triangle_area(const Vec2& a, const Vec2& b, const Vec2& c) {
  return 0.5 * std::abs((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
}

}  // namespace detail

// Pose of the marker in the camera frame minimizing squared reprojection error.
// Observations are undistorted first; the solver works on the pinhole model
// with residuals scaled to pixels.
inline PnpResult solve_pnp(const Detection& det, const FiducialMarker& marker, const CameraModel& camera,
                           const PnpOptions& opt = {}) {
  std::vector<Vec2> img(4), obj(4);
  const auto pts = marker.corners();
  for (std::size_t i = 0; i < 4; ++i) {
    if (!det.corners[i].allFinite()) throw Error(Errc::DegenerateCorners, "non-finite corner");
    img[i] = camera.undistort(camera.to_normalized(det.corners[i]));
    obj[i] = pts[i].head<2>();
  }
  // Any three corners nearly collinear leaves the homography ill-posed.
  double span = 0.0;
  for (std::size_t i = 0; i < 4; ++i) span = std::max(span, (img[i] - img[(i + 2) % 4]).norm());
  for (std::size_t i = 0; i < 4; ++i) {
    const double area = detail::triangle_area(img[i], img[(i + 1) % 4], img[(i + 2) % 4]);
    if (!(area > 1e-6 * span * span)) throw Error(Errc::DegenerateCorners, "corners are (nearly) collinear");
  }

  // Homography initialization: H ~ [r1 r2 t].
  const Mat3 h = detail::homography(obj, img);
  const double scale = 2.0 / (h.col(0).norm() + h.col(1).norm());
  Mat3 rh = h * scale;
  if (rh(2, 2) < 0.0) rh = -rh;  // marker in front of the camera
  Mat3 r0;
  r0.col(0) = rh.col(0);
  r0.col(1) = rh.col(1);
  r0.col(2) = rh.col(0).cross(rh.col(1));
  Pose pose = Pose::from_rotation(r0, rh.col(2));

  auto residuals = [&](const Pose& p, Eigen::Matrix<double, 8, 1>& r, Eigen::Matrix<double, 8, 6>* jac) {
    const Mat3 rot = p.rotation_matrix();
    for (std::size_t i = 0; i < 4; ++i) {
      const Vec3 rx = rot * pts[i];
      const Vec3 c = rx + p.translation();
      const auto k = static_cast<Eigen::Index>(2 * i);
      r(k) = camera.fx * (c.x() / c.z() - img[i].x());
      r(k + 1) = camera.fy * (c.y() / c.z() - img[i].y());
      if (jac) {
        Eigen::Matrix<double, 2, 3> dproj;
        const double iz = 1.0 / c.z();
        dproj << camera.fx * iz, 0, -camera.fx * c.x() * iz * iz, 0, camera.fy * iz, -camera.fy * c.y() * iz * iz;
        jac->block<2, 3>(k, 0) = dproj * (-skew(rx));  // left-multiplied rotation perturbation
        jac->block<2, 3>(k, 3) = dproj;
      }
    }
  };
  auto cost_of = [](const Eigen::Matrix<double, 8, 1>& r) { return r.squaredNorm(); };
  auto front = [&](const Pose& p) {
    for (const auto& q : pts) {
      if (!(p.apply(q).z() > 0.0)) return false;
    }
    return true;
  };

  Eigen::Matrix<double, 8, 1> r;
  Eigen::Matrix<double, 8, 6> j;
  residuals(pose, r, &j);
  double cost = cost_of(r);
  double lambda = 1e-3;
  int it = 0;
  bool converged = false;
  for (; it < opt.max_iterations; ++it) {
    const Eigen::Matrix<double, 6, 1> g = j.transpose() * r;
    if (g.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance * (1.0 + cost) || cost < 1e-26) {
      converged = true;
      break;
    }
    const Eigen::Matrix<double, 6, 6> jtj = j.transpose() * j;
    bool accepted = false;
    for (int tries = 0; tries < 20 && !accepted; ++tries) {
      Eigen::Matrix<double, 6, 6> a = jtj;
      a.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::Matrix<double, 6, 1> delta = -a.ldlt().solve(g);
      const Pose cand(Quat(exp_so3(delta.head<3>())) * pose.rotation(), pose.translation() + delta.tail<3>());
      Eigen::Matrix<double, 8, 1> rc;
      residuals(cand, rc, nullptr);
      const double cc = cost_of(rc);
      if (std::isfinite(cc) && cc <= cost && front(cand)) {
        const bool tiny = delta.norm() < opt.step_tolerance * (1.0 + pose.translation().norm()) ||
                          cost - cc <= opt.cost_tolerance * cost;
        pose = cand;
        cost = cc;
        lambda = std::max(lambda * 0.1, 1e-12);
        residuals(pose, r, &j);
        accepted = true;
        if (tiny) converged = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) {
      // No descent direction left at machine precision: a stationary point.
      converged = true;
      break;
    }
    if (converged) {
      ++it;
      break;
    }
  }
  if (!converged || !front(pose)) {
    throw Error(Errc::NoConvergence, "PnP refinement did not converge in " + std::to_string(opt.max_iterations) + " iterations");
  }
  return {pose, mean_reprojection_error(pose, det, marker, camera), it};
}

enum class FilterOrder { MedianThenEma, EmaThenMedian };

struct FilterConfig {
  double ema_alpha = 0.4;
  int median_window = 5;
  FilterOrder order = FilterOrder::MedianThenEma;

  void validate() const {
    if (!(ema_alpha > 0.0 && ema_alpha <= 1.0)) throw Error(Errc::InvalidConfig, "ema_alpha must be in (0,1]");
    if (median_window < 1 || median_window % 2 == 0) throw Error(Errc::InvalidConfig, "median_window must be odd >= 1");
  }

  // alpha = 1 and window = 1 disable temporal filtering.
  static FilterConfig disabled() { return {1.0, 1, FilterOrder::MedianThenEma}; }
};

// Translation: per-axis median over the last W inputs and EMA (order
// configurable). Rotation: EMA on sign-aligned quaternions, renormalized.
class PoseFilter {
 public:
  explicit PoseFilter(FilterConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  Pose push(const Pose& in) {
    if (cfg_.ema_alpha == 1.0 && cfg_.median_window == 1) return in;
    Vec3 t;
    if (cfg_.order == FilterOrder::MedianThenEma) {
      t = ema_t(median_t(in.translation()));
    } else {
      t = median_t(ema_t(in.translation()));
    }
    return {ema_q(in.rotation()), t};
  }

  void reset() {
    window_.clear();
    have_ = false;
    have_t_ = false;
  }

  const FilterConfig& config() const { return cfg_; }

 private:
  Vec3 median_t(const Vec3& t) {
    window_.push_back(t);
    if (window_.size() > static_cast<std::size_t>(cfg_.median_window)) window_.pop_front();
    if (window_.size() == 1) return window_.front();
    Vec3 out;
    std::vector<double> v(window_.size());
    for (int a = 0; a < 3; ++a) {
      for (std::size_t i = 0; i < window_.size(); ++i) v[i] = window_[i](a);
      std::sort(v.begin(), v.end());
      const std::size_t m = v.size() / 2;
      out(a) = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    }
    return out;
  }

  Vec3 ema_t(const Vec3& t) {
    if (!have_t_) {
      have_t_ = true;
      t_ = t;
    } else {
      t_ = cfg_.ema_alpha * t + (1.0 - cfg_.ema_alpha) * t_;
    }
    return t_;
  }

  Quat ema_q(const Quat& q) {
    if (!have_) {
      have_ = true;
      q_ = q;
      return q_;
    }
    if (cfg_.ema_alpha == 1.0) {
      q_ = q;
      return q_;
    }
    Quat a = q;
    if (a.dot(q_) < 0.0) a.coeffs() = -a.coeffs();
    q_.coeffs() = cfg_.ema_alpha * a.coeffs() + (1.0 - cfg_.ema_alpha) * q_.coeffs();
    q_.normalize();
    return q_;
  }

  FilterConfig cfg_;
  std::deque<Vec3> window_;
  bool have_ = false;
  bool have_t_ = false;
  Quat q_ = Quat::Identity();
  Vec3 t_ = Vec3::Zero();
};

inline std::vector<Pose> filter_pose(const std::vector<Pose>& stream, FilterConfig cfg = {}) {
  PoseFilter f(cfg);
  std::vector<Pose> out;
  out.reserve(stream.size());
  for (const auto& p : stream) out.push_back(f.push(p));
  return out;
}

struct SearchPolicy {
  int max_retries = 3;
  double reproj_threshold_px = 2.0;
};

struct Action {
  enum Kind { Accept, Retry, SearchMode } kind;
  int retry = 0;  // 1-based retry number for Retry
};

inline std::string_view to_string(Action::Kind k) {
  switch (k) {
    case Action::Accept: return "accept";
    case Action::Retry: return "retry";
    case Action::SearchMode: return "search";
  }
  return "?";
}

// `failures_before` is the number of consecutive rejected observations
// preceding this one.
inline Action detect_or_search(const Observation& result, const SearchPolicy& policy, int failures_before) {
  const auto* det = std::get_if<Detection>(&result);
  if (det && det->reprojection_error <= policy.reproj_threshold_px) return {Action::Accept, 0};
  if (failures_before < policy.max_retries) return {Action::Retry, failures_before + 1};
  return {Action::SearchMode, 0};
}

// Stateful form: counts consecutive failures, resets on Accept.
class DetectionSupervisor {
 public:
  explicit DetectionSupervisor(SearchPolicy policy = {}) : policy_(policy) {}
  Action next(const Observation& result) {
    const Action a = detect_or_search(result, policy_, failures_);
    failures_ = a.kind == Action::Accept ? 0 : failures_ + 1;
    return a;
  }
  void reset() { failures_ = 0; }

 private:
  SearchPolicy policy_;
  int failures_ = 0;
};

inline void write_detection_csv_header(std::ostream& out) {
  out << "t,marker_id,u1,v1,u2,v2,u3,v3,u4,v4,reproj_err,status\n";
}

inline void write_detection_csv(std::ostream& out, double t, const Observation& obs, std::string_view status) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", t);
  out << buf;
  if (const auto* d = std::get_if<Detection>(&obs)) {
    out << ',' << d->marker_id;
    for (const auto& c : d->corners) {
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f", c.x(), c.y());
      out << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.6f", d->reprojection_error);
    out << buf;
  } else {
    out << ',' << std::get<Occluded>(obs).marker_id << ",,,,,,,,,";
  }
  out << ',' << status << '\n';
}

}  // namespace bciar::vision
