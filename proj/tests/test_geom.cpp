#include <gtest/gtest.h>

#include "bciar/geom.hpp"
#include "bciar/rng.hpp"

using namespace bciar;

namespace {

// Reference: plain 4x4 homogeneous matrices built from Rodrigues' formula,
// without going through the quaternion path.
Mat4 hom(const Vec3& axis, double angle_rad, const Vec3& t) {
  const Vec3 k = axis.normalized();
  Mat3 kx;
  kx << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
  const Mat3 r = Mat3::Identity() + std::sin(angle_rad) * kx + (1 - std::cos(angle_rad)) * kx * kx;
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = t;
  return m;
}

struct Sample {
  Pose pose;
  Mat4 m;
};

Sample random_pose(Rng& rng) {
  const Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  const double ang = rng.uniform(-3.1, 3.1);
  const Vec3 t(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(-500, 500));
  return {Pose(Quat(Eigen::AngleAxisd(ang, axis.normalized())), t), hom(axis, ang, t)};
}

}  // namespace

TEST(Compose, IdentityAndTranslations) {
  const Pose p = compose(Pose::identity(), Pose::identity());
  EXPECT_EQ(p.translation(), Vec3::Zero());
  EXPECT_NEAR(p.rotation().w(), 1.0, 1e-15);

  const Pose q = compose(Pose::from_translation(0, 0, 100), Pose::from_translation(0, 0, 50));
  EXPECT_NEAR((q.translation() - Vec3(0, 0, 150)).norm(), 0.0, 1e-12);
}

TEST(Compose, RotationThenTranslationMatchesMatrixProduct) {
  const Pose r = Pose::rot_z_deg(90);
  const Pose t = Pose::from_translation(10, 0, 0);
  const Pose c = compose(r, t);
  const Mat4 oracle = hom(Vec3::UnitZ(), std::numbers::pi / 2, Vec3::Zero()) * hom(Vec3::UnitX(), 0, Vec3(10, 0, 0));
  EXPECT_LT((c.matrix() - oracle).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR((c.translation() - Vec3(0, 10, 0)).norm(), 0.0, 1e-12);
  EXPECT_LT(rotation_angle_deg(c.rotation(), r.rotation()), 1e-9);
}

TEST(Compose, RandomMatchesMatrixOracleAndIsAssociative) {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    EXPECT_LT(((a.pose * b.pose).matrix() - a.m * b.m).cwiseAbs().maxCoeff(), 1e-9);
    const Pose l = (a.pose * b.pose) * c.pose;
    const Pose r = a.pose * (b.pose * c.pose);
    EXPECT_LT((l.matrix() - r.matrix()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Pose, InverseProperties) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Pose p = random_pose(rng).pose;
    const Pose e = compose(p, invert(p));
    EXPECT_LT(e.translation().norm(), 1e-9);
    EXPECT_LT(rotation_angle_deg(e.rotation(), Quat::Identity()) * kDegToRad, 1e-9);
    const Pose pp = invert(invert(p));
    EXPECT_LT((pp.matrix() - p.matrix()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(p.rotation().norm(), 1.0, 1e-9);
    EXPECT_NEAR(p.rotation_matrix().determinant(), 1.0, 1e-9);
  }
}

TEST(Pose, RejectsZeroQuaternion) {
  EXPECT_THROW(Pose(Quat(0, 0, 0, 0), Vec3::Zero()), Error);
  try {
    Pose(Quat(0, 0, 0, 0), Vec3::Zero());
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidPose);
  }
}

TEST(Pose, RecordRoundTrip) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Pose p = random_pose(rng).pose;
    const Pose q = parse_record(format_record(p));
    EXPECT_EQ(p.to_record(), q.to_record());
  }
  EXPECT_NO_THROW(parse_record("[1, 0, 0, 0, 1, 2, 3]"));
  EXPECT_THROW(parse_record("1,0,0"), Error);
  EXPECT_THROW(parse_record("1,0,0,0,1,2,3,4"), Error);
}

TEST(Chain, IdentityAndTranslations) {
  const FramedPose be{Pose::identity(), Frame::Base, Frame::EndEffector};
  const FramedPose ec{Pose::identity(), Frame::EndEffector, Frame::Camera};
  const FramedPose co{Pose::identity(), Frame::Camera, Frame::Object};
  const auto bo = chain_base_object(be, ec, co);
  EXPECT_EQ(bo.parent, Frame::Base);
  EXPECT_EQ(bo.child, Frame::Object);
  EXPECT_EQ(bo.pose.translation(), Vec3::Zero());

  const auto t = chain_base_object({Pose::from_translation(0, 0, 100), Frame::Base, Frame::EndEffector},
                                   {Pose::from_translation(0, 0, 50), Frame::EndEffector, Frame::Camera},
                                   {Pose::from_translation(0, 0, 200), Frame::Camera, Frame::Object});
  EXPECT_NEAR((t.pose.translation() - Vec3(0, 0, 350)).norm(), 0.0, 1e-12);
}

TEST(Chain, RandomMatchesMatrixOracleAndCompose) {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    const FramedPose be{a.pose, Frame::Base, Frame::EndEffector};
    const FramedPose ec{b.pose, Frame::EndEffector, Frame::Camera};
    const FramedPose co{c.pose, Frame::Camera, Frame::Object};
    const auto bo = chain_base_object(be, ec, co);
    EXPECT_LT((bo.pose.matrix() - a.m * b.m * c.m).cwiseAbs().maxCoeff(), 1e-9);
    const Pose direct = compose(compose(a.pose, b.pose), c.pose);
    EXPECT_EQ(bo.pose.to_record(), direct.to_record());
  }
}

TEST(Chain, FrameMismatch) {
  const FramedPose be{Pose::identity(), Frame::Base, Frame::EndEffector};
  const FramedPose co{Pose::identity(), Frame::Camera, Frame::Object};
  try {
    compose(be, co);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::FrameMismatch);
  }
  EXPECT_THROW(chain_base_object(be, co, co), Error);
}
