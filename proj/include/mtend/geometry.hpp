#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <Eigen/Geometry>

namespace mtend {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = std::numbers::pi;

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

/// Planar base pose. theta is kept in (-pi, pi] by every operation here.
struct Pose2D {
  double x{0.0};
  double y{0.0};
  double theta{0.0};

  Pose2D() = default;
  Pose2D(double x_, double y_, double theta_)
      : x(x_), y(y_), theta(normalize_angle(theta_)) {}

  Vec2 position() const { return {x, y}; }

  /// this * other (other expressed in this frame).
  Pose2D compose(const Pose2D& other) const {
    const double c = std::cos(theta), s = std::sin(theta);
    return {x + c * other.x - s * other.y, y + s * other.x + c * other.y,
            theta + other.theta};
  }

  Pose2D inverse() const {
    const double c = std::cos(theta), s = std::sin(theta);
    return {-c * x - s * y, s * x - c * y, -theta};
  }

  Vec2 transform(const Vec2& p) const {
    const double c = std::cos(theta), s = std::sin(theta);
    return {x + c * p.x() - s * p.y(), y + s * p.x() + c * p.y()};
  }

  friend bool operator==(const Pose2D&, const Pose2D&) = default;
};

/// Rigid transform: rotation then translation.
struct Transform3D {
  Mat3 rotation{Mat3::Identity()};
  Vec3 translation{Vec3::Zero()};

  static Transform3D identity() { return {}; }

  static Transform3D from_translation(const Vec3& t) {
    Transform3D out;
    out.translation = t;
    return out;
  }

  /// Roll-pitch-yaw, applied as Rz(yaw) * Ry(pitch) * Rx(roll).
  static Transform3D from_rpy(double roll, double pitch, double yaw,
                              const Vec3& t = Vec3::Zero()) {
    Transform3D out;
    out.rotation = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                    Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                    Eigen::AngleAxisd(roll, Vec3::UnitX()))
                       .toRotationMatrix();
    out.translation = t;
    return out;
  }

  static Transform3D from_pose2d(const Pose2D& p, double z = 0.0) {
    Transform3D out;
    out.rotation = Eigen::AngleAxisd(p.theta, Vec3::UnitZ()).toRotationMatrix();
    out.translation = Vec3(p.x, p.y, z);
    return out;
  }

  Transform3D operator*(const Transform3D& o) const {
    Transform3D out;
    out.rotation = rotation * o.rotation;
    out.translation = rotation * o.translation + translation;
    return out;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Transform3D inverse() const {
    Transform3D out;
    out.rotation = rotation.transpose();
    out.translation = -(out.rotation * translation);
    return out;
  }

  bool is_valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }
};

/// Geodesic angle between two rotations.
inline double rotation_distance(const Mat3& a, const Mat3& b) {
  const Mat3 r = a.transpose() * b;
  // acos is ill-conditioned near zero; the log-map norm via atan2 is not.
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * axis.norm(), 0.5 * (r.trace() - 1.0));
}

/// Rotation vector (axis * angle) of R.
inline Vec3 rotation_log(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.axis() * aa.angle();
}

/// Position lerp with quaternion slerp on the rotation.
inline Transform3D interpolate(const Transform3D& a, const Transform3D& b, double s) {
  const Eigen::Quaterniond qa(a.rotation), qb(b.rotation);
  Transform3D out;
  out.rotation = qa.slerp(s, qb).toRotationMatrix();
  out.translation = (1.0 - s) * a.translation + s * b.translation;
  return out;
}

/// Rotation whose z axis is `forward`; x is chosen perpendicular to `up_hint`
/// when possible.
inline Mat3 look_rotation(const Vec3& forward, const Vec3& up_hint = Vec3::UnitZ()) {
  const Vec3 z = forward.normalized();
  Vec3 ref = up_hint;
  if (std::abs(z.dot(ref.normalized())) > 0.999) ref = Vec3::UnitX();
  if (std::abs(z.dot(ref.normalized())) > 0.999) ref = Vec3::UnitY();
  const Vec3 x = ref.cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r;
}

}  // namespace mtend
