#include "mtend/arm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mtend/error.hpp"

namespace mtend {

namespace {

Transform3D dh_transform(const DhParam& p, double q) {
  const double cq = std::cos(q), sq = std::sin(q);
  const double ca = std::cos(p.alpha), sa = std::sin(p.alpha);
  Transform3D t;
  t.rotation << cq, -sq * ca, sq * sa,
                sq, cq * ca, -cq * sa,
                0.0, sa, ca;
  t.translation = Vec3(p.a * cq, p.a * sq, p.d);
  return t;
}

bool is_ur_style(const ArmModel& m) {
  const auto near = [](double a, double b) { return std::abs(a - b) < 1e-9; };
  return near(m.dh[0].a, 0) && near(m.dh[1].d, 0) && near(m.dh[2].d, 0) && near(m.dh[3].a, 0) &&
         near(m.dh[4].a, 0) && near(m.dh[5].a, 0) && near(m.dh[0].alpha, kPi / 2) &&
         near(m.dh[1].alpha, 0) && near(m.dh[2].alpha, 0) && near(m.dh[3].alpha, kPi / 2) &&
         near(m.dh[4].alpha, -kPi / 2) && near(m.dh[5].alpha, 0) && std::abs(m.dh[5].d) > 1e-9 &&
         std::abs(m.dh[1].a) > 1e-9 && std::abs(m.dh[2].a) > 1e-9;
}

// Pose error as [dp; dtheta] with dtheta the world-frame rotation vector.
Eigen::Matrix<double, 6, 1> pose_error(const Transform3D& target, const Transform3D& current) {
  Eigen::Matrix<double, 6, 1> e;
  e.head<3>() = target.translation - current.translation;
  e.tail<3>() = rotation_log(target.rotation * current.rotation.transpose());
  return e;
}

}  // namespace

ArmModel ArmModel::ur5() {
  ArmModel m;
  m.dh = {DhParam{0.0, 0.089159, kPi / 2}, DhParam{-0.425, 0.0, 0.0},
          DhParam{-0.39225, 0.0, 0.0},     DhParam{0.0, 0.10915, kPi / 2},
          DhParam{0.0, 0.09465, -kPi / 2}, DhParam{0.0, 0.0823, 0.0}};
  for (auto& l : m.limits) l = {-2.0 * kPi, 2.0 * kPi};
  m.tool_offset = Transform3D::from_translation({0.0, 0.0, 0.15});
  m.camera_offset = Transform3D::from_translation({0.0, -0.07, 0.06});
  return m;
}

double ArmModel::total_reach() const {
  double r = 0.0;
  for (const auto& p : dh) r += std::abs(p.a) + std::abs(p.d);
  return r + tool_offset.translation.norm();
}

bool ArmModel::within_limits(const JointConfig& q) const {
  for (int i = 0; i < 6; ++i) {
    if (!std::isfinite(q[i]) || q[i] < limits[i].first || q[i] > limits[i].second) return false;
  }
  return true;
}

std::array<Transform3D, 7> dh_frames(const ArmModel& model, const JointConfig& q) {
  std::array<Transform3D, 7> frames;
  for (int i = 0; i < 6; ++i) frames[i + 1] = frames[i] * dh_transform(model.dh[i], q[i]);
  return frames;
}

Transform3D fk_flange(const ArmModel& model, const JointConfig& q) {
  return dh_frames(model, q)[6];
}

Transform3D fk(const ArmModel& model, const JointConfig& q) {
  if (!model.within_limits(q)) throw Error(ErrorCode::JointLimit, "joint configuration out of limits");
  return fk_flange(model, q) * model.tool_offset;
}

Jacobian jacobian(const ArmModel& model, const JointConfig& q) {
  const auto frames = dh_frames(model, q);
  const Vec3 tip = (frames[6] * model.tool_offset).translation;
  Jacobian j;
  for (int i = 0; i < 6; ++i) {
    const Vec3 z = frames[i].rotation.col(2);
    j.block<3, 1>(0, i) = z.cross(tip - frames[i].translation);
    j.block<3, 1>(3, i) = z;
  }
  return j;
}

double manipulability(const Jacobian& j) {
  return std::sqrt(std::max(0.0, (j * j.transpose()).determinant()));
}

std::optional<JointConfig> solve_ik_near(const ArmModel& model, const Transform3D& target,
                                         const JointConfig& seed, int max_iterations) {
  JointConfig q = seed;
  for (int it = 0; it < max_iterations; ++it) {
    const auto e = pose_error(target, fk_flange(model, q) * model.tool_offset);
    if (e.head<3>().norm() < 1e-10 && e.tail<3>().norm() < 1e-10) return q;
    const Jacobian j = jacobian(model, q);
    constexpr double kDamping = 1e-8;
    const Eigen::Matrix<double, 6, 6> a = j * j.transpose() + kDamping * Jacobian::Identity();
    JointConfig dq = j.transpose() * a.ldlt().solve(e);
    // Keep each Newton step modest so the iteration stays on its branch.
    const double m = dq.cwiseAbs().maxCoeff();
    if (m > 0.3) dq *= 0.3 / m;
    q += dq;
  }
  const auto e = pose_error(target, fk_flange(model, q) * model.tool_offset);
  if (e.head<3>().norm() < 1e-9 && e.tail<3>().norm() < 1e-9) return q;
  return std::nullopt;
}

IkSolutionSet ik_all(const ArmModel& model, const Transform3D& target) {
  if (!target.is_valid(1e-6)) throw Error(ErrorCode::Validation, "IK target rotation is not orthonormal");
  if (!is_ur_style(model)) throw Error(ErrorCode::Validation, "closed-form IK requires UR-style DH geometry");

  const double d1 = model.dh[0].d, a2 = model.dh[1].a, a3 = model.dh[2].a;
  const double d4 = model.dh[3].d, d6 = model.dh[5].d;
  const Transform3D t06 = target * model.tool_offset.inverse();
  const Vec3 p06 = t06.translation;
  const Vec3 p05 = p06 - d6 * t06.rotation.col(2);
  (void)d1;

  IkSolutionSet out;
  const double r = std::hypot(p05.x(), p05.y());
  if (r < std::abs(d4) - 1e-12 || r < 1e-12) return out;
  const double phi = std::atan2(p05.y(), p05.x());
  const double psi = std::asin(std::clamp(d4 / r, -1.0, 1.0));

  std::vector<JointConfig> candidates;
  for (const double q1 : {phi + psi, phi + kPi - psi}) {
    const Vec3 z1(std::sin(q1), -std::cos(q1), 0.0);
    const double c5 = (p06.dot(z1) - d4) / d6;
    if (std::abs(c5) > 1.0 + 1e-9) continue;
    const double q5a = std::acos(std::clamp(c5, -1.0, 1.0));
    for (const double q5 : {q5a, -q5a}) {
      const double s5 = std::sin(q5);
      const Vec3 v = t06.rotation.transpose() * z1;
      const double q6 = std::abs(s5) > 1e-10 ? std::atan2(-v.y() / s5, v.x() / s5) : 0.0;

      const Transform3D t14 = dh_transform(model.dh[0], q1).inverse() * t06 *
                              (dh_transform(model.dh[4], q5) * dh_transform(model.dh[5], q6)).inverse();
      const double x = t14.translation.x(), y = t14.translation.y();
      const double c3 = (x * x + y * y - a2 * a2 - a3 * a3) / (2.0 * a2 * a3);
      if (std::abs(c3) > 1.0 + 1e-9) continue;
      const double q3a = std::acos(std::clamp(c3, -1.0, 1.0));
      for (const double q3 : {q3a, -q3a}) {
        const double q2 = std::atan2(y, x) - std::atan2(a3 * std::sin(q3), a2 + a3 * std::cos(q3));
        const Mat3 m = t14.rotation * Eigen::AngleAxisd(-kPi / 2, Vec3::UnitX()).toRotationMatrix();
        const double q234 = std::atan2(m(1, 0), m(0, 0));
        JointConfig q;
        q << q1, q2, q3, q234 - q2 - q3, q5, q6;
        for (int i = 0; i < 6; ++i) q[i] = normalize_angle(q[i]);
        candidates.push_back(q);
      }
    }
  }

  for (JointConfig q : candidates) {
    auto check = [&](const JointConfig& c) {
      const Transform3D got = fk_flange(model, c) * model.tool_offset;
      return (got.translation - target.translation).norm() <= 1e-6 &&
             rotation_distance(got.rotation, target.rotation) <= 1e-6;
    };
    if (auto refined = solve_ik_near(model, target, q, 5)) {
      q = *refined;
      for (int i = 0; i < 6; ++i) q[i] = normalize_angle(q[i]);
    }
    if (!check(q)) continue;
    // Principal value out of limits: try the 2pi-shifted twin instead.
    if (!model.within_limits(q)) {
      JointConfig shifted = unwrap_near(model, q, JointConfig::Zero());
      if (!model.within_limits(shifted)) continue;
      q = shifted;
    }
    const bool duplicate = std::any_of(out.solutions.begin(), out.solutions.end(),
                                       [&](const JointConfig& s) { return (s - q).norm() <= kDuplicateSolutionTol; });
    if (!duplicate) out.solutions.push_back(q);
  }
  return out;
}

double weighted_joint_distance(const JointConfig& a, const JointConfig& b,
                               const std::array<double, 6>& weights) {
  double sum = 0.0;
  for (int i = 0; i < 6; ++i) sum += weights[i] * (a[i] - b[i]) * (a[i] - b[i]);
  return sum;
}

IkSolutionSet sort_by_distance(const IkSolutionSet& set, const JointConfig& current,
                               const std::array<double, 6>& weights) {
  std::vector<std::pair<double, std::size_t>> keyed;
  keyed.reserve(set.solutions.size());
  for (std::size_t i = 0; i < set.solutions.size(); ++i)
    keyed.emplace_back(weighted_joint_distance(set.solutions[i], current, weights), i);
  // Ties fall back to lexicographic joint order so the output is independent
  // of the input permutation.
  std::stable_sort(keyed.begin(), keyed.end(), [&](const auto& l, const auto& r) {
    if (l.first != r.first) return l.first < r.first;
    const auto& ql = set.solutions[l.second];
    const auto& qr = set.solutions[r.second];
    return std::lexicographical_compare(ql.data(), ql.data() + 6, qr.data(), qr.data() + 6);
  });
  IkSolutionSet out;
  out.sorted = true;
  for (const auto& [d, i] : keyed) out.solutions.push_back(set.solutions[i]);
  return out;
}

JointConfig unwrap_near(const ArmModel& model, const JointConfig& q, const JointConfig& reference) {
  JointConfig out = q;
  for (int i = 0; i < 6; ++i) {
    double best = q[i];
    double best_err = std::numeric_limits<double>::infinity();
    for (int k = -2; k <= 2; ++k) {
      const double c = q[i] + 2.0 * kPi * k;
      if (c < model.limits[i].first || c > model.limits[i].second) continue;
      const double err = std::abs(c - reference[i]);
      if (err < best_err) {
        best_err = err;
        best = c;
      }
    }
    out[i] = best;
  }
  return out;
}

Vec3 jog_axis(JogDirection direction) {
  switch (direction) {
    case JogDirection::PosX: return Vec3::UnitX();
    case JogDirection::NegX: return -Vec3::UnitX();
    case JogDirection::PosY: return Vec3::UnitY();
    case JogDirection::NegY: return -Vec3::UnitY();
    case JogDirection::PosZ: return Vec3::UnitZ();
    case JogDirection::NegZ: return -Vec3::UnitZ();
  }
  return Vec3::Zero();
}

JogDirection opposite(JogDirection direction) {
  switch (direction) {
    case JogDirection::PosX: return JogDirection::NegX;
    case JogDirection::NegX: return JogDirection::PosX;
    case JogDirection::PosY: return JogDirection::NegY;
    case JogDirection::NegY: return JogDirection::PosY;
    case JogDirection::PosZ: return JogDirection::NegZ;
    case JogDirection::NegZ: return JogDirection::PosZ;
  }
  return direction;
}

const char* to_string(JogDirection direction) {
  switch (direction) {
    case JogDirection::PosX: return "+x";
    case JogDirection::NegX: return "-x";
    case JogDirection::PosY: return "+y";
    case JogDirection::NegY: return "-y";
    case JogDirection::PosZ: return "+z";
    case JogDirection::NegZ: return "-z";
  }
  return "?";
}

std::optional<JogDirection> jog_direction_from_string(const std::string& s) {
  for (auto d : {JogDirection::PosX, JogDirection::NegX, JogDirection::PosY, JogDirection::NegY,
                 JogDirection::PosZ, JogDirection::NegZ}) {
    if (s == to_string(d)) return d;
  }
  return std::nullopt;
}

JointConfig jog_delta(const ArmModel& model, const JointConfig& current, JogDirection direction,
                      double step) {
  if (!(step > 0.0 && step <= 0.02)) throw Error(ErrorCode::OutOfRange, "jog step must be in (0, 0.02] m");
  if (!model.within_limits(current)) throw Error(ErrorCode::JointLimit, "current configuration out of limits");
  if (manipulability(jacobian(model, current)) < kSingularManipulability)
    throw Error(ErrorCode::Singular, "configuration is near a singularity");

  const Transform3D start = fk_flange(model, current) * model.tool_offset;
  Transform3D target = start;
  target.translation += step * (start.rotation * jog_axis(direction));

  JointConfig q = current;
  for (int it = 0; it < 100; ++it) {
    const auto e = pose_error(target, fk_flange(model, q) * model.tool_offset);
    if (e.head<3>().norm() <= 1e-10 && e.tail<3>().norm() <= 1e-10) break;
    const Jacobian j = jacobian(model, q);
    if (manipulability(j) < kSingularManipulability)
      throw Error(ErrorCode::Singular, "jog passes through a singularity");
    constexpr double kDamping = 1e-10;
    q += j.transpose() * (j * j.transpose() + kDamping * Jacobian::Identity()).ldlt().solve(e);
  }
  const auto e = pose_error(target, fk_flange(model, q) * model.tool_offset);
  if (e.head<3>().norm() > 1e-5 || e.tail<3>().norm() > 1e-4)
    throw Error(ErrorCode::NoConverge, "jog did not converge");
  if (!model.within_limits(q)) throw Error(ErrorCode::JointLimit, "jog would exceed joint limits");
  return q;
}

}  // namespace mtend
