#pragma once

#include <array>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mtend/geometry.hpp"

namespace mtend {

using JointConfig = Eigen::Matrix<double, 6, 1>;
using Jacobian = Eigen::Matrix<double, 6, 6>;

struct DhParam {
  double a{0.0};
  double d{0.0};
  double alpha{0.0};
};

struct ArmModel {
  std::array<DhParam, 6> dh{};
  std::array<std::pair<double, double>, 6> limits{};
  Transform3D tool_offset;    // flange -> gripper TCP
  Transform3D camera_offset;  // flange -> depth camera (optical z forward)

  /// UR5 DH table, +-2pi limits, 15 cm gripper, camera beside the gripper.
  static ArmModel ur5();

  double total_reach() const;
  bool within_limits(const JointConfig& q) const;
};

/// Joint-distance weights favouring proximal joints.
inline constexpr std::array<double, 6> kDefaultJointWeights{3.0, 3.0, 2.0, 1.0, 1.0, 1.0};

/// Minimum joint-space distance between two distinct IK solutions.
inline constexpr double kDuplicateSolutionTol = 1e-4;

struct IkSolutionSet {
  std::vector<JointConfig> solutions;
  bool sorted{false};
};

/// Transform of DH frame i (0 = arm base, 6 = flange).
std::array<Transform3D, 7> dh_frames(const ArmModel& model, const JointConfig& q);
Transform3D fk_flange(const ArmModel& model, const JointConfig& q);

/// TCP pose in the arm-base frame. Throws JointLimit when q is out of limits.
Transform3D fk(const ArmModel& model, const JointConfig& q);

/// Geometric Jacobian of the TCP: rows 0-2 linear velocity, rows 3-5
/// angular velocity, both in the arm-base frame.
Jacobian jacobian(const ArmModel& model, const JointConfig& q);

/// Yoshikawa manipulability sqrt(det(J J^T)).
double manipulability(const Jacobian& j);

/// Closed-form enumeration for UR-style geometry: shoulder x wrist x elbow,
/// at most 8 solutions, each FK-verified and returned in (-pi, pi].
IkSolutionSet ik_all(const ArmModel& model, const Transform3D& target);

double weighted_joint_distance(const JointConfig& a, const JointConfig& b,
                               const std::array<double, 6>& weights = kDefaultJointWeights);

/// Stable ascending sort by weighted squared joint distance to `current`.
IkSolutionSet sort_by_distance(const IkSolutionSet& set, const JointConfig& current,
                               const std::array<double, 6>& weights = kDefaultJointWeights);

/// Shifts each joint of `q` by multiples of 2pi to land closest to
/// `reference` while staying inside the model limits.
JointConfig unwrap_near(const ArmModel& model, const JointConfig& q, const JointConfig& reference);

enum class JogDirection { PosX, NegX, PosY, NegY, PosZ, NegZ };

Vec3 jog_axis(JogDirection direction);
JogDirection opposite(JogDirection direction);
const char* to_string(JogDirection direction);
std::optional<JogDirection> jog_direction_from_string(const std::string& s);

inline constexpr double kSingularManipulability = 1e-4;

/// Tool-frame Cartesian jog via damped least-squares differential IK.
/// Throws OutOfRange, Singular, JointLimit or NoConverge.
JointConfig jog_delta(const ArmModel& model, const JointConfig& current, JogDirection direction,
                      double step = 0.005);

/// Newton/DLS refinement of `seed` towards a TCP target. Returns nullopt if
/// it does not reach 1e-9 m / 1e-9 rad within the iteration budget.
std::optional<JointConfig> solve_ik_near(const ArmModel& model, const Transform3D& target,
                                         const JointConfig& seed, int max_iterations = 50);

}  // namespace mtend
