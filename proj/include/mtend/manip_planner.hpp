#pragma once

#include <atomic>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtend/arm.hpp"
#include "mtend/base_nav.hpp"
#include "mtend/geometry.hpp"
#include "mtend/perception.hpp"
#include "mtend/world.hpp"

namespace mtend {

struct Sphere {
  Vec3 center{Vec3::Zero()};
  double radius{0.0};
};

/// Part carried by the gripper, approximated by an engulfing sphere.
struct AttachedPart {
  double radius{0.0};
  /// Sphere center relative to the TCP.
  Transform3D offset;
};

/// Engulf sphere radius relative to the scenario part radius.
inline constexpr double kPartEngulfMargin = 1.2;

/// Environment snapshot for arm collision queries. The fused cloud and the
/// optional regions are expressed in the arm-base frame at `base_pose`; the
/// grid lives in the world frame.
struct CollisionWorld {
  UncertainPointCloud ucloud;
  OccupancyGrid grid;
  Pose2D base_pose;
  std::optional<AttachedPart> attached_part;
  /// Fused points inside this sphere are ignored (the object being grasped).
  std::optional<Sphere> ignore_region;
  /// Occupied grid cells are treated as columns from the floor to this
  /// height (world z).
  double grid_column_height{0.3};
};

/// Throws Validation when the attached part radius is not positive.
void validate(const CollisionWorld& world);

/// Arm-base frame in the world for a base pose.
Transform3D arm_base_in_world(const RobotModel& robot, const Pose2D& base_pose);

/// Collision links: 0-5 follow the DH frames, 6 is the gripper and
/// kAttachedPartLink is the carried part.
inline constexpr int kAttachedPartLink = 7;
/// Grid clearance is exact up to this distance and saturates beyond it.
inline constexpr double kGridClearanceRange = 0.5;

struct ConfigCheck {
  bool collision{false};
  /// Smallest sphere surface to obstacle distance (m); +inf with no obstacle.
  double min_clearance{std::numeric_limits<double>::infinity()};
  std::optional<int> witness;
};

/// Link spheres of the arm (and the attached part) in the arm-base frame.
std::vector<std::pair<int, Sphere>> placed_spheres(const RobotModel& robot, const ArmModel& arm,
                                                   const JointConfig& q,
                                                   const std::optional<AttachedPart>& part = std::nullopt);

/// Immutable collision snapshot with spatial indices; build once per query.
class CollisionChecker {
 public:
  CollisionChecker(const CollisionWorld& world, const RobotModel& robot, const ArmModel& arm);
  ~CollisionChecker();
  CollisionChecker(CollisionChecker&&) noexcept;
  CollisionChecker& operator=(CollisionChecker&&) noexcept;

  ConfigCheck check(const JointConfig& q) const;
  bool free(const JointConfig& q) const { return !check(q).collision; }
  /// Collision-free at every step of a joint-linear sweep with at most
  /// `resolution` rad per joint between checks (both ends included).
  bool sweep_free(const JointConfig& a, const JointConfig& b, double resolution = 0.05) const;

  const RobotModel& robot() const;
  const ArmModel& arm() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// One-shot query; prefer CollisionChecker for repeated checks.
ConfigCheck check_config(const CollisionWorld& world, const RobotModel& robot, const ArmModel& arm,
                         const JointConfig& q);

enum class TrajectoryKind { Scan, Approach, Retract, Jog };

const char* to_string(TrajectoryKind kind);
std::optional<TrajectoryKind> trajectory_kind_from_string(const std::string& s);

/// Joint-space trajectory. Consecutive waypoints differ by at most
/// kTrajectoryStep rad per joint.
struct ArmTrajectory {
  std::vector<JointConfig> waypoints;
  std::vector<double> timestamps;
  TrajectoryKind kind{TrajectoryKind::Approach};
  /// Waypoint indices where a depth capture is taken.
  std::vector<std::size_t> captures;

  double duration() const { return timestamps.empty() ? 0.0 : timestamps.back() - timestamps.front(); }
};

inline constexpr double kTrajectoryStep = 0.05;
inline constexpr double kJointVelocityLimit = 1.0;
inline constexpr double kCartesianStep = 0.01;

/// Inserts joint-linear waypoints so no joint moves more than `step` between
/// neighbours, drops repeated configurations and assigns timestamps under
/// the joint velocity limit. Capture indices are remapped.
ArmTrajectory time_parameterize(const std::vector<JointConfig>& path, TrajectoryKind kind,
                                const std::vector<std::size_t>& captures = {}, double start_time = 0.0);

/// Independent post-hoc sweep: every consecutive pair checked at
/// `resolution` rad. Returns the first offending segment, if any.
std::optional<std::size_t> sweep_violation(const ArmTrajectory& traj, const CollisionChecker& checker,
                                           double resolution = 0.05);

nlohmann::json to_json(const ArmTrajectory& traj);
ArmTrajectory arm_trajectory_from_json(const nlohmann::json& j);

struct ManipOptions {
  /// Polled between roadmap batches and path segments.
  const std::atomic<bool>* cancel{nullptr};
  std::uint64_t seed{1};
  int roadmap_batch{200};
  int roadmap_max_samples{1200};
  int neighbors{10};
};

/// TCP target that puts the camera at `camera_pose` (both arm-base frame).
Transform3D tcp_for_camera(const ArmModel& arm, const Transform3D& camera_pose);
Transform3D camera_pose(const ArmModel& arm, const JointConfig& q);

/// Moves to the first profile waypoint (point to point), then follows the
/// straight tool-pose interpolation between consecutive camera poses.
/// Throws Unreachable(waypoint), BranchJump(waypoint), CollisionOnPath(segment)
/// or NoPath.
ArmTrajectory plan_scan_trajectory(const RobotModel& robot, const ArmModel& arm, const ScanProfile& profile,
                                   const JointConfig& current, const CollisionWorld& world,
                                   const ManipOptions& options = {});

/// Straight tool-pose motion from `start` to `target` at <= 1 cm steps,
/// tracking the current IK branch. Throws BranchJump, NoConverge or
/// CollisionOnPath(0).
ArmTrajectory plan_cartesian(const CollisionChecker& checker, const JointConfig& start, const Transform3D& target,
                             TrajectoryKind kind);

/// Straight joint interpolation when its sweep is free, otherwise a lazy
/// Halton roadmap search with shortcut smoothing. Deterministic. Throws
/// NoPath, CollisionOnPath (start or goal in collision) or Cancelled.
ArmTrajectory plan_point_to_point(const CollisionChecker& checker, const JointConfig& start,
                                  const JointConfig& goal, TrajectoryKind kind = TrajectoryKind::Approach,
                                  const ManipOptions& options = {});
ArmTrajectory plan_point_to_point(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                                  const JointConfig& start, const JointConfig& goal,
                                  const ManipOptions& options = {});

struct GraspProfile {
  std::string name;
  /// Direction of the final approach motion, world frame.
  Vec3 approach_axis{0.0, 0.0, -1.0};
  /// Gripper orientation in the world frame.
  Mat3 orientation{Mat3::Identity()};
  double pregrasp_offset{0.10};

  /// Approach straight down with the tool z axis along the approach.
  static GraspProfile top_down(const std::string& name = "top_down");
};

/// Throws Validation naming the field.
void validate(const GraspProfile& profile);
nlohmann::json to_json(const GraspProfile& profile);
GraspProfile grasp_profile_from_json(const nlohmann::json& j);

struct PregraspResult {
  /// TCP target in the arm-base frame.
  Transform3D target;
  IkSolutionSet solutions;
  /// Parallel to solutions: true when collision-free.
  std::vector<bool> collision_free;
};

/// Grasp TCP pose for a part (arm-base frame): part center with the profile
/// orientation, optionally backed off along the approach axis.
Transform3D grasp_tcp_pose(const RobotModel& robot, const Pose2D& base_pose, const Transform3D& part_pose,
                           const GraspProfile& profile, double backoff);

PregraspResult resolve_pregrasp(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                                const Transform3D& part_pose, const GraspProfile& profile,
                                const JointConfig& current);

enum class JogRefusal { None, Collision, Singular, JointLimit, NoConverge };

const char* to_string(JogRefusal reason);

struct JogResult {
  bool ok{false};
  JogRefusal reason{JogRefusal::None};
  /// Jogged configuration when ok, otherwise the input.
  JointConfig q{JointConfig::Zero()};
};

inline constexpr int kJogSweepSteps = 5;

JogResult validate_jog(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                       const JointConfig& current, JogDirection direction, double step);

/// Point-to-point plan with the attached part sphere in every query,
/// preceded by a straight `lift` back along the tool axis when that is free.
/// Throws Validation without an attached part, NoPath otherwise.
ArmTrajectory plan_retract(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                           const JointConfig& grasp_config, const JointConfig& home, double lift = 0.10,
                           const ManipOptions& options = {});

inline constexpr double kGraspAxialTolerance = 0.04;
inline constexpr double kGraspLateralTolerance = 0.02;

struct GraspOutcome {
  bool grasped{false};
  /// Set on success: part sphere relative to the TCP.
  std::optional<AttachedPart> attached;
};

/// Finger-span predicate: part center within 0.04 m of the TCP along the
/// tool approach axis and within 0.02 m laterally. `part_pose` is in the
/// world frame.
GraspOutcome grasp_close(const RobotModel& robot, const ArmModel& arm, const Pose2D& base_pose,
                         const JointConfig& q, const Part& part);

/// Arm folded over the base, used while driving.
JointConfig home_config();

}  // namespace mtend
