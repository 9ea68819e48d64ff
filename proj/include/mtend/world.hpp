#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtend/arm.hpp"
#include "mtend/geometry.hpp"

namespace mtend {

/// Height every static 2D obstacle is extruded to for 3D sensing.
inline constexpr double kObstacleHeight = 1.0;

using Polygon = std::vector<Vec2>;

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
};

struct Part {
  Transform3D pose;
  double radius{0.03};
};

struct DynamicWaypoint {
  double t{0.0};
  double x{0.0};
  double y{0.0};
};

/// Scripted disc obstacle; moves piecewise-linearly between waypoints.
struct DynamicObstacle {
  double radius{0.2};
  std::vector<DynamicWaypoint> waypoints;
};

struct FloorBounds {
  Vec2 min{0.0, 0.0};
  Vec2 max{10.0, 10.0};
};

class MeshIndex;

struct Scene {
  std::vector<Polygon> static_obstacles;
  TriangleMesh machine_mesh;
  std::optional<Part> part;
  std::vector<DynamicObstacle> dynamic_obstacles;
  FloorBounds floor_bounds;

  /// Builds the triangle acceleration structure. Must be called after the
  /// mesh is edited; load_scenario does it for you.
  void finalize();
  const MeshIndex* mesh_index() const { return index_.get(); }

 private:
  std::shared_ptr<const MeshIndex> index_;
};

struct LinkSphere {
  Vec3 center{Vec3::Zero()};
  double radius{0.05};
};

struct RobotModel {
  double base_radius{0.25};
  double wheel_base{0.4};
  double max_v{0.5};
  double max_omega{1.0};
  double max_accel{0.5};
  double lidar_height{0.2};
  Transform3D arm_mount{Transform3D::from_translation({0.0, 0.0, 0.45})};
  /// Sphere decomposition per collision link. Link k is rigidly attached to
  /// DH frame k+1; the last entry belongs to the gripper (TCP frame).
  std::vector<std::vector<LinkSphere>> link_spheres;
};

/// Sensor noise parameters. Angles in radians.
struct NoiseConfig {
  double odom_distance_fraction{0.01};
  double odom_dtheta_std{0.5 * kPi / 180.0};
  double imu_rate_std{0.005};
  double imu_bias{0.001};
  double lidar_range_std{0.01};
  double depth_std{0.002};
  /// Variance of the integrated-heading measurement used by the EKF.
  double ekf_yaw_variance{1e-4};
};

struct Scenario {
  Scene scene;
  RobotModel robot;
  ArmModel arm;
  Pose2D start;
  NoiseConfig noise;
};

struct RayHit {
  double distance{0.0};
  Vec3 point{Vec3::Zero()};
  Vec3 normal{Vec3::Zero()};
};

Scenario load_scenario(const std::filesystem::path& path);
Scenario parse_scenario(const nlohmann::json& doc);
nlohmann::json scenario_to_json(const Scenario& scenario);
void save_scenario(const Scenario& scenario, const std::filesystem::path& path);

/// Throws Validation naming the offending field.
void validate(const Scene& scene);
void validate(const RobotModel& robot);

bool polygon_is_simple(const Polygon& poly);
bool point_in_polygon(const Polygon& poly, const Vec2& p);

/// Default link spheres for a DH arm, 6-10 per link.
std::vector<std::vector<LinkSphere>> default_link_spheres(const ArmModel& arm);

/// Nearest hit against mesh, extruded obstacles and the part. When `t` is
/// given the dynamic discs at that time are included (as 1 m cylinders).
std::optional<RayHit> raycast(const Scene& scene, const Vec3& origin, const Vec3& direction,
                              double max_range, std::optional<double> t = std::nullopt);

/// Disc center of dynamic obstacle `id` at time t (clamped to the script).
Vec2 dynamic_obstacle_pose(const Scene& scene, std::size_t id, double t);

// Low-level intersection primitives shared with the sensor models.
std::optional<double> intersect_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                         const Vec3& b, const Vec3& c);
std::optional<double> intersect_sphere(const Vec3& origin, const Vec3& dir, const Vec3& center,
                                       double radius);

nlohmann::json to_json(const Transform3D& t);
Transform3D transform_from_json(const nlohmann::json& j, const std::string& field);
nlohmann::json to_json(const Pose2D& p);
Pose2D pose_from_json(const nlohmann::json& j, const std::string& field);

}  // namespace mtend
