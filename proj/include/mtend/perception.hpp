#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtend/geometry.hpp"
#include "mtend/world.hpp"

namespace mtend {

enum class ScanShape { Hemisphere, Arc, Raster };

const char* to_string(ScanShape shape);
ScanShape scan_shape_from_string(const std::string& s);

/// Camera poses (arm-base frame) visited during a scan. The camera looks
/// along its local +z axis.
struct ScanProfile {
  std::string name;
  std::vector<Transform3D> waypoints;
  ScanShape shape{ScanShape::Arc};
  double standoff{0.3};
  Vec3 target{Vec3::Zero()};
};

inline constexpr double kMinStandoff = 0.15;
inline constexpr double kMaxStandoff = 0.8;

/// hemisphere: Fibonacci samples of the upper hemisphere at radius standoff;
/// arc: +-60 degrees in the vertical plane across the base-to-target
/// direction; raster: grid on the plane standoff above the target. Every
/// waypoint looks at the target. Throws OutOfRange.
ScanProfile generate_scan_profile(ScanShape shape, double standoff, const Vec3& target, int count,
                                  const std::string& name = "");

nlohmann::json to_json(const ScanProfile& profile);
ScanProfile scan_profile_from_json(const nlohmann::json& j);

struct PointCloud {
  static constexpr std::size_t kMaxPoints = 200000;

  std::vector<Vec3> points;
  /// Camera position per point (same size as points, or empty).
  std::vector<Vec3> viewpoints;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct DepthCamera {
  int width{64};
  int height{48};
  double hfov{60.0 * kPi / 180.0};
  double vfov{45.0 * kPi / 180.0};
  double min_range{0.15};
  double max_range{1.5};

  /// Unit ray through the center of pixel (u, v), camera frame.
  Vec3 ray(int u, int v) const;
};

/// One raycast per pixel from `camera` (pose in the output frame), with
/// Gaussian range noise along the ray. `world_from_frame` maps the output
/// frame into the scene. `rng` may be null for a noise-free capture.
PointCloud capture_depth(const Scene& scene, const Transform3D& camera, double noise_sigma, std::mt19937_64* rng,
                         const Transform3D& world_from_frame = Transform3D::identity(), double t = 0.0,
                         const DepthCamera& intrinsics = {});

inline constexpr double kVoxelSize = 0.005;
inline constexpr int kNormalNeighbors = 8;
inline constexpr double kOutlierFactor = 2.5;

/// Voxel centroids (5 mm) of the concatenated clouds, then removal of points
/// whose mean 8-NN distance exceeds 2.5x the global mean. Output order is by
/// voxel key. Throws OutOfRange above PointCloud::kMaxPoints.
PointCloud voxel_downsample(const PointCloud& cloud, double voxel = kVoxelSize);
PointCloud remove_outliers(const PointCloud& cloud, int k = kNormalNeighbors, double factor = kOutlierFactor);
PointCloud stitch(const std::vector<PointCloud>& clouds);

struct NormalEstimate {
  std::vector<Vec3> normals;
  /// Collinear or too-small neighborhoods.
  std::vector<bool> degenerate;
};

/// PCA over the 8 nearest neighbors; the normal faces the point's viewpoint
/// (or +z when the cloud has none). Throws Validation below 8 points.
NormalEstimate estimate_normals(const PointCloud& cloud, int k = kNormalNeighbors);

struct UncertainPoint {
  Vec3 p{Vec3::Zero()};
  Vec3 n{Vec3::UnitZ()};
  /// Std dev along n (m); +inf marks a degenerate entry.
  double sigma{0.0};
  std::uint32_t support{1};
};

struct UncertainPointCloud {
  std::vector<UncertainPoint> entries;
};

struct CameraScan {
  PointCloud cloud;
  Transform3D camera;
};

/// Axial / lateral extent of the neighborhood gathered per fused entry.
inline constexpr double kFusionAxialWindow = 0.025;
inline constexpr double kFusionLateralRadius = kVoxelSize;
/// Neighborhood radius for the coarse normal behind each multi-scan mean.
inline constexpr double kFusionMeanRadius = 4.0 * kVoxelSize;

/// Stitch; replace each voxel by the mean of the raw points in a cylinder
/// along a coarse normal (PCA over 20 mm); estimate normals on those means;
/// then gather raw points of every scan in
/// a cylinder around each entry's normal: p is their mean, sigma the sample
/// std of their signed distances along n, support the number of scans
/// contributing. Throws Validation with fewer than 2 scans.
UncertainPointCloud fuse(const std::vector<CameraScan>& scans);

struct UncertaintyAlert {
  double max_sigma{0.0};
  bool alert{false};
};

inline constexpr double kDefaultSigmaThreshold = 0.01;

/// Max sigma over entries inside the sphere. Throws Validation for a
/// non-positive radius and EmptyRegion when no entry lies inside.
UncertaintyAlert uncertainty_alert(const UncertainPointCloud& cloud, const Vec3& center, double radius,
                                   double threshold = kDefaultSigmaThreshold);

/// Little-endian: uint64 count, then per entry 7 float64 (p, n, sigma) and
/// a uint32 support.
void write_binary(std::ostream& out, const UncertainPointCloud& cloud);
UncertainPointCloud read_binary(std::istream& in);
nlohmann::json to_json(const UncertainPointCloud& cloud);
UncertainPointCloud ucloud_from_json(const nlohmann::json& j);

/// Transforms every point (and viewpoint) of the cloud.
PointCloud transformed(const PointCloud& cloud, const Transform3D& t);

/// Nearest-neighbor index over 3D points (R-tree).
class PointIndex {
 public:
  explicit PointIndex(const std::vector<Vec3>& points);
  ~PointIndex();
  PointIndex(PointIndex&&) noexcept;
  PointIndex& operator=(PointIndex&&) noexcept;

  /// Indices of the k nearest points, closest first (ties by index).
  std::vector<std::size_t> nearest(const Vec3& p, std::size_t k) const;
  /// Indices of points inside the axis-aligned box [lo, hi].
  std::vector<std::size_t> in_box(const Vec3& lo, const Vec3& hi) const;
  /// Indices within `radius` of p, ascending.
  std::vector<std::size_t> within(const Vec3& p, double radius) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mtend
