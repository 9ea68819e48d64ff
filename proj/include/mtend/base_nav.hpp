#pragma once

#include <atomic>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtend/geometry.hpp"
#include "mtend/world.hpp"

namespace mtend {

using Rng = std::mt19937_64;

struct VelocityCommand {
  double v{0.0};
  double omega{0.0};
};

struct BaseState {
  Pose2D truth;
  double v{0.0};
  double omega{0.0};
};

/// Exact constant-velocity integration over dt (straight line when
/// |omega| < 1e-6, circular arc otherwise).
Pose2D integrate_arc(const Pose2D& pose, double v, double omega, double dt);

/// One simulator tick. dt must lie in (0, 0.1]; the command is clamped to
/// the velocity limits and to the acceleration bound (linear: max_accel,
/// angular: max_accel / (wheel_base / 2)) before integration.
BaseState step_base(const BaseState& state, const VelocityCommand& cmd, double dt, const RobotModel& robot);

struct OdometryReading {
  double dv{0.0};      // travelled distance over the tick, m
  double dtheta{0.0};  // heading change over the tick, rad
};

struct ImuReading {
  double yaw_rate{0.0};
};

/// Wheel-encoder increments with Gaussian noise. A stationary base reads
/// exactly zero.
OdometryReading read_odometry(const BaseState& state, double dt, const NoiseConfig& noise, Rng& rng);

/// Gyro yaw rate with constant bias and Gaussian noise.
ImuReading read_imu(const BaseState& state, double dt, const NoiseConfig& noise, Rng& rng);

struct EkfEstimate {
  Pose2D mean;
  Mat3 covariance{Mat3::Identity() * 1e-6};
  /// Heading integrated from the gyro; the yaw update measures against it.
  double imu_heading{0.0};

  static EkfEstimate at(const Pose2D& pose, double variance = 1e-6);
};

/// Propagates the mean through the exact-arc unicycle model;
/// P = F P F^T + G diag(sd^2, sth^2) G^T.
EkfEstimate ekf_predict(const EkfEstimate& est, const OdometryReading& odom, const NoiseConfig& noise);

/// Integrates the gyro over dt and corrects the heading against it with
/// measurement variance r (Joseph form). r = +inf leaves mean/covariance
/// untouched.
EkfEstimate ekf_update_yaw(const EkfEstimate& est, double imu_yaw_rate, double dt, double r);
EkfEstimate ekf_update_yaw(const EkfEstimate& est, double imu_yaw_rate, double dt, const NoiseConfig& noise);

struct LidarScan {
  static constexpr double kNoReturn = std::numeric_limits<double>::infinity();
  static constexpr int kBeams = 360;

  double timestamp{0.0};
  double angle_min{-kPi};
  double angle_increment{2.0 * kPi / kBeams};
  double max_range{8.0};
  std::vector<double> ranges;

  double angle_max() const { return angle_min + angle_increment * (static_cast<double>(ranges.size()) - 1.0); }
  double bearing(std::size_t i) const { return angle_min + angle_increment * static_cast<double>(i); }
};

/// 360 horizontal raycasts at 1 degree spacing from the lidar height,
/// including dynamic obstacles at time t. `rng` may be null for a
/// noise-free scan.
LidarScan simulate_lidar(const Scene& scene, const Pose2D& truth_pose, double t, const RobotModel& robot,
                         const NoiseConfig& noise, Rng* rng);

enum class CellState { Free, Unknown, Occupied };

struct Cell {
  int row{0};
  int col{0};
  friend bool operator==(const Cell&, const Cell&) = default;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

/// Log-odds occupancy grid. Rows run along +y, columns along +x of the
/// grid origin. Derived layers (distance field, inflation) are computed on
/// first use and shared between copies until either copy is modified.
class OccupancyGrid {
 public:
  static constexpr double kClamp = 4.0;
  static constexpr double kHitLogOdds = 0.85;
  static constexpr double kMissLogOdds = -0.4;
  static constexpr double kOccupiedProbability = 0.65;
  static constexpr double kFreeProbability = 0.35;

  OccupancyGrid() = default;
  OccupancyGrid(double resolution, const Pose2D& origin, int width, int height, double inflation_radius);

  /// Grid spanning the floor rectangle.
  static OccupancyGrid covering(const FloorBounds& floor, double resolution, double inflation_radius);

  double resolution() const { return resolution_; }
  const Pose2D& origin() const { return origin_; }
  int width() const { return width_; }
  int height() const { return height_; }
  double inflation_radius() const { return inflation_radius_; }
  void set_inflation_radius(double r);

  bool in_bounds(const Cell& c) const { return c.row >= 0 && c.col >= 0 && c.row < height_ && c.col < width_; }
  Cell world_to_cell(const Vec2& p) const;
  Vec2 cell_center(const Cell& c) const;

  double log_odds(const Cell& c) const { return log_odds_[index(c)]; }
  void set_log_odds(const Cell& c, double value);
  void add_log_odds(const Cell& c, double delta);
  double probability(const Cell& c) const;
  CellState state(const Cell& c) const;
  bool occupied(const Cell& c) const { return state(c) == CellState::Occupied; }

  /// Marks every cell whose center lies within the disc as occupied (+clamp).
  void stamp_disc(const Vec2& center, double radius);

  /// Within inflation_radius of an occupied cell (or occupied itself).
  /// Out-of-bounds cells are lethal.
  bool lethal(const Cell& c) const;
  bool lethal_at(const Vec2& p) const;

  /// Distance from the cell center to the nearest occupied cell center (m);
  /// +inf when the map holds no occupied cell.
  double obstacle_distance(const Cell& c) const;

  /// Bilinear signed distance: positive in free space, negative inside
  /// occupied regions.
  double signed_distance(const Vec2& p) const;

  std::vector<Cell> occupied_cells() const;
  std::uint64_t version() const { return version_; }

 private:
  struct Layers {
    std::once_flag once;
    std::atomic<bool> ready{false};
    std::vector<double> dist_to_occupied;  // meters
    std::vector<double> dist_to_free;
    std::vector<std::uint8_t> lethal;
  };

  std::size_t index(const Cell& c) const { return static_cast<std::size_t>(c.row) * width_ + c.col; }
  const Layers& layers() const;
  void invalidate();

  double resolution_{0.05};
  Pose2D origin_;
  int width_{0};
  int height_{0};
  double inflation_radius_{0.5};
  std::vector<double> log_odds_;
  std::uint64_t version_{0};
  mutable std::shared_ptr<Layers> layers_{std::make_shared<Layers>()};
};

/// Squared Euclidean distance transform (in cells^2) of a binary mask.
std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seeds, int width, int height);

/// Cells visited by the segment from a to b (Bresenham), both included.
std::vector<Cell> trace_cells(const Cell& a, const Cell& b);

/// Prior map from scene geometry: a cell is occupied when its center lies
/// inside a static polygon (or the footprint of a mesh triangle lower than
/// max_height) or within half a cell diagonal of its boundary.
OccupancyGrid rasterize_scene(const Scene& scene, double resolution, double inflation_radius,
                              double max_height = 0.6);

/// Inverse sensor model update. `pose_time` must match the scan timestamp
/// within one 50 Hz tick.
OccupancyGrid update_map(const OccupancyGrid& grid, const LidarScan& scan, const Pose2D& est_pose, double pose_time);

/// Fixed-rate simulator of the base: ground truth, sensor reads, the EKF and
/// an odometry-only dead-reckoning estimate for comparison.
class BaseSimulator {
 public:
  static constexpr double kTick = 0.02;

  BaseSimulator(const Scenario& scenario, std::uint64_t seed);

  /// One 50 Hz tick under `cmd`.
  void tick(const VelocityCommand& cmd);
  /// Noisy lidar scan at the current time and true pose.
  LidarScan scan();
  /// Moves the true pose (teleport); estimates are reset to it.
  void reset(const Pose2D& pose);
  /// Zeroes the wheel velocities at once (emergency stop).
  void stop();

  double time() const { return t_; }
  const BaseState& state() const { return state_; }
  const EkfEstimate& estimate() const { return est_; }
  const Pose2D& dead_reckoning() const { return dead_reckoning_; }
  const Scenario& scenario() const { return *scenario_; }

 private:
  const Scenario* scenario_;
  Rng rng_;
  double t_{0.0};
  BaseState state_;
  EkfEstimate est_;
  Pose2D dead_reckoning_;
};

/// Telemetry frame pushed to consoles; field names are part of the wire
/// contract.
nlohmann::json telemetry_frame(double t, const Pose2D& truth, const EkfEstimate& est, double v, double omega,
                               const LidarScan& scan, int downsample = 10);

}  // namespace mtend
