#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtend/base_nav.hpp"
#include "mtend/geometry.hpp"

namespace mtend {

/// 8-connected cell path from a start pose to a goal pose.
struct GlobalPath {
  Pose2D start;
  Pose2D goal;
  std::vector<Cell> cells;
  /// Cell centers with headings facing the next waypoint.
  std::vector<Pose2D> waypoints;
  double length{0.0};
};

/// A* over the inflated grid with unit / sqrt(2) step costs and a Euclidean
/// heuristic. Equal-priority ties pop the lower (row, col) first.
/// Throws StartOccupied, GoalOccupied or NoPath.
GlobalPath plan_global(const OccupancyGrid& grid, const Pose2D& start, const Pose2D& goal);

/// Builds a GlobalPath from a polyline (e.g. a roadmap route) by tracing the
/// cells between consecutive vertices.
GlobalPath path_from_polyline(const OccupancyGrid& grid, const Pose2D& start, const Pose2D& goal,
                              const std::vector<Vec2>& polyline);

inline constexpr double kBandDtMin = 0.05;
inline constexpr double kBandDtMax = 1.0;
inline constexpr std::size_t kBandMinNodes = 5;
inline constexpr std::size_t kBandMaxNodes = 200;

struct BandNode {
  Pose2D pose;
  /// Duration of the segment to the next node; 0 on the last node.
  double dt{0.0};
};

struct TimedElasticBand {
  std::vector<BandNode> nodes;

  double duration() const;
  double length() const;
  /// Pose at time t along the band (linear in position, shortest-arc in
  /// heading), clamped to the endpoints.
  Pose2D pose_at(double t) const;
  /// Segment (v, omega) at time t; zero after the end.
  VelocityCommand velocity_at(double t) const;
};

/// Subsamples the path at <= 0.25 m spacing (at least five nodes unless the
/// path has zero length, which yields a two-node rotation band).
TimedElasticBand init_band(const GlobalPath& path, double nominal_speed);

struct BandWeights {
  double time{1.0};
  double obstacle{50.0};
  double velocity{2.0};
  double acceleration{1.0};
  double kinematics{1000.0};
  /// Forward-drive preference and soft inflation pull (centering).
  double forward_drive{1.0};
  double inflation{1.0};
};

struct BandObjectives {
  BandWeights weights;
  double min_obstacle_distance{0.3};
  double min_turn_radius{0.0};
  /// Soft clearance target beyond which obstacles stop pulling.
  double inflation_distance{0.6};
  double base_radius{0.25};
  double max_v{0.5};
  double max_omega{1.0};
  double max_accel{0.5};
  double max_alpha{2.5};
  /// Velocity at the first node (non-zero when replanning while moving).
  double start_v{0.0};
  double start_omega{0.0};
  int max_outer_iterations{50};
  int inner_iterations{5};
  /// Polled between iterations; set to abandon the optimization.
  const std::atomic<bool>* cancel{nullptr};

  static BandObjectives for_robot(const RobotModel& robot);
};

/// Disc obstacle present at the planning instant.
struct DiscObstacle {
  Vec2 center;
  double radius{0.0};
};

struct CostReport {
  double total{0.0};
  double time{0.0};
  double obstacle{0.0};
  double velocity{0.0};
  double acceleration{0.0};
  double kinematics{0.0};
  int iterations{0};
  double min_clearance{0.0};
  bool feasible{false};
  /// Cost after each accepted iteration (non-increasing between node
  /// insertions / removals).
  std::vector<double> history;
};

struct OptimizedBand {
  TimedElasticBand band;
  CostReport report;
};

/// Footprint clearance (m) of a base centered at p: distance to the nearest
/// occupied cell surface or disc, minus the base radius.
double base_clearance(const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs, const Vec2& p,
                      double base_radius);

/// Sparse Levenberg-Marquardt over interior poses and segment durations with
/// node insertion/removal between outer iterations. Endpoints never move.
/// Throws DivergedBand or Cancelled.
OptimizedBand optimize_band(const TimedElasticBand& band, const BandObjectives& objectives,
                            const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs = {});

/// Weighted scalar cost of a band without optimizing it.
CostReport evaluate_band(const TimedElasticBand& band, const BandObjectives& objectives, const OccupancyGrid& grid,
                         const std::vector<DiscObstacle>& discs = {});

/// All nodes (and segments sampled at 1 cm) outside lethal cells and discs.
bool band_feasible(const TimedElasticBand& band, const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs,
                   double base_radius);

/// Minimum footprint clearance over the band sampled at 1 cm.
double band_min_clearance(const TimedElasticBand& band, const OccupancyGrid& grid,
                          const std::vector<DiscObstacle>& discs, double base_radius);

using HomotopySignature = std::vector<int>;

/// One representative point per enclosed occupied region (components that
/// touch the grid border are skipped).
std::vector<Vec2> obstacle_representatives(const OccupancyGrid& grid);

/// Signed crossings of the upward vertical ray from each representative.
HomotopySignature homotopy_signature(const std::vector<Vec2>& polyline, const std::vector<Vec2>& representatives);
HomotopySignature homotopy_signature(const GlobalPath& path, const std::vector<Vec2>& representatives);

struct HomotopyOptions {
  int samples{400};
  int neighbors{10};
  double max_length_ratio{2.0};
  int yen_paths{40};
};

/// Up to k_max roadmap routes with pairwise-distinct signatures, shortest
/// first. Deterministic for a fixed seed. Throws NoPath.
std::vector<GlobalPath> enumerate_homotopy_candidates(const OccupancyGrid& grid, const Pose2D& start,
                                                      const Pose2D& goal, std::size_t k_max = 4,
                                                      std::uint64_t seed = 1, const HomotopyOptions& options = {});

/// Index of the lowest-cost feasible band (stable). Throws AllInfeasible.
std::size_t select_best(const std::vector<OptimizedBand>& bands);

struct RoutePlan {
  std::vector<OptimizedBand> candidates;
  std::vector<HomotopySignature> signatures;
  std::size_t best{0};

  const OptimizedBand& chosen() const { return candidates.at(best); }
};

/// Enumerate candidates, optimize them concurrently, select the best.
/// `via` forces the route through an intermediate point.
RoutePlan plan_route(const OccupancyGrid& grid, const Pose2D& start, const Pose2D& goal,
                     const BandObjectives& objectives, const std::vector<DiscObstacle>& discs = {},
                     std::uint64_t seed = 1, std::optional<Vec2> via = std::nullopt);

/// Lidar returns not explained by the static map, clustered and fitted
/// with circles.
std::vector<DiscObstacle> detect_dynamic_obstacles(const OccupancyGrid& static_grid, const LidarScan& scan,
                                                   const Pose2D& pose);

struct ReplanResult {
  OptimizedBand band;
  std::vector<DiscObstacle> discs;
  bool fell_back{false};
};

/// Injects dynamic obstacles seen in `scan` into the static map, then
/// re-optimizes the remainder of `band` from `pose`, warm-started. Falls back
/// to a full enumerate + optimize when the warm start diverges or ends up
/// infeasible. Throws AllInfeasible.
ReplanResult replan_local(const TimedElasticBand& band, const OccupancyGrid& static_grid, const LidarScan& scan,
                          const Pose2D& pose, double elapsed, const BandObjectives& objectives,
                          std::uint64_t seed = 1);

struct DriveSample {
  double t{0.0};
  Pose2D pose;
};

struct DriveResult {
  std::vector<DriveSample> trace;
  TimedElasticBand final_band;
  int replans{0};
  int fallbacks{0};
  bool reached{false};
  /// Set when replanning gave up (AllInfeasible); the base stopped.
  bool halted{false};
};

/// Plays `band` back kinematically at 50 Hz in the scenario, sensing with the
/// lidar and calling replan_local every `replan_period` seconds.
DriveResult drive_band(const Scenario& scenario, const OccupancyGrid& static_grid, TimedElasticBand band,
                       const BandObjectives& objectives, std::uint64_t seed, double replan_period = 0.1,
                       double timeout = 120.0);

nlohmann::json to_json(const TimedElasticBand& band, const CostReport& report,
                       const HomotopySignature& signature = {});

}  // namespace mtend
