#include "mtend/manip_planner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <random>
#include <set>
#include <tuple>
#include <variant>

#include "mtend/error.hpp"

namespace mtend {

using json = nlohmann::json;

namespace {

double max_abs_delta(const JointConfig& a, const JointConfig& b) { return (b - a).cwiseAbs().maxCoeff(); }

void throw_if_cancelled(const ManipOptions& options) {
  if (options.cancel && options.cancel->load()) throw Error(ErrorCode::Cancelled, "arm planning cancelled");
}

/// Distance from p to the axis-aligned box [lo, hi]; zero inside.
double box_distance(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  const Vec3 d = (lo - p).cwiseMax(p - hi).cwiseMax(Vec3::Zero());
  return d.norm();
}

double halton(std::uint64_t index, std::uint64_t base) {
  double f = 1.0, r = 0.0;
  while (index > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(index % base);
    index /= base;
  }
  return r;
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace

void validate(const CollisionWorld& world) {
  if (world.attached_part && !(world.attached_part->radius > 0.0))
    throw Error(ErrorCode::Validation, "attached_part.radius must be > 0");
  if (world.attached_part && !world.attached_part->offset.is_valid(1e-6))
    throw Error(ErrorCode::Validation, "attached_part.offset is not a rigid transform");
  if (world.ignore_region && !(world.ignore_region->radius >= 0.0))
    throw Error(ErrorCode::Validation, "ignore_region.radius must be >= 0");
}

Transform3D arm_base_in_world(const RobotModel& robot, const Pose2D& base_pose) {
  return Transform3D::from_pose2d(base_pose) * robot.arm_mount;
}

std::vector<std::pair<int, Sphere>> placed_spheres(const RobotModel& robot, const ArmModel& arm,
                                                   const JointConfig& q,
                                                   const std::optional<AttachedPart>& part) {
  const auto frames = dh_frames(arm, q);
  const Transform3D tcp = frames[6] * arm.tool_offset;
  std::vector<std::pair<int, Sphere>> out;
  for (std::size_t link = 0; link < robot.link_spheres.size(); ++link) {
    const Transform3D& frame = link < 6 ? frames[link + 1] : tcp;
    for (const auto& s : robot.link_spheres[link])
      out.push_back({static_cast<int>(link), Sphere{frame.apply(s.center), s.radius}});
  }
  if (part) out.push_back({kAttachedPartLink, Sphere{(tcp * part->offset).translation, part->radius}});
  return out;
}

struct CollisionChecker::Impl {
  RobotModel robot;
  ArmModel arm;
  std::optional<AttachedPart> part;
  std::vector<Vec3> points;
  std::optional<PointIndex> index;
  /// Occupied cell columns near the arm, arm-base frame.
  std::vector<std::pair<Vec3, Vec3>> boxes;
};

CollisionChecker::CollisionChecker(const CollisionWorld& world, const RobotModel& robot, const ArmModel& arm)
    : impl_(std::make_unique<Impl>()) {
  validate(world);
  impl_->robot = robot;
  if (impl_->robot.link_spheres.empty()) impl_->robot.link_spheres = default_link_spheres(arm);
  impl_->arm = arm;
  impl_->part = world.attached_part;
  for (const auto& e : world.ucloud.entries) {
    if (world.ignore_region && (e.p - world.ignore_region->center).norm() <= world.ignore_region->radius) continue;
    impl_->points.push_back(e.p);
  }
  if (!impl_->points.empty()) impl_->index.emplace(impl_->points);

  const Transform3D base = arm_base_in_world(robot, world.base_pose);
  const Transform3D to_arm = base.inverse();
  const OccupancyGrid& grid = world.grid;
  if (grid.width() > 0 && grid.height() > 0) {
    double max_radius = 0.0;
    for (const auto& link : impl_->robot.link_spheres)
      for (const auto& s : link) max_radius = std::max(max_radius, s.radius);
    if (world.attached_part) max_radius = std::max(max_radius, world.attached_part->radius);
    const double reach = arm.total_reach() + 2.0 * max_radius + kGridClearanceRange + grid.resolution();
    const double h = 0.5 * grid.resolution();
    for (const Cell& c : grid.occupied_cells()) {
      const Vec2 center = grid.cell_center(c);
      if ((center - base.translation.head<2>()).norm() > reach) continue;
      // Cells are axis-aligned in the world; the arm frame is only yawed, so
      // the column stays a box after rotating its corners.
      Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
      for (double dx : {-h, h})
        for (double dy : {-h, h})
          for (double z : {0.0, world.grid_column_height}) {
            const Vec3 p = to_arm.apply(Vec3(center.x() + dx, center.y() + dy, z));
            lo = lo.cwiseMin(p);
            hi = hi.cwiseMax(p);
          }
      impl_->boxes.emplace_back(lo, hi);
    }
  }
}

CollisionChecker::~CollisionChecker() = default;
CollisionChecker::CollisionChecker(CollisionChecker&&) noexcept = default;
CollisionChecker& CollisionChecker::operator=(CollisionChecker&&) noexcept = default;

const RobotModel& CollisionChecker::robot() const { return impl_->robot; }
const ArmModel& CollisionChecker::arm() const { return impl_->arm; }

ConfigCheck CollisionChecker::check(const JointConfig& q) const {
  const Impl& m = *impl_;
  ConfigCheck out;
  if (!m.arm.within_limits(q)) {
    out.collision = true;
    return out;
  }
  const auto spheres = placed_spheres(m.robot, m.arm, q, m.part);
  for (const auto& [link, s] : spheres) {
    double d = std::numeric_limits<double>::infinity();
    if (m.index) {
      const auto nn = m.index->nearest(s.center, 1);
      d = (m.points[nn.front()] - s.center).norm() - s.radius;
    }
    double g = std::numeric_limits<double>::infinity();
    for (const auto& [lo, hi] : m.boxes) g = std::min(g, box_distance(s.center, lo, hi));
    if (std::isfinite(g)) d = std::min(d, std::min(g - s.radius, kGridClearanceRange));
    if (d < out.min_clearance) {
      out.min_clearance = d;
      if (d <= 0.0) out.witness = link;
    }
  }
  if (out.min_clearance <= 0.0) {
    out.collision = true;
    return out;
  }
  // Self-collision between links that do not share a joint.
  for (std::size_t i = 0; i < spheres.size(); ++i) {
    const auto& [li, si] = spheres[i];
    if (li == kAttachedPartLink) continue;
    for (std::size_t j = i + 1; j < spheres.size(); ++j) {
      const auto& [lj, sj] = spheres[j];
      if (lj == kAttachedPartLink || std::abs(li - lj) < 2) continue;
      if ((si.center - sj.center).norm() < si.radius + sj.radius) {
        out.collision = true;
        out.witness = std::min(li, lj);
        return out;
      }
    }
  }
  return out;
}

bool CollisionChecker::sweep_free(const JointConfig& a, const JointConfig& b, double resolution) const {
  const int n = std::max(1, static_cast<int>(std::ceil(max_abs_delta(a, b) / resolution)));
  for (int i = 0; i <= n; ++i) {
    const double s = static_cast<double>(i) / n;
    if (!free(a + s * (b - a))) return false;
  }
  return true;
}

ConfigCheck check_config(const CollisionWorld& world, const RobotModel& robot, const ArmModel& arm,
                         const JointConfig& q) {
  return CollisionChecker(world, robot, arm).check(q);
}

const char* to_string(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::Scan: return "scan";
    case TrajectoryKind::Approach: return "approach";
    case TrajectoryKind::Retract: return "retract";
    case TrajectoryKind::Jog: return "jog";
  }
  return "approach";
}

std::optional<TrajectoryKind> trajectory_kind_from_string(const std::string& s) {
  for (auto k : {TrajectoryKind::Scan, TrajectoryKind::Approach, TrajectoryKind::Retract, TrajectoryKind::Jog})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

ArmTrajectory time_parameterize(const std::vector<JointConfig>& path, TrajectoryKind kind,
                                const std::vector<std::size_t>& captures, double start_time) {
  ArmTrajectory out;
  out.kind = kind;
  if (path.empty()) return out;
  std::vector<std::size_t> dense_index(path.size(), 0);
  out.waypoints.push_back(path.front());
  out.timestamps.push_back(start_time);
  for (std::size_t i = 1; i < path.size(); ++i) {
    const JointConfig& a = out.waypoints.back();
    const JointConfig& b = path[i];
    const double delta = max_abs_delta(a, b);
    if (delta > 0.0) {
      const int n = std::max(1, static_cast<int>(std::ceil(delta / kTrajectoryStep)));
      const JointConfig from = a;
      for (int k = 1; k <= n; ++k) {
        const JointConfig q = k == n ? b : JointConfig(from + (static_cast<double>(k) / n) * (b - from));
        out.timestamps.push_back(out.timestamps.back() + max_abs_delta(out.waypoints.back(), q) / kJointVelocityLimit);
        out.waypoints.push_back(q);
      }
    }
    dense_index[i] = out.waypoints.size() - 1;
  }
  for (std::size_t c : captures) out.captures.push_back(dense_index.at(c));
  return out;
}

std::optional<std::size_t> sweep_violation(const ArmTrajectory& traj, const CollisionChecker& checker,
                                           double resolution) {
  if (traj.waypoints.size() == 1 && !checker.free(traj.waypoints.front())) return 0;
  for (std::size_t i = 0; i + 1 < traj.waypoints.size(); ++i)
    if (!checker.sweep_free(traj.waypoints[i], traj.waypoints[i + 1], resolution)) return i;
  return std::nullopt;
}

json to_json(const ArmTrajectory& traj) {
  json wps = json::array();
  for (const auto& q : traj.waypoints) wps.push_back(json::array({q[0], q[1], q[2], q[3], q[4], q[5]}));
  return {{"kind", to_string(traj.kind)}, {"waypoints", wps}, {"timestamps", traj.timestamps},
          {"captures", traj.captures}};
}

ArmTrajectory arm_trajectory_from_json(const json& j) {
  ArmTrajectory t;
  try {
    const auto kind = trajectory_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) throw Error(ErrorCode::Validation, "kind: unknown trajectory kind");
    t.kind = *kind;
    for (const auto& w : j.at("waypoints")) {
      if (w.size() != 6) throw Error(ErrorCode::Validation, "waypoints: expected 6 joint values");
      JointConfig q;
      for (int i = 0; i < 6; ++i) q[i] = w[i].get<double>();
      t.waypoints.push_back(q);
    }
    t.timestamps = j.at("timestamps").get<std::vector<double>>();
    t.captures = j.at("captures").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("arm trajectory: ") + e.what());
  }
  if (t.timestamps.size() != t.waypoints.size())
    throw Error(ErrorCode::Validation, "timestamps: length differs from waypoints");
  return t;
}

Transform3D tcp_for_camera(const ArmModel& arm, const Transform3D& camera) {
  return camera * arm.camera_offset.inverse() * arm.tool_offset;
}

Transform3D camera_pose(const ArmModel& arm, const JointConfig& q) { return fk_flange(arm, q) * arm.camera_offset; }

namespace {

/// Raw IK samples along a straight tool-pose segment; the first entry is
/// `start`. Returns the error code on failure.
std::variant<std::vector<JointConfig>, ErrorCode> cartesian_samples(const ArmModel& arm, const JointConfig& start,
                                                                     const Transform3D& target) {
  const Transform3D from = fk(arm, start);
  const double dist = (target.translation - from.translation).norm();
  const double rot = rotation_distance(from.rotation, target.rotation);
  constexpr double kRotationStep = 0.05;
  const int n = std::max({1, static_cast<int>(std::ceil(dist / kCartesianStep)),
                          static_cast<int>(std::ceil(rot / kRotationStep))});
  std::vector<JointConfig> out{start};
  for (int k = 1; k <= n; ++k) {
    const Transform3D t = interpolate(from, target, static_cast<double>(k) / n);
    const auto q = solve_ik_near(arm, t, out.back());
    if (!q || !arm.within_limits(*q)) return ErrorCode::BranchJump;
    // A continuous branch moves little per centimeter; a large jump means the
    // solver slid onto another branch.
    if (max_abs_delta(out.back(), *q) > 0.2) return ErrorCode::BranchJump;
    out.push_back(*q);
  }
  return out;
}

}  // namespace

ArmTrajectory plan_cartesian(const CollisionChecker& checker, const JointConfig& start, const Transform3D& target,
                             TrajectoryKind kind) {
  auto samples = cartesian_samples(checker.arm(), start, target);
  if (auto* code = std::get_if<ErrorCode>(&samples)) throw Error(*code, "tool path leaves the IK branch", 0);
  const auto& path = std::get<std::vector<JointConfig>>(samples);
  for (std::size_t i = 0; i + 1 < path.size(); ++i)
    if (!checker.sweep_free(path[i], path[i + 1])) throw Error(ErrorCode::CollisionOnPath, "tool path collides", 0);
  return time_parameterize(path, kind);
}

ArmTrajectory plan_scan_trajectory(const RobotModel& robot, const ArmModel& arm, const ScanProfile& profile,
                                   const JointConfig& current, const CollisionWorld& world,
                                   const ManipOptions& options) {
  if (profile.waypoints.empty()) throw Error(ErrorCode::Validation, "scan profile has no waypoints");
  std::vector<Transform3D> targets;
  for (std::size_t k = 0; k < profile.waypoints.size(); ++k) {
    targets.push_back(tcp_for_camera(arm, profile.waypoints[k]));
    if (ik_all(arm, targets.back()).solutions.empty())
      throw Error(ErrorCode::Unreachable, "scan waypoint " + std::to_string(k) + " is unreachable", k);
  }
  const CollisionChecker checker(world, robot, arm);

  // First waypoint: nearest collision-free IK solution, reached point to point.
  const auto sorted = sort_by_distance(ik_all(arm, targets[0]), current);
  std::optional<JointConfig> first;
  for (const auto& s : sorted.solutions) {
    // Principal values keep the arm on the near side of the elbow fold.
    JointConfig q = s;
    if (max_abs_delta(unwrap_near(arm, s, current), current) < 1e-6) q = current;
    if (checker.free(q)) {
      first = q;
      break;
    }
  }
  if (!first) throw Error(ErrorCode::CollisionOnPath, "every IK solution of scan waypoint 0 collides", 0);
  std::vector<JointConfig> path;
  std::vector<std::size_t> captures;
  if (*first == current) {
    path.push_back(current);
  } else {
    ArmTrajectory lead;
    try {
      lead = plan_point_to_point(checker, current, *first, TrajectoryKind::Scan, options);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NoPath) throw Error(ErrorCode::CollisionOnPath, "no free path to scan start", 0);
      throw;
    }
    path = lead.waypoints;
  }
  captures.push_back(path.size() - 1);

  for (std::size_t k = 1; k < targets.size(); ++k) {
    throw_if_cancelled(options);
    auto samples = cartesian_samples(arm, path.back(), targets[k]);
    if (auto* code = std::get_if<ErrorCode>(&samples))
      throw Error(*code, "scan segment " + std::to_string(k) + " leaves the IK branch", k);
    const auto& seg = std::get<std::vector<JointConfig>>(samples);
    for (std::size_t i = 0; i + 1 < seg.size(); ++i)
      if (!checker.sweep_free(seg[i], seg[i + 1]))
        throw Error(ErrorCode::CollisionOnPath, "scan segment " + std::to_string(k) + " collides", k);
    path.insert(path.end(), seg.begin() + 1, seg.end());
    captures.push_back(path.size() - 1);
  }
  return time_parameterize(path, TrajectoryKind::Scan, captures);
}

namespace {

struct Roadmap {
  std::vector<JointConfig> nodes;
  std::vector<std::vector<std::size_t>> adjacency;
};

void connect(Roadmap& map, int k) {
  const std::size_t n = map.nodes.size();
  map.adjacency.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(n);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.emplace_back((map.nodes[i] - map.nodes[j]).norm(), j);
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(k), d.size());
    std::partial_sort(d.begin(), d.begin() + static_cast<long>(m), d.end());
    for (std::size_t a = 0; a < m; ++a) {
      map.adjacency[i].push_back(d[a].second);
      map.adjacency[d[a].second].push_back(i);
    }
  }
  for (auto& adj : map.adjacency) {
    std::sort(adj.begin(), adj.end());
    adj.erase(std::unique(adj.begin(), adj.end()), adj.end());
  }
}

/// Dijkstra from node 0 to node 1 skipping edges known to collide.
std::optional<std::vector<std::size_t>> shortest(const Roadmap& map,
                                                 const std::set<std::pair<std::size_t, std::size_t>>& blocked) {
  const std::size_t n = map.nodes.size();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> prev(n, n);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> open;
  dist[0] = 0.0;
  open.push({0.0, 0});
  while (!open.empty()) {
    const auto [d, u] = open.top();
    open.pop();
    if (d > dist[u]) continue;
    if (u == 1) break;
    for (std::size_t v : map.adjacency[u]) {
      if (blocked.count({std::min(u, v), std::max(u, v)})) continue;
      const double nd = d + (map.nodes[u] - map.nodes[v]).norm();
      if (nd < dist[v]) {
        dist[v] = nd;
        prev[v] = u;
        open.push({nd, v});
      }
    }
  }
  if (!std::isfinite(dist[1])) return std::nullopt;
  std::vector<std::size_t> path{1};
  while (path.back() != 0) path.push_back(prev[path.back()]);
  std::reverse(path.begin(), path.end());
  return path;
}

std::vector<JointConfig> shortcut(const CollisionChecker& checker, std::vector<JointConfig> path) {
  for (std::size_t i = 0; i + 2 < path.size(); ++i) {
    for (std::size_t j = path.size() - 1; j >= i + 2; --j) {
      if (checker.sweep_free(path[i], path[j])) {
        path.erase(path.begin() + static_cast<long>(i) + 1, path.begin() + static_cast<long>(j));
        break;
      }
    }
  }
  return path;
}

}  // namespace

ArmTrajectory plan_point_to_point(const CollisionChecker& checker, const JointConfig& start,
                                  const JointConfig& goal, TrajectoryKind kind, const ManipOptions& options) {
  if (!checker.free(start)) throw Error(ErrorCode::CollisionOnPath, "start configuration collides", 0);
  if (!checker.free(goal)) throw Error(ErrorCode::CollisionOnPath, "goal configuration collides", 1);
  if (start == goal) return time_parameterize({start}, kind);
  if (checker.sweep_free(start, goal)) return time_parameterize({start, goal}, kind);

  const ArmModel& arm = checker.arm();
  JointConfig lo, hi;
  for (int i = 0; i < 6; ++i) {
    lo[i] = std::max(arm.limits[i].first, std::min(start[i], goal[i]) - kPi);
    hi[i] = std::min(arm.limits[i].second, std::max(start[i], goal[i]) + kPi);
  }
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::array<double, 6> shift{};
  for (double& s : shift) s = unit(rng);
  constexpr std::array<std::uint64_t, 6> kBases{2, 3, 5, 7, 11, 13};

  Roadmap map;
  map.nodes = {start, goal};
  std::set<std::pair<std::size_t, std::size_t>> blocked, verified;
  std::uint64_t next_sample = 1;
  while (static_cast<int>(next_sample) <= options.roadmap_max_samples) {
    throw_if_cancelled(options);
    for (int b = 0; b < options.roadmap_batch; ++b, ++next_sample) {
      JointConfig q;
      for (int i = 0; i < 6; ++i) q[i] = lo[i] + (hi[i] - lo[i]) * std::fmod(halton(next_sample, kBases[i]) + shift[i], 1.0);
      if (checker.free(q)) map.nodes.push_back(q);
    }
    connect(map, options.neighbors);
    // Lazy search: validate only the edges of the current best path.
    while (auto route = shortest(map, blocked)) {
      throw_if_cancelled(options);
      bool valid = true;
      for (std::size_t i = 0; i + 1 < route->size(); ++i) {
        const std::size_t u = (*route)[i], v = (*route)[i + 1];
        const auto key = std::make_pair(std::min(u, v), std::max(u, v));
        if (verified.count(key)) continue;
        if (checker.sweep_free(map.nodes[u], map.nodes[v])) {
          verified.insert(key);
        } else {
          blocked.insert(key);
          valid = false;
          break;
        }
      }
      if (valid) {
        std::vector<JointConfig> path;
        for (std::size_t i : *route) path.push_back(map.nodes[i]);
        return time_parameterize(shortcut(checker, std::move(path)), kind);
      }
    }
  }
  throw Error(ErrorCode::NoPath, "arm roadmap exhausted without a path");
}

ArmTrajectory plan_point_to_point(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                                  const JointConfig& start, const JointConfig& goal, const ManipOptions& options) {
  return plan_point_to_point(CollisionChecker(world, robot, arm), start, goal, TrajectoryKind::Approach, options);
}

GraspProfile GraspProfile::top_down(const std::string& name) {
  GraspProfile g;
  g.name = name;
  g.approach_axis = Vec3(0.0, 0.0, -1.0);
  g.orientation << 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0;
  return g;
}

void validate(const GraspProfile& profile) {
  if (profile.name.empty()) throw Error(ErrorCode::Validation, "name: must not be empty");
  if (!profile.approach_axis.allFinite() || std::abs(profile.approach_axis.norm() - 1.0) > 1e-6)
    throw Error(ErrorCode::Validation, "approach_axis: must be a unit vector");
  Transform3D t;
  t.rotation = profile.orientation;
  if (!t.is_valid(1e-6)) throw Error(ErrorCode::Validation, "orientation: not a rotation matrix");
  if (!std::isfinite(profile.pregrasp_offset) || profile.pregrasp_offset < 0.0)
    throw Error(ErrorCode::Validation, "pregrasp_offset: must be >= 0");
}

json to_json(const GraspProfile& profile) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    rot.push_back(json::array({profile.orientation(r, 0), profile.orientation(r, 1), profile.orientation(r, 2)}));
  return {{"name", profile.name}, {"approach_axis", vec_json(profile.approach_axis)}, {"orientation", rot},
          {"pregrasp_offset", profile.pregrasp_offset}};
}

GraspProfile grasp_profile_from_json(const json& j) {
  GraspProfile g;
  const auto field = [&](const char* name) -> const json& {
    if (!j.is_object() || !j.contains(name)) throw Error(ErrorCode::Parse, std::string(name) + ": missing field");
    return j.at(name);
  };
  try {
    g.name = field("name").get<std::string>();
    const auto& a = field("approach_axis");
    if (!a.is_array() || a.size() != 3) throw Error(ErrorCode::Parse, "approach_axis: expected 3 numbers");
    g.approach_axis = Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
    const auto& r = field("orientation");
    if (!r.is_array() || r.size() != 3) throw Error(ErrorCode::Parse, "orientation: expected 3x3 matrix");
    for (int i = 0; i < 3; ++i) {
      if (!r[i].is_array() || r[i].size() != 3)
        throw Error(ErrorCode::Parse, "orientation[" + std::to_string(i) + "]: expected 3 numbers");
      for (int c = 0; c < 3; ++c) g.orientation(i, c) = r[i][c].get<double>();
    }
    if (j.contains("pregrasp_offset")) g.pregrasp_offset = j.at("pregrasp_offset").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("grasp profile: ") + e.what());
  }
  validate(g);
  return g;
}

Transform3D grasp_tcp_pose(const RobotModel& robot, const Pose2D& base_pose, const Transform3D& part_pose,
                           const GraspProfile& profile, double backoff) {
  Transform3D world;
  world.rotation = profile.orientation;
  world.translation = part_pose.translation - backoff * profile.approach_axis;
  return arm_base_in_world(robot, base_pose).inverse() * world;
}

PregraspResult resolve_pregrasp(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                                const Transform3D& part_pose, const GraspProfile& profile,
                                const JointConfig& current) {
  validate(profile);
  PregraspResult out;
  out.target = grasp_tcp_pose(robot, world.base_pose, part_pose, profile, profile.pregrasp_offset);
  out.solutions = sort_by_distance(ik_all(arm, out.target), current);
  const CollisionChecker checker(world, robot, arm);
  for (const auto& q : out.solutions.solutions) out.collision_free.push_back(checker.free(q));
  return out;
}

const char* to_string(JogRefusal reason) {
  switch (reason) {
    case JogRefusal::None: return "None";
    case JogRefusal::Collision: return "Collision";
    case JogRefusal::Singular: return "Singular";
    case JogRefusal::JointLimit: return "JointLimit";
    case JogRefusal::NoConverge: return "NoConverge";
  }
  return "None";
}

JogResult validate_jog(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                       const JointConfig& current, JogDirection direction, double step) {
  JogResult out;
  out.q = current;
  JointConfig next;
  try {
    next = jog_delta(arm, current, direction, step);
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::Singular: out.reason = JogRefusal::Singular; return out;
      case ErrorCode::JointLimit: out.reason = JogRefusal::JointLimit; return out;
      case ErrorCode::NoConverge: out.reason = JogRefusal::NoConverge; return out;
      default: throw;
    }
  }
  const CollisionChecker checker(world, robot, arm);
  for (int k = 1; k <= kJogSweepSteps; ++k) {
    const double s = static_cast<double>(k) / kJogSweepSteps;
    if (!checker.free(current + s * (next - current))) {
      out.reason = JogRefusal::Collision;
      return out;
    }
  }
  out.ok = true;
  out.q = next;
  return out;
}

ArmTrajectory plan_retract(const RobotModel& robot, const ArmModel& arm, const CollisionWorld& world,
                           const JointConfig& grasp_config, const JointConfig& home, double lift,
                           const ManipOptions& options) {
  if (!world.attached_part) throw Error(ErrorCode::Validation, "retract requires an attached part");
  const CollisionChecker checker(world, robot, arm);
  if (lift > 0.0) {
    // Back out along the tool axis first so the part leaves its support
    // before the roadmap takes over.
    const Transform3D tcp = fk(arm, grasp_config);
    Transform3D up = tcp;
    up.translation -= lift * tcp.rotation.col(2);
    std::optional<ArmTrajectory> out;
    try {
      out = plan_cartesian(checker, grasp_config, up, TrajectoryKind::Retract);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Cancelled) throw;
    }
    if (out) {
      const auto rest = plan_point_to_point(checker, out->waypoints.back(), home, TrajectoryKind::Retract, options);
      std::vector<JointConfig> path = out->waypoints;
      path.insert(path.end(), rest.waypoints.begin() + 1, rest.waypoints.end());
      return time_parameterize(path, TrajectoryKind::Retract);
    }
  }
  return plan_point_to_point(checker, grasp_config, home, TrajectoryKind::Retract, options);
}

GraspOutcome grasp_close(const RobotModel& robot, const ArmModel& arm, const Pose2D& base_pose,
                         const JointConfig& q, const Part& part) {
  const Transform3D tcp = arm_base_in_world(robot, base_pose) * fk(arm, q);
  const Vec3 d = part.pose.translation - tcp.translation;
  const Vec3 axis = tcp.rotation.col(2);
  const double axial = d.dot(axis);
  const double lateral = (d - axial * axis).norm();
  GraspOutcome out;
  // Closed intervals; the slack absorbs rounding of the TCP pose.
  constexpr double kSlack = 1e-12;
  if (std::abs(axial) <= kGraspAxialTolerance + kSlack && lateral <= kGraspLateralTolerance + kSlack) {
    out.grasped = true;
    AttachedPart a;
    a.radius = part.radius * kPartEngulfMargin;
    a.offset = Transform3D::from_translation(tcp.inverse().apply(part.pose.translation));
    out.attached = a;
  }
  return out;
}

JointConfig home_config() {
  JointConfig q;
  q << 0.0, -2.2, 2.3, -1.67, -kPi / 2, 0.0;
  return q;
}

}  // namespace mtend
