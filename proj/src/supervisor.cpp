#include "mtend/supervisor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "mtend/error.hpp"

namespace mtend {

using json = nlohmann::json;

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json q_json(const JointConfig& q) { return json::array({q[0], q[1], q[2], q[3], q[4], q[5]}); }

JointConfig q_from_json(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 6) throw Error(ErrorCode::Validation, field + ": expected 6 joint values");
  JointConfig q;
  for (int i = 0; i < 6; ++i) {
    if (!j[i].is_number()) throw Error(ErrorCode::Validation, field + ": joint values must be numbers");
    q[i] = j[i].get<double>();
  }
  return q;
}

Vec3 vec_from_json(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::Validation, field + ": expected [x, y, z]");
  for (const auto& v : j)
    if (!v.is_number()) throw Error(ErrorCode::Validation, field + ": values must be numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::string string_field(const json& j, const std::string& field) {
  if (!j.contains(field) || !j.at(field).is_string())
    throw Error(ErrorCode::Validation, field + ": expected a string");
  return j.at(field).get<std::string>();
}

double max_abs_delta(const JointConfig& a, const JointConfig& b) { return (b - a).cwiseAbs().maxCoeff(); }

json clearance_json(double c) { return std::isfinite(c) ? json(c) : json(nullptr); }

}  // namespace

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::Idle: return "IDLE";
    case Mode::Scanning: return "SCANNING";
    case Mode::Planning: return "PLANNING";
    case Mode::Proposed: return "PROPOSED";
    case Mode::Executing: return "EXECUTING";
    case Mode::Teleop: return "TELEOP";
    case Mode::Halted: return "HALTED";
    case Mode::Done: return "DONE";
  }
  return "IDLE";
}

std::optional<Mode> mode_from_string(const std::string& s) {
  for (auto m : {Mode::Idle, Mode::Scanning, Mode::Planning, Mode::Proposed, Mode::Executing, Mode::Teleop,
                 Mode::Halted, Mode::Done})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

const char* to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::Base: return "base";
    case SegmentKind::Arm: return "arm";
    case SegmentKind::Gripper: return "gripper";
  }
  return "base";
}

const char* to_string(ProposalStatus status) {
  switch (status) {
    case ProposalStatus::Draft: return "draft";
    case ProposalStatus::Approved: return "approved";
    case ProposalStatus::Rejected: return "rejected";
    case ProposalStatus::Executed: return "executed";
    case ProposalStatus::Aborted: return "aborted";
  }
  return "draft";
}

json to_json(const TaskGoal& goal) {
  return std::visit(
      [](const auto& g) -> json {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, ScanTask>) {
          return {{"kind", "scan"},
                  {"profile", g.profile},
                  {"region", {{"center", vec_json(g.region_center)}, {"radius", g.region_radius}}}};
        } else if constexpr (std::is_same_v<T, FetchTask>) {
          return {{"kind", "fetch"},           {"grasp_profile", g.grasp_profile}, {"part_id", g.part_id},
                  {"base_goal", to_json(g.base_goal)}, {"drop_goal", to_json(g.drop_goal)},
                  {"scan_profile", g.scan_profile}};
        } else {
          return {{"kind", "move_base"}, {"goal", to_json(g.goal)}};
        }
      },
      goal);
}

TaskGoal task_goal_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::Validation, "task: expected an object");
  const std::string kind = string_field(j, "kind");
  try {
    if (kind == "scan") {
      ScanTask t;
      t.profile = string_field(j, "profile");
      if (j.contains("region")) {
        const json& r = j.at("region");
        t.region_center = vec_from_json(r.at("center"), "region.center");
        t.region_radius = r.at("radius").get<double>();
        if (!(t.region_radius > 0.0)) throw Error(ErrorCode::Validation, "region.radius: must be > 0");
      }
      return t;
    }
    if (kind == "fetch") {
      FetchTask t;
      t.grasp_profile = string_field(j, "grasp_profile");
      if (j.contains("part_id")) t.part_id = string_field(j, "part_id");
      t.base_goal = pose_from_json(j.at("base_goal"), "base_goal");
      t.drop_goal = pose_from_json(j.at("drop_goal"), "drop_goal");
      t.scan_profile = string_field(j, "scan_profile");
      return t;
    }
    if (kind == "move_base") return MoveBaseTask{pose_from_json(j.at("goal"), "goal")};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Validation, std::string("task: ") + e.what());
  }
  throw Error(ErrorCode::Validation, "kind: unknown task kind '" + kind + "'");
}

json to_json(const Hint& hint) {
  if (const auto* p = std::get_if<Pose2D>(&hint)) return {{"pose", to_json(*p)}};
  return {{"q", q_json(std::get<JointConfig>(hint))}};
}

Hint hint_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::Validation, "hint: expected an object");
  if (j.contains("pose")) return pose_from_json(j.at("pose"), "pose");
  if (j.contains("q")) return q_from_json(j.at("q"), "q");
  throw Error(ErrorCode::Validation, "hint: expected 'pose' or 'q'");
}

json to_json(const TeleopCommand& cmd) {
  return std::visit(
      [](const auto& c) -> json {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, BaseTeleop>) {
          return {{"kind", "base"}, {"v", c.v}, {"omega", c.omega}};
        } else if constexpr (std::is_same_v<T, JogTeleop>) {
          return {{"kind", "jog"}, {"direction", to_string(c.direction)}, {"step", c.step}};
        } else {
          return {{"kind", "gripper"}, {"action", c.close ? "close" : "open"}};
        }
      },
      cmd);
}

TeleopCommand teleop_command_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::Validation, "teleop: expected an object");
  const std::string kind = string_field(j, "kind");
  auto number = [&](const char* field, double fallback) {
    if (!j.contains(field)) return fallback;
    if (!j.at(field).is_number()) throw Error(ErrorCode::Validation, std::string(field) + ": expected a number");
    return j.at(field).get<double>();
  };
  if (kind == "base") return BaseTeleop{number("v", 0.0), number("omega", 0.0)};
  if (kind == "jog") {
    const auto dir = jog_direction_from_string(string_field(j, "direction"));
    if (!dir) throw Error(ErrorCode::Validation, "direction: unknown jog direction");
    return JogTeleop{*dir, number("step", 0.005)};
  }
  if (kind == "gripper") {
    const std::string action = string_field(j, "action");
    if (action != "open" && action != "close") throw Error(ErrorCode::Validation, "action: expected open or close");
    return GripperTeleop{action == "close"};
  }
  throw Error(ErrorCode::Validation, "kind: unknown teleop command '" + kind + "'");
}

double risk_score(double max_sigma, double min_clearance, const RiskConfig& config) {
  const double sigma_term = std::min(max_sigma / config.sigma_reference, 1.0);
  const double clearance_term = std::max(0.0, config.clearance_reference / std::max(min_clearance, 1e-6) - 1.0);
  return std::clamp(config.sigma_weight * sigma_term + config.clearance_weight * clearance_term, 0.0, 1.0);
}

UncertainPointCloud transformed(const UncertainPointCloud& cloud, const Transform3D& t) {
  UncertainPointCloud out = cloud;
  for (auto& e : out.entries) {
    e.p = t.apply(e.p);
    e.n = t.rotation * e.n;
  }
  return out;
}

Sphere contact_region(const Part& part) {
  return Sphere{part.pose.translation, part.radius * kPartEngulfMargin + kContactMargin};
}

namespace {

/// Arm collision world for a base pose; `cloud` and `region` are world frame.
CollisionWorld arm_world(const RobotModel& robot, const UncertainPointCloud& cloud, const OccupancyGrid& grid,
                         const Pose2D& base, const std::optional<AttachedPart>& attached,
                         const std::optional<Sphere>& region, std::optional<double> crop = std::nullopt) {
  CollisionWorld w;
  const Transform3D to_arm = arm_base_in_world(robot, base).inverse();
  if (crop) {
    for (const auto& e : cloud.entries) {
      const Vec3 p = to_arm.apply(e.p);
      if (p.norm() <= *crop) w.ucloud.entries.push_back({p, to_arm.rotation * e.n, e.sigma, e.support});
    }
  } else {
    w.ucloud = transformed(cloud, to_arm);
  }
  w.grid = grid;
  w.base_pose = base;
  w.attached_part = attached;
  if (region) w.ignore_region = Sphere{to_arm.apply(region->center), region->radius};
  return w;
}

}  // namespace

RiskReport compute_risk(const PlanProposal& proposal, const UncertainPointCloud& cloud, const OccupancyGrid& grid,
                        const RobotModel& robot_in, const ArmModel& arm, const RiskConfig& config) {
  RobotModel robot = robot_in;
  if (robot.link_spheres.empty()) robot.link_spheres = default_link_spheres(arm);
  RiskReport out;
  bool collision = false;

  std::vector<Vec3> points;
  std::vector<double> sigmas;
  for (const auto& e : cloud.entries) {
    if (!std::isfinite(e.sigma)) continue;
    points.push_back(e.p);
    sigmas.push_back(e.sigma);
  }
  std::optional<PointIndex> index;
  if (!points.empty()) index.emplace(points);

  double max_radius = 0.0;
  for (const auto& link : robot.link_spheres)
    for (const auto& s : link) max_radius = std::max(max_radius, s.radius);
  // Farther points cannot touch the arm nor fall within the grid saturation.
  const double crop = arm.total_reach() + 2.0 * max_radius + kGridClearanceRange + config.sigma_radius;

  std::map<std::tuple<std::size_t, bool>, CollisionChecker> fixed;
  for (const auto& f : proposal.frames) {
    const PlanSegment& seg = proposal.segments.at(f.segment);
    ConfigCheck check;
    if (seg.kind == SegmentKind::Base) {
      const double bc = base_clearance(grid, {}, f.base.position(), robot.base_radius);
      out.min_clearance = std::min(out.min_clearance, bc);
      if (bc <= 0.0) collision = true;
      const CollisionChecker checker(arm_world(robot, cloud, grid, f.base, f.attached, seg.contact_region, crop),
                                     robot, arm);
      check = checker.check(f.q);
    } else {
      const auto key = std::make_tuple(f.segment, f.attached.has_value());
      auto it = fixed.find(key);
      if (it == fixed.end())
        it = fixed
                 .emplace(key, CollisionChecker(arm_world(robot, cloud, grid, f.base, f.attached, seg.contact_region),
                                                robot, arm))
                 .first;
      check = it->second.check(f.q);
    }
    if (check.collision) collision = true;
    out.min_clearance = std::min(out.min_clearance, check.min_clearance);

    if (index) {
      const Transform3D to_world = arm_base_in_world(robot, f.base);
      for (const auto& [link, s] : placed_spheres(robot, arm, f.q, f.attached)) {
        for (std::size_t i : index->within(to_world.apply(s.center), s.radius + config.sigma_radius))
          out.max_sigma_near_path = std::max(out.max_sigma_near_path, sigmas[i]);
      }
    }
  }

  if (collision) {
    out.score = 1.0;
    out.alerts.push_back(kCollisionAlert);
  } else {
    out.score = risk_score(out.max_sigma_near_path, out.min_clearance, config);
  }
  if (out.max_sigma_near_path > config.sigma_reference) out.alerts.push_back("high uncertainty near path");
  if (!collision && out.min_clearance < config.clearance_reference) out.alerts.push_back("low clearance");
  for (const auto& a : proposal.planner_alerts) out.alerts.push_back(a);
  return out;
}

std::vector<SimFrame> simulate_band(const TimedElasticBand& band, const Pose2D& start, const RobotModel& robot,
                                    const SimFrame& prototype) {
  // Feedforward from the band plus a unicycle tracking law.
  constexpr double kx = 1.5, ky = 8.0, ktheta = 2.0;
  constexpr double kSettle = 3.0;
  std::vector<SimFrame> frames;
  SimFrame f = prototype;
  f.base = start;
  f.cmd = {};
  f.capture = false;
  frames.push_back(f);
  BaseState state{start, 0.0, 0.0};
  const double duration = band.duration();
  const Pose2D end = band.nodes.empty() ? start : band.nodes.back().pose;
  for (int k = 0;; ++k) {
    const double t = k * kFrameDt;
    const bool over = t >= duration;
    const Pose2D ref = band.nodes.empty() ? start : band.pose_at(t);
    const VelocityCommand ff = over ? VelocityCommand{} : band.velocity_at(t);
    const double c = std::cos(state.truth.theta), s = std::sin(state.truth.theta);
    const double dx = ref.x - state.truth.x, dy = ref.y - state.truth.y;
    const double ex = c * dx + s * dy, ey = -s * dx + c * dy;
    const double eth = normalize_angle(ref.theta - state.truth.theta);
    if (over) {
      const double pos_err = std::hypot(end.x - state.truth.x, end.y - state.truth.y);
      const bool settled = pos_err < 0.005 && std::abs(eth) < 0.01;
      if ((settled || t >= duration + kSettle) && state.v == 0.0 && state.omega == 0.0) break;
    }
    VelocityCommand cmd{ff.v * std::cos(eth) + kx * ex, ff.omega + ff.v * ky * ey + ktheta * std::sin(eth)};
    if (over) {
      const double pos_err = std::hypot(end.x - state.truth.x, end.y - state.truth.y);
      if ((pos_err < 0.005 && std::abs(eth) < 0.01) || t >= duration + kSettle) cmd = {};
    }
    state = step_base(state, cmd, kFrameDt, robot);
    f.t = prototype.t + (k + 1) * kFrameDt;
    f.base = state.truth;
    f.cmd = cmd;
    frames.push_back(f);
  }
  return frames;
}

std::vector<SimFrame> sample_trajectory(const ArmTrajectory& traj, const SimFrame& prototype) {
  std::vector<SimFrame> frames;
  SimFrame f = prototype;
  f.cmd = {};
  f.capture = false;
  if (traj.waypoints.empty()) return {f};
  const double t0 = traj.timestamps.front();
  const double duration = traj.timestamps.back() - t0;
  const int n = static_cast<int>(std::ceil(duration / kFrameDt - 1e-9));
  std::size_t seg = 0;
  for (int k = 0; k <= n; ++k) {
    const double t = std::min(t0 + k * kFrameDt, traj.timestamps.back());
    while (seg + 2 < traj.timestamps.size() && traj.timestamps[seg + 1] < t) ++seg;
    JointConfig q = traj.waypoints[seg];
    if (seg + 1 < traj.waypoints.size()) {
      const double span = traj.timestamps[seg + 1] - traj.timestamps[seg];
      const double s = span > 0.0 ? std::clamp((t - traj.timestamps[seg]) / span, 0.0, 1.0) : 1.0;
      q = traj.waypoints[seg] + s * (traj.waypoints[seg + 1] - traj.waypoints[seg]);
    }
    if (k == n) q = traj.waypoints.back();
    f.t = prototype.t + k * kFrameDt;
    f.q = q;
    frames.push_back(f);
  }
  for (std::size_t c : traj.captures) {
    const double tc = traj.timestamps.at(c) - t0;
    const auto k = static_cast<std::size_t>(std::ceil(tc / kFrameDt - 1e-9));
    frames.at(std::min(k, frames.size() - 1)).capture = true;
  }
  return frames;
}

double ease_of_use(double t_trial_minutes, double t_expert_minutes) {
  if (!(t_expert_minutes >= 0.0) || !(t_trial_minutes >= t_expert_minutes))
    throw Error(ErrorCode::NegativeDifference, "trial time must be >= expert time >= 0");
  return 1.0 / (1.0 + (t_trial_minutes - t_expert_minutes));
}

std::optional<std::string> verify_sweeps(const PlanProposal& proposal, const UncertainPointCloud& cloud,
                                         const OccupancyGrid& grid, const RobotModel& robot, const ArmModel& arm) {
  for (const auto& seg : proposal.segments) {
    if (seg.kind != SegmentKind::Arm || !seg.arm) continue;
    const auto& attached = proposal.frames.at(seg.first_frame).attached;
    const CollisionChecker checker(arm_world(robot, cloud, grid, seg.base_pose, attached, seg.contact_region), robot,
                                   arm);
    if (const auto bad = sweep_violation(*seg.arm, checker)) return seg.label + ":" + std::to_string(*bad);
  }
  return std::nullopt;
}

json to_json(const PlanProposal& p, bool include_frames) {
  json segments = json::array();
  for (const auto& s : p.segments) {
    json js = {{"label", s.label},
               {"kind", to_string(s.kind)},
               {"base_pose", to_json(s.base_pose)},
               {"first_frame", s.first_frame},
               {"last_frame", s.last_frame}};
    if (s.band) {
      CostReport report;
      report.feasible = true;
      js["band"] = to_json(*s.band, report, s.signature);
    }
    if (s.arm) js["trajectory"] = to_json(*s.arm);
    if (s.kind == SegmentKind::Gripper) js["gripper"] = s.gripper_close ? "close" : "open";
    if (s.contact_region)
      js["contact_region"] = {{"center", vec_json(s.contact_region->center)}, {"radius", s.contact_region->radius}};
    segments.push_back(js);
  }
  json risk = {{"score", p.risk.score},
               {"max_sigma_near_path", p.risk.max_sigma_near_path},
               {"min_clearance", clearance_json(p.risk.min_clearance)},
               {"alerts", p.risk.alerts}};
  json out = {{"id", p.id},
              {"status", to_string(p.status)},
              {"world_version", p.world_version},
              {"goal", to_json(p.goal)},
              {"segments", segments},
              {"risk", risk},
              {"frame_count", p.frames.size()},
              {"duration", p.frames.empty() ? 0.0 : p.frames.back().t - p.frames.front().t}};
  if (p.pregrasp) {
    json sols = json::array();
    for (const auto& q : p.pregrasp->solutions) sols.push_back(q_json(q));
    out["pregrasp"] = {{"solutions", sols},
                       {"collision_free", p.pregrasp->collision_free},
                       {"chosen", p.pregrasp->chosen}};
  }
  if (include_frames) {
    json frames = json::array();
    for (const auto& f : p.frames)
      frames.push_back({{"t", f.t},
                        {"base", to_json(f.base)},
                        {"q", q_json(f.q)},
                        {"gripper", f.gripper_closed ? "closed" : "open"},
                        {"segment", f.segment}});
    out["frames"] = frames;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenario planner

namespace {

class ProposalBuilder {
 public:
  ProposalBuilder(const WorldSnapshot& world, const PlannerConfig& config, const std::atomic<bool>* cancel)
      : world_(world), config_(config), cancel_(cancel), robot_(world.scenario.robot), cloud_(world.cloud) {
    if (robot_.link_spheres.empty()) robot_.link_spheres = default_link_spheres(world.scenario.arm);
    SimFrame f;
    f.base = world.robot.base;
    f.q = world.robot.q;
    f.gripper_closed = world.robot.gripper_closed;
    f.attached = world.robot.attached;
    out_.frames.push_back(f);
    out_.world_version = world.version;
    out_.cloud = world.cloud;
  }

  const SimFrame& current() const { return out_.frames.back(); }
  const RobotModel& robot() const { return robot_; }
  const ArmModel& arm() const { return world_.scenario.arm; }
  const UncertainPointCloud& cloud() const { return cloud_; }
  PlanProposal& proposal() { return out_; }

  void check_cancel() const {
    if (cancel_ && cancel_->load()) throw Error(ErrorCode::Cancelled, "planning cancelled");
  }

  ManipOptions manip_options() const {
    ManipOptions o;
    o.cancel = cancel_;
    o.seed = config_.seed;
    return o;
  }

  CollisionWorld arm_world_here(const std::optional<Sphere>& region) const {
    return arm_world(robot_, cloud_, world_.grid, current().base, current().attached, region);
  }

  void append(PlanSegment seg, std::vector<SimFrame> frames) {
    check_cancel();
    const std::size_t index = out_.segments.size();
    seg.first_frame = out_.frames.size();
    for (std::size_t i = 1; i < frames.size(); ++i) {
      frames[i].segment = index;
      out_.frames.push_back(frames[i]);
    }
    if (frames.size() <= 1) {
      // Zero-length segment: keep one frame so it stays visible.
      SimFrame f = current();
      f.t += kFrameDt;
      f.cmd = {};
      f.capture = false;
      f.segment = index;
      out_.frames.push_back(f);
    }
    seg.last_frame = out_.frames.size() - 1;
    out_.segments.push_back(std::move(seg));
  }

  void add_base(const std::string& label, const Pose2D& goal, std::optional<Vec2> via) {
    BandObjectives objectives = BandObjectives::for_robot(robot_);
    objectives.cancel = cancel_;
    const RoutePlan route = plan_route(world_.grid, current().base, goal, objectives, {}, config_.seed, via);
    PlanSegment seg;
    seg.label = label;
    seg.kind = SegmentKind::Base;
    seg.band = route.chosen().band;
    seg.signature = route.signatures.at(route.best);
    append(std::move(seg), simulate_band(route.chosen().band, current().base, robot_, current()));
    out_.segments.back().base_pose = current().base;
  }

  void add_arm(const std::string& label, const ArmTrajectory& traj, const std::optional<Sphere>& region) {
    PlanSegment seg;
    seg.label = label;
    seg.kind = SegmentKind::Arm;
    seg.arm = traj;
    seg.base_pose = current().base;
    seg.contact_region = region;
    append(std::move(seg), sample_trajectory(traj, current()));
  }

  void add_gripper(const std::string& label, bool close, const std::optional<AttachedPart>& attached) {
    PlanSegment seg;
    seg.label = label;
    seg.kind = SegmentKind::Gripper;
    seg.gripper_close = close;
    seg.base_pose = current().base;
    const int n = std::max(1, static_cast<int>(std::lround(config_.gripper_duration / kFrameDt)));
    std::vector<SimFrame> frames{current()};
    for (int k = 1; k <= n; ++k) {
      SimFrame f = current();
      f.t += k * kFrameDt;
      f.cmd = {};
      f.capture = false;
      f.gripper_closed = close;
      f.attached = attached;
      frames.push_back(f);
    }
    append(std::move(seg), std::move(frames));
  }

  /// Arm back to the folded pose when it is elsewhere.
  void stow_if_needed() {
    if (max_abs_delta(current().q, home_config()) <= 1e-9) return;
    const CollisionChecker checker(arm_world_here(std::nullopt), robot_, arm());
    add_arm("stow", plan_point_to_point(checker, current().q, home_config(), TrajectoryKind::Approach,
                                        manip_options()),
            std::nullopt);
  }

  /// Scan segment, then fuses the captures predicted at its frames.
  void add_scan(const ScanProfile& profile, const std::optional<JointConfig>& via) {
    const CollisionWorld w = arm_world_here(std::nullopt);
    JointConfig from = current().q;
    std::vector<JointConfig> lead;
    if (via) {
      const CollisionChecker checker(w, robot_, arm());
      lead = plan_point_to_point(checker, from, *via, TrajectoryKind::Scan, manip_options()).waypoints;
      from = *via;
    }
    ArmTrajectory scan = plan_scan_trajectory(robot_, arm(), profile, from, w, manip_options());
    if (!lead.empty()) {
      std::vector<JointConfig> path = lead;
      path.insert(path.end(), scan.waypoints.begin() + 1, scan.waypoints.end());
      std::vector<std::size_t> captures;
      for (std::size_t c : scan.captures) captures.push_back(c + lead.size() - 1);
      scan = time_parameterize(path, TrajectoryKind::Scan, captures);
    }
    add_arm("scan", scan, std::nullopt);

    std::mt19937_64 rng(config_.prediction_seed);
    std::vector<CameraScan> scans;
    const PlanSegment& seg = out_.segments.back();
    for (std::size_t i = seg.first_frame; i <= seg.last_frame; ++i) {
      const SimFrame& f = out_.frames[i];
      if (!f.capture) continue;
      const Transform3D cam = arm_base_in_world(robot_, f.base) * camera_pose(arm(), f.q);
      scans.push_back({capture_depth(world_.scenario.scene, cam, world_.scenario.noise.depth_std, &rng), cam});
    }
    if (scans.size() >= 2) {
      cloud_ = fuse(scans);
      out_.cloud = cloud_;
    } else {
      out_.planner_alerts.push_back("scan too short to fuse");
    }
  }

  /// Pre-grasp, approach and descent onto the part.
  void add_approach(const Part& part, const GraspProfile& profile, const std::optional<JointConfig>& via) {
    const Sphere region = contact_region(part);
    const CollisionWorld w = arm_world_here(region);
    const PregraspResult pre = resolve_pregrasp(robot_, arm(), w, part.pose, profile, current().q);
    PregraspSummary summary;
    summary.solutions = pre.solutions.solutions;
    summary.collision_free = pre.collision_free;
    const auto green = std::find(pre.collision_free.begin(), pre.collision_free.end(), true);
    if (green == pre.collision_free.end()) {
      out_.pregrasp = summary;
      throw Error(ErrorCode::Unreachable, pre.solutions.solutions.empty() ? "pre-grasp pose is unreachable"
                                                                          : "every pre-grasp solution collides");
    }
    summary.chosen = static_cast<std::size_t>(green - pre.collision_free.begin());
    out_.pregrasp = summary;
    const JointConfig qp = summary.solutions[summary.chosen];

    const CollisionChecker checker(w, robot_, arm());
    std::vector<JointConfig> path;
    JointConfig from = current().q;
    if (via) {
      path = plan_point_to_point(checker, from, *via, TrajectoryKind::Approach, manip_options()).waypoints;
      from = *via;
    }
    const auto reach = plan_point_to_point(checker, from, qp, TrajectoryKind::Approach, manip_options());
    path.insert(path.end(), reach.waypoints.begin() + (path.empty() ? 0 : 1), reach.waypoints.end());
    const Transform3D grasp = grasp_tcp_pose(robot_, current().base, part.pose, profile, 0.0);
    const auto descent = plan_cartesian(checker, qp, grasp, TrajectoryKind::Approach);
    path.insert(path.end(), descent.waypoints.begin() + 1, descent.waypoints.end());
    add_arm("approach", time_parameterize(path, TrajectoryKind::Approach), region);
  }

  void add_grasp(const Part& part) {
    const GraspOutcome g = grasp_close(robot_, arm(), current().base, current().q, part);
    if (!g.grasped) throw Error(ErrorCode::Unreachable, "part outside the finger span at the grasp pose");
    add_gripper("grasp", true, g.attached);
    out_.segments.back().contact_region = contact_region(part);
  }

  void add_retract(const Part& part) {
    const Sphere region = contact_region(part);
    add_arm("retract",
            plan_retract(robot_, arm(), arm_world_here(region), current().q, home_config(), config_.retract_lift,
                         manip_options()),
            region);
  }

  PlanProposal finish(const TaskGoal& goal) {
    out_.goal = goal;
    out_.risk = compute_risk(out_, cloud_, world_.grid, robot_, arm(), config_.risk);
    return std::move(out_);
  }

 private:
  const WorldSnapshot& world_;
  const PlannerConfig& config_;
  const std::atomic<bool>* cancel_;
  RobotModel robot_;
  UncertainPointCloud cloud_;
  PlanProposal out_;
};

template <typename T>
std::optional<T> last_hint(const std::vector<Hint>& hints) {
  for (auto it = hints.rbegin(); it != hints.rend(); ++it)
    if (const auto* h = std::get_if<T>(&*it)) return *h;
  return std::nullopt;
}

/// Base segment of `previous` passing closest to the hint.
std::string base_label_for(const Vec2& p, const PlanProposal* previous, const std::string& fallback) {
  if (!previous) return fallback;
  std::string best = fallback;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& s : previous->segments) {
    if (s.kind != SegmentKind::Base || !s.band) continue;
    for (const auto& n : s.band->nodes) {
      const double d = (n.pose.position() - p).norm();
      if (d < best_d) {
        best_d = d;
        best = s.label;
      }
    }
  }
  return best;
}

/// Arm segment accepting a joint-space via point for a task kind.
const char* joint_hint_label(const TaskGoal& goal) {
  if (std::holds_alternative<FetchTask>(goal)) return "approach";
  if (std::holds_alternative<ScanTask>(goal)) return "scan";
  return "stow";
}

const ScanProfile& scan_profile(const WorldSnapshot& world, const std::string& name) {
  const auto it = world.profiles.scan.find(name);
  if (it == world.profiles.scan.end()) throw Error(ErrorCode::UnknownProfile, "unknown scan profile '" + name + "'");
  return it->second;
}

const GraspProfile& grasp_profile(const WorldSnapshot& world, const std::string& name) {
  const auto it = world.profiles.grasp.find(name);
  if (it == world.profiles.grasp.end())
    throw Error(ErrorCode::UnknownProfile, "unknown grasp profile '" + name + "'");
  return it->second;
}

}  // namespace

PlanProposal ScenarioPlanner::plan(const TaskGoal& goal, const WorldSnapshot& world, const std::vector<Hint>& hints,
                                   const PlanProposal* previous, const std::atomic<bool>* cancel) const {
  ProposalBuilder b(world, config_, cancel);
  const auto pose_hint = last_hint<Pose2D>(hints);
  const auto joint_hint = last_hint<JointConfig>(hints);
  auto via_for = [&](const std::string& label, const std::string& fallback) -> std::optional<Vec2> {
    if (!pose_hint) return std::nullopt;
    if (base_label_for(pose_hint->position(), previous, fallback) != label) return std::nullopt;
    return pose_hint->position();
  };
  const std::string hint_label = joint_hint_label(goal);
  auto joint_via = [&](const std::string& label) { return label == hint_label ? joint_hint : std::nullopt; };

  if (const auto* t = std::get_if<MoveBaseTask>(&goal)) {
    if (joint_hint) {
      const CollisionChecker checker(b.arm_world_here(std::nullopt), b.robot(), b.arm());
      auto first = plan_point_to_point(checker, b.current().q, *joint_hint, TrajectoryKind::Approach,
                                       b.manip_options());
      auto rest = plan_point_to_point(checker, *joint_hint, home_config(), TrajectoryKind::Approach,
                                      b.manip_options());
      std::vector<JointConfig> path = first.waypoints;
      path.insert(path.end(), rest.waypoints.begin() + 1, rest.waypoints.end());
      b.add_arm("stow", time_parameterize(path, TrajectoryKind::Approach), std::nullopt);
    } else {
      b.stow_if_needed();
    }
    b.add_base("move_base", t->goal, via_for("move_base", "move_base"));
  } else if (const auto* t = std::get_if<ScanTask>(&goal)) {
    b.add_scan(scan_profile(world, t->profile), joint_via("scan"));
    try {
      const auto alert = uncertainty_alert(b.cloud(), t->region_center, t->region_radius);
      if (alert.alert) b.proposal().planner_alerts.push_back("high uncertainty in target region");
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyRegion) throw;
      b.proposal().planner_alerts.push_back("no fused points in target region");
    }
  } else {
    const auto& fetch = std::get<FetchTask>(goal);
    const ScanProfile& scan = scan_profile(world, fetch.scan_profile);
    const GraspProfile& grasp = grasp_profile(world, fetch.grasp_profile);
    if (fetch.part_id != kScenarioPartId || !world.scenario.scene.part)
      throw Error(ErrorCode::UnknownId, "unknown part '" + fetch.part_id + "'");
    if (world.robot.attached) throw Error(ErrorCode::Validation, "gripper already holds a part");
    const Part& part = *world.scenario.scene.part;
    b.stow_if_needed();
    b.add_base("base_to_machine", fetch.base_goal, via_for("base_to_machine", "base_to_machine"));
    b.add_scan(scan, std::nullopt);
    b.add_approach(part, grasp, joint_via("approach"));
    b.add_grasp(part);
    b.add_retract(part);
    b.add_base("base_to_drop", fetch.drop_goal, via_for("base_to_drop", "base_to_machine"));
    b.add_gripper("release", false, std::nullopt);
  }
  return b.finish(goal);
}

void ScenarioPlanner::check_hint(const Hint& hint, const WorldSnapshot& world, const PlanProposal& previous) const {
  if (const auto* p = std::get_if<Pose2D>(&hint)) {
    const bool has_base = std::any_of(previous.segments.begin(), previous.segments.end(),
                                      [](const PlanSegment& s) { return s.kind == SegmentKind::Base; });
    if (!has_base) throw Error(ErrorCode::HintInfeasible, "proposal has no base motion to refine");
    if (world.grid.lethal_at(p->position()))
      throw Error(ErrorCode::HintInfeasible, "via pose lies inside an inflated obstacle");
    return;
  }
  const JointConfig& q = std::get<JointConfig>(hint);
  const std::string label = joint_hint_label(previous.goal);
  Pose2D base = world.robot.base;
  std::optional<AttachedPart> attached = world.robot.attached;
  bool found = std::holds_alternative<MoveBaseTask>(previous.goal);
  for (const auto& s : previous.segments) {
    if (s.label != label) continue;
    base = s.base_pose;
    attached = previous.frames.at(s.first_frame).attached;
    found = true;
    break;
  }
  if (!found) throw Error(ErrorCode::HintInfeasible, "proposal has no arm motion accepting a joint via point");
  RobotModel robot = world.scenario.robot;
  if (robot.link_spheres.empty()) robot.link_spheres = default_link_spheres(world.scenario.arm);
  const CollisionChecker checker(arm_world(robot, previous.cloud, world.grid, base, attached, std::nullopt), robot,
                                 world.scenario.arm);
  if (!checker.free(q)) throw Error(ErrorCode::HintInfeasible, "via configuration is in collision");
}

// ---------------------------------------------------------------------------
// Event log

EventLog::EventLog(const std::filesystem::path& path)
    : sink_(std::make_unique<std::ofstream>(path, std::ios::trunc)) {
  if (!*sink_) throw Error(ErrorCode::Io, "cannot open event log " + path.string());
}

void EventLog::append(double t, const std::string& event, Mode before, Mode after, json payload) {
  json record = {{"t", t},
                 {"event", event},
                 {"mode_before", to_string(before)},
                 {"mode_after", to_string(after)},
                 {"payload", std::move(payload)}};
  if (sink_) {
    *sink_ << record.dump() << '\n';
    sink_->flush();
  }
  records_.push_back(std::move(record));
}

std::vector<json> EventLog::since(std::size_t index) const {
  if (index >= records_.size()) return {};
  return {records_.begin() + static_cast<std::ptrdiff_t>(index), records_.end()};
}

}  // namespace mtend

// ---------------------------------------------------------------------------
// Session

namespace mtend {

namespace {

json robot_json(const RobotState& r) {
  return {{"base", to_json(r.base)},
          {"q", q_json(r.q)},
          {"gripper", r.gripper_closed ? "closed" : "open"},
          {"attached", r.attached.has_value()}};
}

json error_json(ErrorCode code, const std::string& message) {
  return {{"code", to_string(code)}, {"message", message}};
}

bool is_zero(const VelocityCommand& c) { return c.v == 0.0 && c.omega == 0.0; }

}  // namespace

json to_json(const SessionSnapshot& s) {
  json out = {{"mode", to_string(s.mode)},
              {"t", s.t},
              {"timers", {{"task_start", s.task_start}}},
              {"world_version", s.world_version},
              {"robot", robot_json(s.robot)},
              {"est_pose", to_json(s.estimate.mean)},
              {"velocity", {{"v", s.velocity.v}, {"omega", s.velocity.omega}}},
              {"planning", s.planning},
              {"sensors", {{"lidar", "nominal"}, {"depth", "nominal"}, {"odometry", "nominal"}, {"imu", "nominal"}}}};
  out["active_task"] = s.active_task ? to_json(*s.active_task) : json(nullptr);
  out["active_proposal"] = s.active_proposal ? json(*s.active_proposal) : json(nullptr);
  out["last_error"] = s.last_error ? *s.last_error : json(nullptr);
  return out;
}

Session::Session(Scenario scenario, ProfileSet profiles, std::shared_ptr<const TaskPlanner> planner,
                 SessionConfig config)
    : config_(std::move(config)),
      planner_(std::move(planner)),
      scenario_(std::move(scenario)),
      profiles_(std::move(profiles)),
      sim_(scenario_, config_.seed),
      log_(config_.event_log_path ? EventLog(*config_.event_log_path) : EventLog()),
      sensor_rng_(config_.seed * 0x9E3779B97F4A7C15ULL + 1),
      telemetry_rng_(config_.seed * 0x9E3779B97F4A7C15ULL + 2) {
  if (scenario_.robot.link_spheres.empty()) scenario_.robot.link_spheres = default_link_spheres(scenario_.arm);
  grid_ = rasterize_scene(scenario_.scene, config_.grid_resolution, config_.inflation_radius);
  robot_.base = scenario_.start;
  robot_.q = home_config();
  if (scenario_.scene.part) part_rest_ = contact_region(*scenario_.scene.part);
}

Session::~Session() {
  {
    std::lock_guard lock(mutex_);
    cancel_planning();
  }
  for (auto& w : workers_)
    if (w.thread.joinable()) w.thread.join();
}

void Session::log(const std::string& event, Mode before, Mode after, json payload) {
  log_.append(sim_.time(), event, before, after, std::move(payload));
}

void Session::refuse(const std::string& command, ErrorCode code, const std::string& message) {
  log("command_refused", mode_, mode_, {{"command", command}, {"code", to_string(code)}, {"message", message}});
  throw Error(code, message);
}

WorldSnapshot Session::make_snapshot() const {
  WorldSnapshot w;
  w.scenario = scenario_;
  w.grid = grid_;
  w.cloud = cloud_;
  w.version = world_version_;
  w.robot = robot_;
  w.profiles = profiles_;
  return w;
}

void Session::cancel_planning() {
  if (cancel_) cancel_->store(true);
  cancel_.reset();
  ++job_;
}

void Session::abort_active_proposal() {
  if (!active_proposal_) return;
  auto& p = proposals_.at(*active_proposal_);
  if (p.status == ProposalStatus::Draft || p.status == ProposalStatus::Approved) p.status = ProposalStatus::Aborted;
}

void Session::start_planning(const TaskGoal& goal, const PlanProposal* previous, Mode planning_mode) {
  const Mode before = mode_;
  mode_ = planning_mode;
  cancel_planning();
  cancel_ = std::make_shared<std::atomic<bool>>(false);
  const std::uint64_t job = job_;
  log(previous ? "replanning" : "task_submitted", before, mode_,
      {{"task", to_json(goal)}, {"hints", [&] {
          json h = json::array();
          for (const auto& x : hints_) h.push_back(to_json(x));
          return h;
        }()}});

  auto run = [planner = planner_, goal, snapshot = make_snapshot(), hints = hints_,
              prev = previous ? std::optional<PlanProposal>(*previous) : std::nullopt,
              cancel = cancel_]() -> std::pair<std::optional<PlanProposal>, std::optional<Error>> {
    try {
      return {planner->plan(goal, snapshot, hints, prev ? &*prev : nullptr, cancel.get()), std::nullopt};
    } catch (const Error& e) {
      return {std::nullopt, e};
    } catch (const std::exception& e) {
      return {std::nullopt, Error(ErrorCode::NoPath, e.what())};
    }
  };

  if (!config_.async_planning) {
    auto [proposal, error] = run();
    finish_planning(job, std::move(proposal), std::move(error));
    return;
  }
  // Reap finished workers before adding one.
  for (auto it = workers_.begin(); it != workers_.end();) {
    if (it->done->load()) {
      it->thread.join();
      it = workers_.erase(it);
    } else {
      ++it;
    }
  }
  auto done = std::make_shared<std::atomic<bool>>(false);
  ++jobs_in_flight_;
  workers_.push_back({std::thread([this, run, job, done] {
                        auto [proposal, error] = run();
                        {
                          std::lock_guard lock(mutex_);
                          finish_planning(job, std::move(proposal), std::move(error));
                          --jobs_in_flight_;
                        }
                        planning_done_.notify_all();
                        done->store(true);
                      }),
                      done});
}

void Session::finish_planning(std::uint64_t job, std::optional<PlanProposal> proposal, std::optional<Error> error) {
  // Results of cancelled or superseded jobs are dropped.
  if (job != job_ || (mode_ != Mode::Planning && mode_ != Mode::Scanning)) return;
  cancel_.reset();
  const Mode before = mode_;
  if (error || !proposal) {
    const ErrorCode code = error ? error->code() : ErrorCode::NoPath;
    const std::string message = error ? error->what() : "planner returned nothing";
    mode_ = Mode::Idle;
    last_error_ = error_json(code, message);
    active_task_.reset();
    active_proposal_.reset();
    log("planning_failed", before, mode_, *last_error_);
    return;
  }
  PlanProposal p = std::move(*proposal);
  p.id = next_proposal_id_++;
  p.status = ProposalStatus::Draft;
  const std::uint64_t id = p.id;
  json summary = {{"proposal", id},
                  {"risk", to_json(p, false).at("risk")},
                  {"segments", json::array()},
                  {"frames", p.frames.size()}};
  for (const auto& s : p.segments) summary["segments"].push_back(s.label);
  if (p.pregrasp) {
    summary["pregrasp_solutions"] = p.pregrasp->solutions.size();
    summary["pregrasp_collision_free"] =
        std::count(p.pregrasp->collision_free.begin(), p.pregrasp->collision_free.end(), true);
  }
  proposals_[id] = std::move(p);
  active_proposal_ = id;
  last_error_.reset();
  mode_ = Mode::Proposed;
  log("proposal_ready", before, mode_, summary);
}

void Session::submit_task(const TaskGoal& goal) {
  std::lock_guard lock(mutex_);
  if (mode_ != Mode::Idle && mode_ != Mode::Done)
    refuse("submit_task", ErrorCode::WrongMode, std::string("cannot submit a task in ") + to_string(mode_));
  auto need_scan = [&](const std::string& name) {
    if (!profiles_.scan.count(name))
      refuse("submit_task", ErrorCode::UnknownProfile, "unknown scan profile '" + name + "'");
  };
  if (const auto* t = std::get_if<ScanTask>(&goal)) need_scan(t->profile);
  if (const auto* t = std::get_if<FetchTask>(&goal)) {
    need_scan(t->scan_profile);
    if (!profiles_.grasp.count(t->grasp_profile))
      refuse("submit_task", ErrorCode::UnknownProfile, "unknown grasp profile '" + t->grasp_profile + "'");
    if (t->part_id != kScenarioPartId || !scenario_.scene.part)
      refuse("submit_task", ErrorCode::UnknownId, "unknown part '" + t->part_id + "'");
  }
  active_task_ = goal;
  active_proposal_.reset();
  task_start_ = sim_.time();
  hints_.clear();
  start_planning(goal, nullptr, std::holds_alternative<ScanTask>(goal) ? Mode::Scanning : Mode::Planning);
}

void Session::approve(std::uint64_t id) {
  std::lock_guard lock(mutex_);
  if (mode_ != Mode::Proposed)
    refuse("approve", ErrorCode::WrongMode, std::string("cannot approve in ") + to_string(mode_));
  const auto it = proposals_.find(id);
  if (it == proposals_.end()) refuse("approve", ErrorCode::UnknownId, "unknown proposal " + std::to_string(id));
  PlanProposal& p = it->second;
  if (active_proposal_ != id || p.status != ProposalStatus::Draft)
    refuse("approve", ErrorCode::WrongMode, "proposal " + std::to_string(id) + " is not the pending draft");
  if (p.world_version != world_version_)
    refuse("approve", ErrorCode::StaleProposal,
           "world changed since planning (version " + std::to_string(p.world_version) + " -> " +
               std::to_string(world_version_) + "); re-plan required");
  p.status = ProposalStatus::Approved;
  cursor_ = 1;
  executed_ = {0};
  pending_scans_.clear();
  const Mode before = mode_;
  mode_ = Mode::Executing;
  log("approved", before, mode_, {{"proposal", id}});
}

void Session::reject(std::uint64_t id) {
  std::lock_guard lock(mutex_);
  if (mode_ != Mode::Proposed)
    refuse("reject", ErrorCode::WrongMode, std::string("cannot reject in ") + to_string(mode_));
  const auto it = proposals_.find(id);
  if (it == proposals_.end()) refuse("reject", ErrorCode::UnknownId, "unknown proposal " + std::to_string(id));
  if (active_proposal_ != id || it->second.status != ProposalStatus::Draft)
    refuse("reject", ErrorCode::WrongMode, "proposal " + std::to_string(id) + " is not the pending draft");
  it->second.status = ProposalStatus::Rejected;
  active_proposal_.reset();
  active_task_.reset();
  const Mode before = mode_;
  mode_ = Mode::Idle;
  log("rejected", before, mode_, {{"proposal", id}});
}

void Session::refine_with_hint(std::uint64_t id, const Hint& hint) {
  std::lock_guard lock(mutex_);
  if (mode_ != Mode::Proposed)
    refuse("refine_with_hint", ErrorCode::WrongMode, std::string("cannot refine in ") + to_string(mode_));
  const auto it = proposals_.find(id);
  if (it == proposals_.end())
    refuse("refine_with_hint", ErrorCode::UnknownId, "unknown proposal " + std::to_string(id));
  PlanProposal& old = it->second;
  if (active_proposal_ != id || old.status != ProposalStatus::Draft)
    refuse("refine_with_hint", ErrorCode::WrongMode, "proposal " + std::to_string(id) + " is not the pending draft");
  try {
    planner_->check_hint(hint, make_snapshot(), old);
  } catch (const Error& e) {
    refuse("refine_with_hint", e.code(), e.what());
  }
  // One via point per kind; a new hint replaces the previous one.
  hints_.erase(std::remove_if(hints_.begin(), hints_.end(),
                              [&](const Hint& h) { return h.index() == hint.index(); }),
               hints_.end());
  hints_.push_back(hint);
  old.status = ProposalStatus::Rejected;
  log("hint", mode_, mode_, {{"proposal", id}, {"hint", to_json(hint)}});
  active_proposal_.reset();
  start_planning(old.goal, &old, Mode::Planning);
}

void Session::enter_teleop() {
  std::lock_guard lock(mutex_);
  if (mode_ == Mode::Halted || mode_ == Mode::Teleop)
    refuse("enter_teleop", ErrorCode::WrongMode, std::string("cannot enter teleop from ") + to_string(mode_));
  const Mode before = mode_;
  cancel_planning();
  abort_active_proposal();
  active_proposal_.reset();
  active_task_.reset();
  sim_.stop();
  teleop_velocity_ = {};
  mode_ = Mode::Teleop;
  log("teleop_entered", before, mode_);
}

void Session::exit_teleop() {
  std::lock_guard lock(mutex_);
  if (mode_ != Mode::Teleop)
    refuse("exit_teleop", ErrorCode::WrongMode, std::string("not in teleop (") + to_string(mode_) + ")");
  teleop_velocity_ = {};
  sim_.stop();
  mode_ = Mode::Idle;
  log("teleop_exited", Mode::Teleop, mode_);
}

CollisionWorld Session::collision_world() const {
  return arm_world(scenario_.robot, cloud_, grid_, robot_.base, robot_.attached, part_rest_);
}

bool Session::path_blocked(double v) const {
  if (v == 0.0) return false;
  const LidarScan scan =
      simulate_lidar(scenario_.scene, sim_.state().truth, sim_.time(), scenario_.robot, scenario_.noise, nullptr);
  const double r = scenario_.robot.base_radius;
  for (std::size_t i = 0; i < scan.ranges.size(); ++i) {
    if (!std::isfinite(scan.ranges[i])) continue;
    const double b = scan.bearing(i);
    const double ahead = scan.ranges[i] * std::cos(b) * (v > 0.0 ? 1.0 : -1.0);
    const double side = scan.ranges[i] * std::sin(b);
    if (ahead > 0.0 && std::abs(side) <= r && ahead - r <= config_.teleop_guard) return true;
  }
  return false;
}

void Session::update_part_pose() {
  if (!robot_.attached || !scenario_.scene.part) return;
  const Transform3D tcp = arm_base_in_world(scenario_.robot, robot_.base) * fk(scenario_.arm, robot_.q);
  scenario_.scene.part->pose = tcp * robot_.attached->offset;
}

void Session::release_part() {
  if (!robot_.attached || !scenario_.scene.part) {
    robot_.attached.reset();
    return;
  }
  update_part_pose();
  Part& part = *scenario_.scene.part;
  robot_.attached.reset();
  // No physics: the part drops straight down onto the first surface.
  Scene below = scenario_.scene;
  below.part.reset();
  const Vec3 c = part.pose.translation;
  const auto hit = raycast(below, c, -Vec3::UnitZ(), c.z() + 1.0);
  const double z = hit ? hit->point.z() : 0.0;
  part.pose = Transform3D::from_translation({c.x(), c.y(), std::max(z, 0.0) + part.radius});
  part_rest_ = contact_region(part);
}

void Session::emit(const VelocityCommand& base, std::optional<std::size_t> frame) {
  if (!motion_allowed(mode_)) return;
  if (!config_.motion_sink) return;
  MotionOutput m;
  m.t = sim_.time();
  m.mode = mode_;
  m.base = base;
  m.q = robot_.q;
  m.gripper_closed = robot_.gripper_closed;
  m.frame = frame;
  config_.motion_sink(m);
}

TeleopResult Session::teleop_cmd(const TeleopCommand& cmd) {
  std::lock_guard lock(mutex_);
  if (mode_ != Mode::Teleop)
    refuse("teleop_cmd", ErrorCode::WrongMode, std::string("teleop commands need TELEOP, not ") + to_string(mode_));
  TeleopResult out;
  const RobotModel& robot = scenario_.robot;
  if (const auto* b = std::get_if<BaseTeleop>(&cmd)) {
    if (!std::isfinite(b->v) || !std::isfinite(b->omega))
      refuse("teleop_cmd", ErrorCode::Validation, "base command must be finite");
    out.applied = {std::clamp(b->v, -robot.max_v, robot.max_v),
                   std::clamp(b->omega, -robot.max_omega, robot.max_omega)};
    if (path_blocked(out.applied.v)) {
      out.applied.v = 0.0;
      out.reason = "obstacle ahead";
    }
    teleop_velocity_ = out.applied;
    teleop_until_ = sim_.time() + config_.teleop_hold;
  } else if (const auto* j = std::get_if<JogTeleop>(&cmd)) {
    if (!(j->step > 0.0) || j->step > config_.max_jog_step)
      refuse("teleop_cmd", ErrorCode::Validation, "jog step must lie in (0, 0.02] m");
    const JogResult r = validate_jog(scenario_.robot, scenario_.arm, collision_world(), robot_.q, j->direction, j->step);
    if (!r.ok) {
      out.ok = false;
      out.reason = to_string(r.reason);
    } else {
      robot_.q = r.q;
      update_part_pose();
      emit({}, std::nullopt);
    }
  } else {
    const bool close = std::get<GripperTeleop>(cmd).close;
    if (close && !robot_.gripper_closed && scenario_.scene.part && !robot_.attached) {
      const GraspOutcome g = grasp_close(scenario_.robot, scenario_.arm, robot_.base, robot_.q, *scenario_.scene.part);
      if (g.grasped) robot_.attached = g.attached;
    }
    if (!close) release_part();
    robot_.gripper_closed = close;
    emit({}, std::nullopt);
  }
  out.attached = robot_.attached.has_value();
  log("teleop_cmd", mode_, mode_,
      {{"command", to_json(cmd)},
       {"ok", out.ok},
       {"reason", out.reason},
       {"applied", {{"v", out.applied.v}, {"omega", out.applied.omega}}},
       {"attached", out.attached}});
  return out;
}

void Session::emergency_stop() {
  std::lock_guard lock(mutex_);
  const Mode before = mode_;
  cancel_planning();
  abort_active_proposal();
  teleop_velocity_ = {};
  sim_.stop();
  mode_ = Mode::Halted;
  log("emergency_stop", before, mode_, {{"proposal", active_proposal_ ? json(*active_proposal_) : json(nullptr)}});
}

void Session::enable() {
  std::lock_guard lock(mutex_);
  if (mode_ != Mode::Halted) refuse("enable", ErrorCode::WrongMode, std::string("not halted (") + to_string(mode_) + ")");
  active_task_.reset();
  active_proposal_.reset();
  mode_ = Mode::Idle;
  log("enabled", Mode::Halted, mode_);
}

void Session::ingest_cloud(const UncertainPointCloud& world_cloud) {
  std::lock_guard lock(mutex_);
  cloud_ = world_cloud;
  ++world_version_;
  log("world_updated", mode_, mode_, {{"world_version", world_version_}, {"entries", cloud_.entries.size()}});
}

void Session::set_profiles(const ProfileSet& profiles) {
  std::lock_guard lock(mutex_);
  profiles_ = profiles;
}

void Session::tick() {
  std::lock_guard lock(mutex_);
  if (mode_ == Mode::Executing) {
    execute_frame();
  } else if (mode_ == Mode::Teleop) {
    apply_teleop_tick();
  } else {
    sim_.tick({});
    robot_.base = sim_.state().truth;
  }
}

void Session::apply_teleop_tick() {
  VelocityCommand cmd;
  if (sim_.time() < teleop_until_ - 1e-12) {
    cmd = teleop_velocity_;
    if (path_blocked(cmd.v)) cmd.v = 0.0;
  }
  sim_.tick(cmd);
  robot_.base = sim_.state().truth;
  update_part_pose();
  if (!is_zero(cmd)) emit(cmd, std::nullopt);
}

void Session::execute_frame() {
  PlanProposal& p = proposals_.at(*active_proposal_);
  const Mode before = mode_;
  if (cursor_ >= p.frames.size()) {
    p.status = ProposalStatus::Executed;
    mode_ = Mode::Done;
    log("execution_completed", before, mode_, {{"proposal", p.id}, {"task_duration", sim_.time() - task_start_}});
    return;
  }
  const SimFrame& f = p.frames[cursor_];
  const PlanSegment& seg = p.segments.at(f.segment);
  sim_.tick(seg.kind == SegmentKind::Base ? f.cmd : VelocityCommand{});
  robot_.base = sim_.state().truth;
  const double divergence = (robot_.base.position() - f.base.position()).norm();
  if (divergence > config_.watchdog_tolerance) {
    p.status = ProposalStatus::Aborted;
    sim_.stop();
    mode_ = Mode::Halted;
    log("watchdog", before, mode_, {{"proposal", p.id}, {"frame", cursor_}, {"divergence", divergence}});
    return;
  }
  robot_.q = f.q;
  if (f.gripper_closed != robot_.gripper_closed) {
    robot_.gripper_closed = f.gripper_closed;
    if (f.gripper_closed) {
      const GraspOutcome g = scenario_.scene.part ? grasp_close(scenario_.robot, scenario_.arm, robot_.base, robot_.q,
                                                                *scenario_.scene.part)
                                                  : GraspOutcome{};
      if (!g.grasped) {
        p.status = ProposalStatus::Aborted;
        sim_.stop();
        mode_ = Mode::Halted;
        log("grasp_failed", before, mode_, {{"proposal", p.id}, {"frame", cursor_}});
        return;
      }
      robot_.attached = g.attached;
      log("grasped", mode_, mode_, {{"proposal", p.id}, {"frame", cursor_}});
    } else {
      const bool had = robot_.attached.has_value();
      release_part();
      if (had) log("released", mode_, mode_, {{"proposal", p.id}, {"frame", cursor_}});
    }
  }
  update_part_pose();
  emit(f.cmd, cursor_);
  executed_.push_back(cursor_);

  if (f.capture) {
    const Transform3D cam = arm_base_in_world(scenario_.robot, robot_.base) * camera_pose(scenario_.arm, robot_.q);
    pending_scans_.push_back(
        {capture_depth(scenario_.scene, cam, scenario_.noise.depth_std, &sensor_rng_, Transform3D::identity(),
                       sim_.time()),
         cam});
  }
  if (seg.label == "scan" && cursor_ == seg.last_frame && !pending_scans_.empty()) {
    json payload = {{"proposal", p.id}, {"captures", pending_scans_.size()}};
    if (pending_scans_.size() >= 2) {
      cloud_ = fuse(pending_scans_);
      ++world_version_;
      payload["world_version"] = world_version_;
      payload["entries"] = cloud_.entries.size();
      if (const auto* t = std::get_if<ScanTask>(&p.goal)) {
        try {
          const auto a = uncertainty_alert(cloud_, t->region_center, t->region_radius);
          payload["max_sigma_in_region"] = a.max_sigma;
          payload["alert"] = a.alert;
        } catch (const Error& e) {
          if (e.code() != ErrorCode::EmptyRegion) throw;
          payload["alert"] = "no fused points in target region";
        }
      }
    }
    pending_scans_.clear();
    log("scan_completed", mode_, mode_, payload);
  }
  ++cursor_;
  if (cursor_ == p.frames.size()) {
    p.status = ProposalStatus::Executed;
    mode_ = Mode::Done;
    log("execution_completed", before, mode_, {{"proposal", p.id}, {"task_duration", sim_.time() - task_start_}});
  }
}

void Session::wait_for_planning() {
  std::unique_lock lock(mutex_);
  planning_done_.wait(lock, [&] { return jobs_in_flight_ == 0; });
}

SessionSnapshot Session::snapshot() const {
  std::lock_guard lock(mutex_);
  SessionSnapshot s;
  s.mode = mode_;
  s.active_task = active_task_;
  s.active_proposal = active_proposal_;
  s.t = sim_.time();
  s.task_start = task_start_;
  s.world_version = world_version_;
  s.robot = robot_;
  s.estimate = sim_.estimate();
  s.velocity = {sim_.state().v, sim_.state().omega};
  s.planning = mode_ == Mode::Planning || mode_ == Mode::Scanning;
  s.last_error = last_error_;
  return s;
}

Mode Session::mode() const {
  std::lock_guard lock(mutex_);
  return mode_;
}

std::optional<PlanProposal> Session::proposal(std::uint64_t id) const {
  std::lock_guard lock(mutex_);
  const auto it = proposals_.find(id);
  if (it == proposals_.end()) return std::nullopt;
  return it->second;
}

std::vector<json> Session::events(std::size_t since) const {
  std::lock_guard lock(mutex_);
  return log_.since(since);
}

std::size_t Session::event_count() const {
  std::lock_guard lock(mutex_);
  return log_.size();
}

UncertainPointCloud Session::cloud() const {
  std::lock_guard lock(mutex_);
  return cloud_;
}

std::uint64_t Session::world_version() const {
  std::lock_guard lock(mutex_);
  return world_version_;
}

ProfileSet Session::profiles() const {
  std::lock_guard lock(mutex_);
  return profiles_;
}

std::vector<std::size_t> Session::executed_frames() const {
  std::lock_guard lock(mutex_);
  return executed_;
}

json Session::telemetry() {
  std::lock_guard lock(mutex_);
  const LidarScan scan = simulate_lidar(scenario_.scene, sim_.state().truth, sim_.time(), scenario_.robot,
                                        scenario_.noise, &telemetry_rng_);
  return telemetry_frame(sim_.time(), sim_.state().truth, sim_.estimate(), sim_.state().v, sim_.state().omega, scan);
}

void Session::perturb_base(const Pose2D& truth) {
  std::lock_guard lock(mutex_);
  sim_.reset(truth);
  robot_.base = truth;
}

}  // namespace mtend
