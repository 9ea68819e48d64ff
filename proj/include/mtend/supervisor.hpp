#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtend/base_nav.hpp"
#include "mtend/base_planner.hpp"
#include "mtend/error.hpp"
#include "mtend/manip_planner.hpp"
#include "mtend/perception.hpp"
#include "mtend/world.hpp"

namespace mtend {

enum class Mode { Idle, Scanning, Planning, Proposed, Executing, Teleop, Halted, Done };

const char* to_string(Mode mode);
std::optional<Mode> mode_from_string(const std::string& s);

/// Modes in which actuator commands may be emitted.
inline bool motion_allowed(Mode mode) { return mode == Mode::Executing || mode == Mode::Teleop; }

/// The scenario holds a single part under this id.
inline constexpr const char* kScenarioPartId = "part";

struct ScanTask {
  std::string profile;
  /// Region of interest (world frame) checked for uncertainty after fusion.
  Vec3 region_center{Vec3::Zero()};
  double region_radius{0.2};
};

struct FetchTask {
  std::string grasp_profile;
  std::string part_id{kScenarioPartId};
  Pose2D base_goal;
  Pose2D drop_goal;
  /// Scan run at the machine before the approach.
  std::string scan_profile;
};

struct MoveBaseTask {
  Pose2D goal;
};

using TaskGoal = std::variant<ScanTask, FetchTask, MoveBaseTask>;

nlohmann::json to_json(const TaskGoal& goal);
/// `{kind: "scan"|"fetch"|"move_base", ...}`. Throws Validation.
TaskGoal task_goal_from_json(const nlohmann::json& j);

/// Intermediate motion goal supplied by the operator.
using Hint = std::variant<Pose2D, JointConfig>;

nlohmann::json to_json(const Hint& hint);
/// `{pose: {x, y, theta}}` or `{q: [6]}`. Throws Validation.
Hint hint_from_json(const nlohmann::json& j);

enum class SegmentKind { Base, Arm, Gripper };

const char* to_string(SegmentKind kind);

struct PlanSegment {
  /// Role in the task, e.g. "base_to_machine", "scan", "approach".
  std::string label;
  SegmentKind kind{SegmentKind::Base};
  std::optional<TimedElasticBand> band;
  HomotopySignature signature;
  std::optional<ArmTrajectory> arm;
  /// Gripper segments: true closes, false opens.
  bool gripper_close{false};
  /// Base pose during arm and gripper segments.
  Pose2D base_pose;
  /// Grasp contact region (world frame) ignored by arm collision checks.
  std::optional<Sphere> contact_region;
  /// Frame index range [first_frame, last_frame].
  std::size_t first_frame{0};
  std::size_t last_frame{0};
};

/// Simulated robot state at one 50 Hz tick.
struct SimFrame {
  double t{0.0};
  Pose2D base;
  JointConfig q{JointConfig::Zero()};
  bool gripper_closed{false};
  std::optional<AttachedPart> attached;
  std::size_t segment{0};
  /// Base command that produced this frame from the previous one.
  VelocityCommand cmd;
  /// A depth capture is taken at this frame.
  bool capture{false};
};

inline constexpr double kFrameDt = BaseSimulator::kTick;

struct RiskConfig {
  double sigma_weight{0.6};
  double clearance_weight{0.4};
  double sigma_reference{0.01};
  double clearance_reference{0.05};
  /// Fused points within this distance of a robot sphere count as near the path.
  double sigma_radius{0.05};
};

struct RiskReport {
  double score{0.0};
  double max_sigma_near_path{0.0};
  double min_clearance{std::numeric_limits<double>::infinity()};
  std::vector<std::string> alerts;
};

inline constexpr const char* kCollisionAlert = "collision in simulation";

/// clamp(w_s min(sigma/sigma_ref, 1) + w_c max(0, clr_ref / max(clr, 1e-6) - 1), 0, 1).
double risk_score(double max_sigma, double min_clearance, const RiskConfig& config = {});

enum class ProposalStatus { Draft, Approved, Rejected, Executed, Aborted };

const char* to_string(ProposalStatus status);

struct PregraspSummary {
  std::vector<JointConfig> solutions;
  std::vector<bool> collision_free;
  std::size_t chosen{0};
};

struct PlanProposal {
  std::uint64_t id{0};
  TaskGoal goal;
  std::vector<PlanSegment> segments;
  std::vector<SimFrame> frames;
  RiskReport risk;
  ProposalStatus status{ProposalStatus::Draft};
  /// World version the plan was computed against.
  std::uint64_t world_version{0};
  std::optional<PregraspSummary> pregrasp;
  /// Alerts raised while planning, merged into the risk report.
  std::vector<std::string> planner_alerts;
  /// Cloud (world frame) the plan was checked against. Not serialized.
  UncertainPointCloud cloud;
};

nlohmann::json to_json(const PlanProposal& proposal, bool include_frames = true);

/// Sweeps every frame: arm spheres against the cloud and grid columns,
/// self-collision, the base footprint against the grid, and the largest
/// finite fused sigma within `sigma_radius` of any sphere. `cloud` is in the
/// world frame. A colliding frame forces score 1.
RiskReport compute_risk(const PlanProposal& proposal, const UncertainPointCloud& cloud, const OccupancyGrid& grid,
                        const RobotModel& robot, const ArmModel& arm, const RiskConfig& config = {});

/// Plays a band through the base dynamics at 50 Hz with a feedforward +
/// feedback tracking law. The first frame is `start`; the run ends once the
/// band is over and the base has settled at its end pose.
std::vector<SimFrame> simulate_band(const TimedElasticBand& band, const Pose2D& start, const RobotModel& robot,
                                    const SimFrame& prototype);

/// Samples a trajectory at 50 Hz by joint-linear interpolation; waypoints in
/// `traj.captures` mark the first frame at or after their timestamp.
std::vector<SimFrame> sample_trajectory(const ArmTrajectory& traj, const SimFrame& prototype);

/// 1 / (1 + (t_trial - t_expert)); throws NegativeDifference when the trial
/// is faster than the expert or a time is negative.
double ease_of_use(double t_trial_minutes, double t_expert_minutes);

/// Grasp contact region radius = part engulf radius + this margin. Fused
/// points inside it belong to the part and its support and are ignored by
/// arm collision checks; the margin exceeds the risk clearance reference so
/// resting contact does not read as a near miss.
inline constexpr double kContactMargin = 0.06;

/// Contact region around a resting part.
Sphere contact_region(const Part& part);

/// First sweep violation of the proposal's arm trajectories against `cloud`
/// (world frame) and the grid, as "label:segment index"; nullopt when clean.
std::optional<std::string> verify_sweeps(const PlanProposal& proposal, const UncertainPointCloud& cloud,
                                         const OccupancyGrid& grid, const RobotModel& robot, const ArmModel& arm);

/// Rigidly moves every entry (point and normal).
UncertainPointCloud transformed(const UncertainPointCloud& cloud, const Transform3D& t);

struct ProfileSet {
  std::map<std::string, ScanProfile> scan;
  std::map<std::string, GraspProfile> grasp;
};

struct RobotState {
  Pose2D base;
  JointConfig q{JointConfig::Zero()};
  bool gripper_closed{false};
  std::optional<AttachedPart> attached;
};

/// Immutable copy of everything a planner may read.
struct WorldSnapshot {
  Scenario scenario;
  OccupancyGrid grid;
  UncertainPointCloud cloud;
  std::uint64_t version{0};
  RobotState robot;
  ProfileSet profiles;
};

struct PlannerConfig {
  std::uint64_t seed{1};
  /// Sensor noise seed for scans predicted during planning.
  std::uint64_t prediction_seed{7};
  double gripper_duration{0.5};
  double retract_lift{0.10};
  RiskConfig risk;
};

class TaskPlanner {
 public:
  virtual ~TaskPlanner() = default;

  /// Builds a draft proposal (id and status are assigned by the session).
  /// `previous` is the proposal being refined, if any. Throws Error.
  virtual PlanProposal plan(const TaskGoal& goal, const WorldSnapshot& world, const std::vector<Hint>& hints,
                            const PlanProposal* previous, const std::atomic<bool>* cancel) const = 0;

  /// Throws HintInfeasible when the via point is in collision or no segment
  /// of `previous` accepts it.
  virtual void check_hint(const Hint& hint, const WorldSnapshot& world, const PlanProposal& previous) const = 0;
};

/// Planner over the scenario: base routes through plan_route, arm motion
/// through the manipulation planner, scans predicted by simulated captures.
class ScenarioPlanner : public TaskPlanner {
 public:
  explicit ScenarioPlanner(PlannerConfig config = {}) : config_(config) {}

  PlanProposal plan(const TaskGoal& goal, const WorldSnapshot& world, const std::vector<Hint>& hints,
                    const PlanProposal* previous, const std::atomic<bool>* cancel) const override;
  void check_hint(const Hint& hint, const WorldSnapshot& world, const PlanProposal& previous) const override;

  const PlannerConfig& config() const { return config_; }

 private:
  PlannerConfig config_;
};

/// Append-only JSON-lines log of `{t, event, mode_before, mode_after, payload}`.
class EventLog {
 public:
  EventLog() = default;
  /// Also appends every record to `path` (truncated first).
  explicit EventLog(const std::filesystem::path& path);

  void append(double t, const std::string& event, Mode before, Mode after, nlohmann::json payload);
  const std::vector<nlohmann::json>& records() const { return records_; }
  std::vector<nlohmann::json> since(std::size_t index) const;
  std::size_t size() const { return records_.size(); }

 private:
  std::vector<nlohmann::json> records_;
  std::unique_ptr<std::ofstream> sink_;
};

struct BaseTeleop {
  double v{0.0};
  double omega{0.0};
};

struct JogTeleop {
  JogDirection direction{JogDirection::PosZ};
  double step{0.005};
};

struct GripperTeleop {
  bool close{false};
};

using TeleopCommand = std::variant<BaseTeleop, JogTeleop, GripperTeleop>;

nlohmann::json to_json(const TeleopCommand& cmd);
/// `{kind: "base", v, omega}`, `{kind: "jog", direction, step}` or
/// `{kind: "gripper", action: "open"|"close"}`. Throws Validation.
TeleopCommand teleop_command_from_json(const nlohmann::json& j);

struct TeleopResult {
  bool ok{true};
  /// Refusal reason ("Collision", "Singular", ...) when !ok.
  std::string reason;
  /// Base command after clamping.
  VelocityCommand applied;
  bool attached{false};
};

/// Actuator command emitted by the session.
struct MotionOutput {
  double t{0.0};
  Mode mode{Mode::Idle};
  VelocityCommand base;
  JointConfig q{JointConfig::Zero()};
  bool gripper_closed{false};
  /// Index into the approved proposal's frames during execution.
  std::optional<std::size_t> frame;
};

struct SessionConfig {
  std::uint64_t seed{1};
  /// Plan on a worker thread; otherwise submit/refine block until done.
  bool async_planning{false};
  /// Base commands stop when the lidar sees an obstacle within this gap
  /// ahead of the footprint.
  double teleop_guard{0.3};
  /// A teleop base command holds for this long.
  double teleop_hold{0.25};
  double watchdog_tolerance{0.05};
  double max_jog_step{0.02};
  double grid_resolution{0.05};
  double inflation_radius{0.5};
  std::optional<std::filesystem::path> event_log_path;
  std::function<void(const MotionOutput&)> motion_sink;
};

struct SessionSnapshot {
  Mode mode{Mode::Idle};
  std::optional<TaskGoal> active_task;
  std::optional<std::uint64_t> active_proposal;
  double t{0.0};
  double task_start{0.0};
  std::uint64_t world_version{0};
  RobotState robot;
  EkfEstimate estimate;
  VelocityCommand velocity;
  bool planning{false};
  std::optional<nlohmann::json> last_error;
};

nlohmann::json to_json(const SessionSnapshot& snapshot);

/// Supervisory session over one simulated robot. Commands are serialized by
/// a single lock. With async planning the planner runs on a cancellable
/// worker and reports back through the same lock; results of cancelled or
/// superseded jobs are dropped.
class Session {
 public:
  Session(Scenario scenario, ProfileSet profiles, std::shared_ptr<const TaskPlanner> planner,
          SessionConfig config = {});
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  /// Throws WrongMode, UnknownProfile or UnknownId.
  void submit_task(const TaskGoal& goal);
  /// Throws WrongMode, UnknownId or StaleProposal.
  void approve(std::uint64_t proposal_id);
  void reject(std::uint64_t proposal_id);
  /// Throws WrongMode, UnknownId or HintInfeasible.
  void refine_with_hint(std::uint64_t proposal_id, const Hint& hint);
  void enter_teleop();
  void exit_teleop();
  /// Refusals are returned, not thrown; throws WrongMode outside TELEOP and
  /// Validation for out-of-range inputs.
  TeleopResult teleop_cmd(const TeleopCommand& cmd);
  void emergency_stop();
  /// HALTED -> IDLE.
  void enable();
  /// Replaces the fused cloud (world frame) with an externally completed
  /// scan; bumps the world version.
  void ingest_cloud(const UncertainPointCloud& world_cloud);
  void set_profiles(const ProfileSet& profiles);

  /// Advances the simulation by one 50 Hz tick.
  void tick();
  /// Blocks until no planning job is in flight.
  void wait_for_planning();

  SessionSnapshot snapshot() const;
  Mode mode() const;
  std::optional<PlanProposal> proposal(std::uint64_t id) const;
  std::vector<nlohmann::json> events(std::size_t since = 0) const;
  std::size_t event_count() const;
  UncertainPointCloud cloud() const;
  std::uint64_t world_version() const;
  ProfileSet profiles() const;
  /// Frames applied by the current or last execution, in order.
  std::vector<std::size_t> executed_frames() const;
  /// Telemetry frame at the current tick.
  nlohmann::json telemetry();
  const Scenario& scenario() const { return scenario_; }

  /// Test hook: displaces the true base pose without telling the session.
  void perturb_base(const Pose2D& truth);

 private:
  void log(const std::string& event, Mode before, Mode after, nlohmann::json payload = nlohmann::json::object());
  void refuse(const std::string& command, ErrorCode code, const std::string& message);
  WorldSnapshot make_snapshot() const;
  void start_planning(const TaskGoal& goal, const PlanProposal* previous, Mode planning_mode);
  void finish_planning(std::uint64_t job, std::optional<PlanProposal> proposal, std::optional<Error> error);
  void cancel_planning();
  void abort_active_proposal();
  void execute_frame();
  void apply_teleop_tick();
  void emit(const VelocityCommand& base, std::optional<std::size_t> frame);
  CollisionWorld collision_world() const;
  bool path_blocked(double v) const;
  void update_part_pose();
  void release_part();

  mutable std::mutex mutex_;
  SessionConfig config_;
  std::shared_ptr<const TaskPlanner> planner_;
  Scenario scenario_;
  ProfileSet profiles_;
  OccupancyGrid grid_;
  UncertainPointCloud cloud_;
  std::uint64_t world_version_{0};
  BaseSimulator sim_;
  RobotState robot_;
  Mode mode_{Mode::Idle};
  std::optional<TaskGoal> active_task_;
  std::optional<std::uint64_t> active_proposal_;
  double task_start_{0.0};
  std::map<std::uint64_t, PlanProposal> proposals_;
  std::uint64_t next_proposal_id_{1};
  std::vector<Hint> hints_;
  EventLog log_;
  std::optional<nlohmann::json> last_error_;

  std::uint64_t job_{0};
  std::shared_ptr<std::atomic<bool>> cancel_;
  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };
  std::vector<Worker> workers_;
  int jobs_in_flight_{0};
  std::condition_variable planning_done_;

  std::size_t cursor_{0};
  std::vector<std::size_t> executed_;
  std::vector<CameraScan> pending_scans_;
  std::mt19937_64 sensor_rng_;
  std::mt19937_64 telemetry_rng_;

  /// Resting place of the part; its fused points are ignored by arm checks.
  std::optional<Sphere> part_rest_;
  VelocityCommand teleop_velocity_;
  double teleop_until_{0.0};
};

}  // namespace mtend
