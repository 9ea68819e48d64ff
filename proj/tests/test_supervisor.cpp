#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "mtend/error.hpp"
#include "mtend/supervisor.hpp"
#include "oracles.hpp"
#include "supervisor_support.hpp"

using namespace mtend;
using namespace support;
using json = nlohmann::json;

namespace {

Scenario fixture(const std::string& name) {
  Scenario s = load_scenario(std::filesystem::path(MTEND_DATA_DIR) / "scenarios" / (name + ".json"));
  if (s.robot.link_spheres.empty()) s.robot.link_spheres = default_link_spheres(s.arm);
  return s;
}

const Pose2D kMachineStop{2.25, 0.0, 0.0};
const Pose2D kDrop{1.0, -1.5, 0.0};

ProfileSet printer_profiles(const Scenario& s) {
  const Vec3 target = arm_base_in_world(s.robot, kMachineStop).inverse().apply(s.scene.part->pose.translation);
  ProfileSet p;
  p.scan["machine_arc"] = generate_scan_profile(ScanShape::Arc, 0.3, target, 5, "machine_arc");
  p.grasp["top_down"] = GraspProfile::top_down();
  return p;
}

FetchTask fetch_task() { return {"top_down", kScenarioPartId, kMachineStop, kDrop, "machine_arc"}; }

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::Validation;
}

std::size_t run_until_not_executing(Session& s, std::size_t max_ticks = 200000) {
  std::size_t n = 0;
  while (s.mode() == Mode::Executing && n < max_ticks) {
    s.tick();
    ++n;
  }
  return n;
}

std::vector<std::string> labels(const PlanProposal& p) {
  std::vector<std::string> out;
  for (const auto& seg : p.segments) out.push_back(seg.label);
  return out;
}

/// Distance from a point to the closest frame base position.
double closest_frame(const PlanProposal& p, const Vec2& point) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& f : p.frames) best = std::min(best, (f.base.position() - point).norm());
  return best;
}

/// Side of a disc the frame path passes: +1 above (crosses x = cx at y > cy),
/// -1 below, 0 when the path never crosses x = cx.
int passing_side(const PlanProposal& p, const Vec2& center) {
  for (std::size_t i = 1; i < p.frames.size(); ++i) {
    const Vec2 a = p.frames[i - 1].base.position(), b = p.frames[i].base.position();
    if ((a.x() - center.x()) * (b.x() - center.x()) > 0.0 || a.x() == b.x()) continue;
    const double y = a.y() + (b.y() - a.y()) * (center.x() - a.x()) / (b.x() - a.x());
    return y > center.y() ? 1 : -1;
  }
  return 0;
}

PlanProposal active(const Session& s) {
  const auto snap = s.snapshot();
  EXPECT_TRUE(snap.active_proposal.has_value());
  return *s.proposal(*snap.active_proposal);
}

}  // namespace

TEST(Supervisor, MoveBaseInFreeSpaceGivesOneBaseSegment) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  const Pose2D goal{4.0, -1.0, 0.0};
  s.submit_task(MoveBaseTask{goal});
  ASSERT_EQ(s.mode(), Mode::Proposed);
  const PlanProposal p = active(s);
  ASSERT_EQ(p.segments.size(), 1u);
  EXPECT_EQ(p.segments[0].kind, SegmentKind::Base);
  EXPECT_EQ(p.status, ProposalStatus::Draft);
  // Frames follow the 50 Hz clock and end at the goal.
  for (std::size_t i = 1; i < p.frames.size(); ++i) EXPECT_NEAR(p.frames[i].t - p.frames[i - 1].t, kFrameDt, 1e-9);
  EXPECT_LT((p.frames.back().base.position() - goal.position()).norm(), 0.05);
  // Oracle: every frame footprint stays outside every obstacle polygon.
  for (const auto& f : p.frames)
    for (const auto& poly : sc.scene.static_obstacles) {
      double d = std::numeric_limits<double>::infinity();
      const auto& v = poly;
      for (std::size_t k = 0; k < v.size(); ++k) {
        const Vec2 a = v[k], b = v[(k + 1) % v.size()];
        const double u = std::clamp((f.base.position() - a).dot(b - a) / (b - a).squaredNorm(), 0.0, 1.0);
        d = std::min(d, (a + u * (b - a) - f.base.position()).norm());
      }
      EXPECT_FALSE(point_in_polygon(poly, f.base.position()));
      EXPECT_GT(d, sc.robot.base_radius);
    }
  EXPECT_GE(p.risk.score, 0.0);
  EXPECT_LE(p.risk.score, 1.0);
}

TEST(Supervisor, SubmitWhileExecutingIsRefusedAndStateUnchanged) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{2.0, 0.5, 0.0}});
  const auto id = *s.snapshot().active_proposal;
  s.approve(id);
  s.tick();
  const auto before = s.snapshot();
  EXPECT_EQ(code_of([&] { s.submit_task(MoveBaseTask{{1.5, 0.0, 0.0}}); }), ErrorCode::WrongMode);
  const auto after = s.snapshot();
  EXPECT_EQ(after.mode, Mode::Executing);
  EXPECT_EQ(after.active_proposal, before.active_proposal);
  EXPECT_EQ(after.t, before.t);
  EXPECT_EQ(s.events().back()["event"], "command_refused");
}

TEST(Supervisor, UnknownProfilesAreRefused) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  FetchTask t = fetch_task();
  t.grasp_profile = "missing";
  EXPECT_EQ(code_of([&] { s.submit_task(t); }), ErrorCode::UnknownProfile);
  EXPECT_EQ(code_of([&] { s.submit_task(ScanTask{"missing"}); }), ErrorCode::UnknownProfile);
  t = fetch_task();
  t.part_id = "other";
  EXPECT_EQ(code_of([&] { s.submit_task(t); }), ErrorCode::UnknownId);
  EXPECT_EQ(s.mode(), Mode::Idle);
}

TEST(Supervisor, FetchRunsToDoneInSegmentOrder) {
  const Scenario sc = fixture("printer_cell");
  std::vector<MotionOutput> outputs;
  SessionConfig cfg;
  cfg.motion_sink = [&](const MotionOutput& m) { outputs.push_back(m); };
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>(), cfg);
  s.submit_task(fetch_task());
  ASSERT_EQ(s.mode(), Mode::Proposed) << s.snapshot().last_error->dump();
  const PlanProposal p = active(s);
  EXPECT_EQ(labels(p), (std::vector<std::string>{"base_to_machine", "scan", "approach", "grasp", "retract",
                                                  "base_to_drop", "release"}));
  ASSERT_TRUE(p.pregrasp.has_value());
  EXPECT_TRUE(p.pregrasp->collision_free.at(p.pregrasp->chosen));
  // Frames are contiguous and segments tile them in order.
  for (std::size_t i = 1; i < p.frames.size(); ++i) {
    EXPECT_GT(p.frames[i].t, p.frames[i - 1].t);
    EXPECT_GE(p.frames[i].segment, p.frames[i - 1].segment);
  }
  for (std::size_t k = 0; k < p.segments.size(); ++k) {
    EXPECT_EQ(p.frames[p.segments[k].last_frame].segment, k);
    if (k > 0) EXPECT_EQ(p.segments[k].first_frame, p.segments[k - 1].last_frame + 1);
  }
  EXPECT_FALSE(verify_sweeps(p, p.cloud, rasterize_scene(sc.scene, 0.05, 0.5), s.scenario().robot, sc.arm));

  s.approve(p.id);
  run_until_not_executing(s);
  EXPECT_EQ(s.mode(), Mode::Done);
  EXPECT_EQ(s.proposal(p.id)->status, ProposalStatus::Executed);
  EXPECT_EQ(s.events().back()["event"], "execution_completed");
  EXPECT_EQ(s.events().back()["mode_after"], "DONE");

  // Execution fidelity: every emitted frame is a frame of the proposal, in order.
  const auto executed = s.executed_frames();
  ASSERT_EQ(executed.size(), p.frames.size());
  for (std::size_t i = 0; i < executed.size(); ++i) EXPECT_EQ(executed[i], i);
  ASSERT_EQ(outputs.size(), p.frames.size() - 1);
  for (const auto& m : outputs) {
    ASSERT_TRUE(m.frame.has_value());
    EXPECT_EQ(m.q, p.frames[*m.frame].q);
    EXPECT_EQ(m.gripper_closed, p.frames[*m.frame].gripper_closed);
  }

  // The part ends on the floor near the drop pose, and the completed scan
  // bumped the world version.
  const auto& part = *s.scenario().scene.part;
  EXPECT_NEAR(part.pose.translation.z(), part.radius, 1e-9);
  EXPECT_LT((part.pose.translation.head<2>() - kDrop.position()).norm(), 1.0);
  EXPECT_EQ(s.world_version(), 1u);
  EXPECT_FALSE(s.cloud().entries.empty());
  bool grasped = false;
  for (const auto& e : s.events()) grasped |= e["event"] == "grasped";
  EXPECT_TRUE(grasped);
}

TEST(Supervisor, ApproveAfterWorldChangeIsStale) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{2.0, 0.5, 0.0}});
  const auto id = *s.snapshot().active_proposal;
  s.ingest_cloud(UncertainPointCloud{});
  EXPECT_EQ(code_of([&] { s.approve(id); }), ErrorCode::StaleProposal);
  EXPECT_EQ(s.mode(), Mode::Proposed);
  EXPECT_EQ(s.proposal(id)->status, ProposalStatus::Draft);
}

TEST(Supervisor, RejectReturnsToIdle) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{2.0, 0.5, 0.0}});
  const auto id = *s.snapshot().active_proposal;
  s.reject(id);
  EXPECT_EQ(s.mode(), Mode::Idle);
  EXPECT_EQ(s.proposal(id)->status, ProposalStatus::Rejected);
  EXPECT_EQ(code_of([&] { s.approve(id); }), ErrorCode::WrongMode);
}

TEST(Supervisor, PoseHintOnPathIsFollowed) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{4.0, -1.0, 0.0}});
  const PlanProposal old = active(s);
  const Pose2D via = old.frames[old.frames.size() / 2].base;
  s.refine_with_hint(old.id, via);
  ASSERT_EQ(s.mode(), Mode::Proposed);
  const PlanProposal refined = active(s);
  EXPECT_NE(refined.id, old.id);
  EXPECT_EQ(s.proposal(old.id)->status, ProposalStatus::Rejected);
  EXPECT_LT(closest_frame(refined, via.position()), 0.1);
}

TEST(Supervisor, HintInsideObstacleIsInfeasible) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{4.0, -1.0, 0.0}});
  const auto id = *s.snapshot().active_proposal;
  EXPECT_EQ(code_of([&] { s.refine_with_hint(id, Pose2D{0.95, 1.9, 0.0}); }), ErrorCode::HintInfeasible);
  EXPECT_EQ(s.mode(), Mode::Proposed);
  EXPECT_EQ(s.proposal(id)->status, ProposalStatus::Draft);
  // A self-colliding joint hint is refused too.
  JointConfig folded;
  folded << 0.0, -1.0, 3.1, 0.0, 0.0, 0.0;
  ASSERT_TRUE(oracle::brute_check(sc.robot, sc.arm, {}, folded).collision);
  EXPECT_EQ(code_of([&] { s.refine_with_hint(id, folded); }), ErrorCode::HintInfeasible);
}

TEST(Supervisor, HintOnOtherSideOfDiscChangesSignature) {
  const Scenario sc = fixture("two_obstacles");
  Session s(sc, {}, std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{5.0, 0.0, 0.0}});
  ASSERT_EQ(s.mode(), Mode::Proposed);
  const PlanProposal old = active(s);
  const Vec2 disc{3.5, 0.3};
  const int side = passing_side(old, disc);
  ASSERT_NE(side, 0);
  const Pose2D via{disc.x(), disc.y() - side * 1.2, 0.0};
  s.refine_with_hint(old.id, via);
  ASSERT_EQ(s.mode(), Mode::Proposed);
  const PlanProposal refined = active(s);
  EXPECT_EQ(passing_side(refined, disc), -side);
  EXPECT_NE(refined.segments.at(0).signature, old.segments.at(0).signature);
}

TEST(Supervisor, JointHintBecomesViaConfiguration) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{2.0, 0.5, 0.0}});
  const auto id = *s.snapshot().active_proposal;
  JointConfig via = home_config();
  via[0] += 0.5;
  via[1] += 0.3;
  s.refine_with_hint(id, via);
  ASSERT_EQ(s.mode(), Mode::Proposed);
  const PlanProposal refined = active(s);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& f : refined.frames) best = std::min(best, (f.q - via).cwiseAbs().maxCoeff());
  EXPECT_LT(best, 1e-9);
  EXPECT_EQ(refined.frames.back().q, home_config());
}

TEST(Supervisor, JogIntoWallIsRefusedWithPoseUnchanged) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  const Transform3D arm_in_world = arm_base_in_world(sc.robot, sc.start);
  const Vec3 tcp = fk(sc.arm, home_config()).translation;
  // Wall of points 0.25 m below the TCP (arm-base frame); at home the tool
  // z axis points down, so +z jogs drive into it.
  std::vector<Eigen::Vector3d> wall;
  UncertainPointCloud cloud;
  for (int i = -15; i <= 15; ++i)
    for (int j = -15; j <= 15; ++j) {
      const Vec3 p = tcp + Vec3(0.02 * i, 0.02 * j, -0.25);
      wall.push_back(p);
      cloud.entries.push_back({arm_in_world.apply(p), Vec3::UnitZ(), 0.001, 3});
    }
  s.ingest_cloud(cloud);
  s.enter_teleop();
  JointConfig last = s.snapshot().robot.q;
  TeleopResult r;
  int accepted = 0;
  for (int k = 0; k < 60; ++k) {
    r = s.teleop_cmd(JogTeleop{JogDirection::PosZ, 0.02});
    if (!r.ok) break;
    ++accepted;
    last = s.snapshot().robot.q;
    EXPECT_FALSE(oracle::brute_check(sc.robot, sc.arm, wall, last).collision);
  }
  ASSERT_FALSE(r.ok);
  EXPECT_EQ(r.reason, "Collision");
  EXPECT_GT(accepted, 0);
  EXPECT_EQ(s.snapshot().robot.q, last);
  // The arm stopped because of the wall: the next step would close the gap.
  EXPECT_LT(oracle::brute_check(sc.robot, sc.arm, wall, last).clearance, 0.02 + 1e-6);
}

TEST(Supervisor, OversizedJogStepIsValidationError) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  EXPECT_EQ(code_of([&] { s.teleop_cmd(JogTeleop{JogDirection::PosX, 0.01}); }), ErrorCode::WrongMode);
  s.enter_teleop();
  EXPECT_EQ(code_of([&] { s.teleop_cmd(JogTeleop{JogDirection::PosX, 0.03}); }), ErrorCode::Validation);
  EXPECT_TRUE(s.teleop_cmd(JogTeleop{JogDirection::PosX, 0.02}).ok);
}

TEST(Supervisor, BaseCommandTowardNearObstacleIsClamped) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  // Facing +y with the footprint edge 0.2 m short of the box at y = 1.6.
  const Pose2D near{0.95, 1.6 - sc.robot.base_radius - 0.2, kPi / 2};
  s.perturb_base(near);
  s.enter_teleop();
  const TeleopResult fwd = s.teleop_cmd(BaseTeleop{0.3, 0.0});
  EXPECT_TRUE(fwd.ok);
  EXPECT_EQ(fwd.applied.v, 0.0);
  for (int i = 0; i < 10; ++i) s.tick();
  EXPECT_NEAR(s.snapshot().robot.base.y, near.y, 1e-9);
  // Backing away is allowed.
  const TeleopResult back = s.teleop_cmd(BaseTeleop{-0.3, 0.0});
  EXPECT_EQ(back.applied.v, -0.3);
  for (int i = 0; i < 10; ++i) s.tick();
  EXPECT_LT(s.snapshot().robot.base.y, near.y - 0.01);
  // Commands expire after the hold time.
  for (int i = 0; i < 50; ++i) s.tick();
  EXPECT_EQ(s.snapshot().velocity.v, 0.0);
}

TEST(Supervisor, BaseCommandWithClearPathIsNotClamped) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.perturb_base({0.95, 1.6 - sc.robot.base_radius - 0.5, kPi / 2});
  s.enter_teleop();
  EXPECT_EQ(s.teleop_cmd(BaseTeleop{0.3, 0.0}).applied.v, 0.3);
  EXPECT_EQ(s.teleop_cmd(BaseTeleop{5.0, 0.0}).applied.v, sc.robot.max_v);
}

TEST(Supervisor, GripperCloseAtGraspPoseAttachesPart) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(fetch_task());
  ASSERT_EQ(s.mode(), Mode::Proposed);
  const PlanProposal p = active(s);
  std::size_t grasp_first = 0;
  for (const auto& seg : p.segments)
    if (seg.label == "grasp") grasp_first = seg.first_frame;
  ASSERT_GT(grasp_first, 0u);
  s.approve(p.id);
  // Stop at the last approach frame, then take over.
  while (s.executed_frames().back() + 1 < grasp_first) s.tick();
  s.emergency_stop();
  s.enable();
  s.enter_teleop();
  const JointConfig q = s.snapshot().robot.q;
  EXPECT_EQ(q, p.frames[grasp_first - 1].q);
  // Oracle: the part center lies between the fingers.
  const Transform3D tcp = arm_base_in_world(sc.robot, s.snapshot().robot.base) * fk(sc.arm, q);
  const Vec3 rel = tcp.inverse().apply(sc.scene.part->pose.translation);
  ASSERT_LE(std::abs(rel.z()), kGraspAxialTolerance);
  ASSERT_LE(rel.head<2>().norm(), kGraspLateralTolerance);
  const TeleopResult r = s.teleop_cmd(GripperTeleop{true});
  EXPECT_TRUE(r.attached);
  EXPECT_TRUE(s.snapshot().robot.attached.has_value());
  // Lifting carries the part along.
  const Vec3 before = s.scenario().scene.part->pose.translation;
  ASSERT_TRUE(s.teleop_cmd(JogTeleop{JogDirection::NegZ, 0.02}).ok);
  EXPECT_GT((s.scenario().scene.part->pose.translation - before).norm(), 0.015);
  s.teleop_cmd(GripperTeleop{false});
  EXPECT_FALSE(s.snapshot().robot.attached.has_value());
}

TEST(Supervisor, GripperCloseAwayFromPartAttachesNothing) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.enter_teleop();
  EXPECT_FALSE(s.teleop_cmd(GripperTeleop{true}).attached);
  EXPECT_TRUE(s.snapshot().robot.gripper_closed);
}

TEST(Supervisor, EmergencyStopDuringExecutionHaltsWithinOneTick) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{4.0, -1.0, 0.0}});
  const auto id = *s.snapshot().active_proposal;
  s.approve(id);
  for (int i = 0; i < 100; ++i) s.tick();
  ASSERT_GT(std::abs(s.snapshot().velocity.v), 0.05);
  s.emergency_stop();
  EXPECT_EQ(s.mode(), Mode::Halted);
  EXPECT_EQ(s.snapshot().velocity.v, 0.0);
  const Pose2D held = s.snapshot().robot.base;
  s.tick();
  EXPECT_EQ(s.snapshot().velocity.v, 0.0);
  EXPECT_EQ(s.snapshot().velocity.omega, 0.0);
  EXPECT_NEAR((s.snapshot().robot.base.position() - held.position()).norm(), 0.0, 1e-12);
  EXPECT_EQ(s.proposal(id)->status, ProposalStatus::Aborted);

  // HALTED is absorbing until enable.
  EXPECT_EQ(code_of([&] { s.submit_task(MoveBaseTask{{2.0, 0.0, 0.0}}); }), ErrorCode::WrongMode);
  EXPECT_EQ(code_of([&] { s.approve(id); }), ErrorCode::WrongMode);
  EXPECT_EQ(code_of([&] { s.enter_teleop(); }), ErrorCode::WrongMode);
  for (int i = 0; i < 5; ++i) s.tick();
  EXPECT_EQ(s.mode(), Mode::Halted);
  s.enable();
  EXPECT_EQ(s.mode(), Mode::Idle);
  EXPECT_EQ(code_of([&] { s.enable(); }), ErrorCode::WrongMode);
}

TEST(Supervisor, EmergencyStopCancelsPlanning) {
  const Scenario sc = fixture("printer_cell");
  SessionConfig cfg;
  cfg.async_planning = true;
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>(), cfg);
  s.submit_task(fetch_task());
  EXPECT_EQ(s.mode(), Mode::Planning);
  EXPECT_TRUE(s.snapshot().planning);
  s.emergency_stop();
  s.wait_for_planning();
  EXPECT_EQ(s.mode(), Mode::Halted);
  for (const auto& e : s.events()) EXPECT_NE(e["event"], "proposal_ready");
  EXPECT_FALSE(s.snapshot().active_proposal.has_value());
}

TEST(Supervisor, AsyncPlanningReportsBack) {
  const Scenario sc = fixture("printer_cell");
  SessionConfig cfg;
  cfg.async_planning = true;
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>(), cfg);
  s.submit_task(MoveBaseTask{{2.0, 0.5, 0.0}});
  s.wait_for_planning();
  EXPECT_EQ(s.mode(), Mode::Proposed);
  EXPECT_FALSE(s.snapshot().planning);
}

TEST(Supervisor, PlannerFailureReturnsToIdleWithError) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{0.95, 1.9, 0.0}});
  EXPECT_EQ(s.mode(), Mode::Idle);
  const auto snap = s.snapshot();
  ASSERT_TRUE(snap.last_error.has_value());
  EXPECT_TRUE((*snap.last_error).contains("code"));
  EXPECT_EQ(s.events().back()["event"], "planning_failed");
}

TEST(Supervisor, WatchdogHaltsOnDivergence) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{{4.0, -1.0, 0.0}});
  s.approve(*s.snapshot().active_proposal);
  for (int i = 0; i < 50; ++i) s.tick();
  ASSERT_EQ(s.mode(), Mode::Executing);
  Pose2D truth = s.snapshot().robot.base;
  truth.y += 0.1;
  s.perturb_base(truth);
  s.tick();
  EXPECT_EQ(s.mode(), Mode::Halted);
  EXPECT_EQ(s.events().back()["event"], "watchdog");
  EXPECT_GT(s.events().back()["payload"]["divergence"].get<double>(), 0.05);
}

TEST(Supervisor, WorldVersionIncreasesOnEveryCompletedScan) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  s.submit_task(MoveBaseTask{kMachineStop});
  s.approve(*s.snapshot().active_proposal);
  run_until_not_executing(s);
  ASSERT_EQ(s.mode(), Mode::Done);
  std::vector<std::uint64_t> versions;
  for (int round = 0; round < 2; ++round) {
    ScanTask scan{"machine_arc", sc.scene.part->pose.translation, 0.1};
    s.submit_task(scan);
    ASSERT_EQ(s.mode(), Mode::Proposed);
    s.approve(*s.snapshot().active_proposal);
    run_until_not_executing(s);
    ASSERT_EQ(s.mode(), Mode::Done);
    versions.push_back(s.world_version());
  }
  EXPECT_EQ(versions, (std::vector<std::uint64_t>{1, 2}));
  int scans = 0;
  for (const auto& e : s.events())
    if (e["event"] == "scan_completed") {
      ++scans;
      EXPECT_EQ(e["payload"]["world_version"], scans);
      EXPECT_TRUE(e["payload"].contains("max_sigma_in_region"));
    }
  EXPECT_EQ(scans, 2);
}

TEST(Supervisor, EventLogFileMatchesMemory) {
  const Scenario sc = fixture("printer_cell");
  const auto path = std::filesystem::temp_directory_path() / "mtend_supervisor_events.jsonl";
  SessionConfig cfg;
  cfg.event_log_path = path;
  {
    Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>(), cfg);
    s.submit_task(MoveBaseTask{{2.0, 0.5, 0.0}});
    s.reject(*s.snapshot().active_proposal);
    s.enter_teleop();
    s.emergency_stop();
    s.enable();
    std::ifstream in(path);
    std::vector<json> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(json::parse(line));
    EXPECT_EQ(lines, s.events());
    for (const auto& l : lines)
      for (const char* key : {"t", "event", "mode_before", "mode_after", "payload"}) EXPECT_TRUE(l.contains(key));
    EXPECT_EQ(s.events(3), std::vector<json>(lines.begin() + 3, lines.end()));
  }
  std::filesystem::remove(path);
}

TEST(Supervisor, SnapshotAndTelemetryJson) {
  const Scenario sc = fixture("printer_cell");
  Session s(sc, printer_profiles(sc), std::make_shared<ScenarioPlanner>());
  const json j = to_json(s.snapshot());
  EXPECT_EQ(j["mode"], "IDLE");
  for (const char* sensor : {"lidar", "depth", "odometry", "imu"}) EXPECT_EQ(j["sensors"][sensor], "nominal");
  EXPECT_TRUE(j["active_task"].is_null());
  const json t = s.telemetry();
  EXPECT_TRUE(t.contains("scan_downsampled"));
}

TEST(Supervisor, WireFormsRoundTrip) {
  const TaskGoal goals[] = {ScanTask{"a", {1.0, 2.0, 3.0}, 0.3}, fetch_task(), MoveBaseTask{{1.0, 2.0, 0.5}}};
  for (const auto& g : goals) EXPECT_EQ(to_json(task_goal_from_json(to_json(g))), to_json(g));
  JointConfig q;
  q << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
  for (const Hint& h : {Hint{Pose2D{1.0, 2.0, 0.1}}, Hint{q}}) EXPECT_EQ(to_json(hint_from_json(to_json(h))), to_json(h));
  const TeleopCommand cmds[] = {BaseTeleop{0.1, -0.2}, JogTeleop{JogDirection::NegY, 0.01}, GripperTeleop{true}};
  for (const auto& c : cmds) EXPECT_EQ(to_json(teleop_command_from_json(to_json(c))), to_json(c));
  EXPECT_EQ(code_of([] { task_goal_from_json({{"kind", "dance"}}); }), ErrorCode::Validation);
  EXPECT_EQ(code_of([] { hint_from_json({{"q", {1, 2}}}); }), ErrorCode::Validation);
  EXPECT_EQ(code_of([] { teleop_command_from_json({{"kind", "jog"}, {"direction", "up"}}); }), ErrorCode::Validation);
}

TEST(EaseOfUse, TrialTimeOrdering) {
  EXPECT_DOUBLE_EQ(ease_of_use(14, 14), 1.0);
  EXPECT_NEAR(ease_of_use(24, 14), 1.0 / 11.0, 1e-12);
  EXPECT_NEAR(ease_of_use(18, 14), 0.2, 1e-12);
  EXPECT_LT(ease_of_use(24, 14), ease_of_use(18, 14));
  EXPECT_EQ(code_of([] { ease_of_use(10, 14); }), ErrorCode::NegativeDifference);
  EXPECT_EQ(code_of([] { ease_of_use(10, -1); }), ErrorCode::NegativeDifference);
}

TEST(Risk, ScoreFormulaCorners) {
  EXPECT_EQ(risk_score(0.0, 0.5), 0.0);
  EXPECT_EQ(risk_score(0.02, 0.5), 0.6);
  EXPECT_NEAR(risk_score(0.005, 0.04), 0.6 * 0.5 + 0.4 * 0.25, 1e-12);
  EXPECT_EQ(risk_score(0.0, 0.0), 1.0);
  EXPECT_EQ(risk_score(0.0, std::numeric_limits<double>::infinity()), 0.0);
}

TEST(Risk, CollisionForcesScoreOne) {
  const Scenario sc = fixture("printer_cell");
  Scenario open = sc;
  open.scene.static_obstacles.clear();
  const OccupancyGrid grid = rasterize_scene(open.scene, 0.05, 0.5);
  std::mt19937_64 rng(11);
  PlanProposal p = random_arm_proposal(rng);
  const Transform3D arm_in_world = arm_base_in_world(sc.robot, Pose2D{});
  // One point at the center of the gripper sphere in the middle frame.
  const auto spheres = oracle::brute_spheres(sc.robot, sc.arm, p.frames[6].q);
  UncertainPointCloud cloud;
  cloud.entries.push_back({arm_in_world.apply(spheres.back().center), Vec3::UnitZ(), 0.0, 3});
  const RiskReport r = compute_risk(p, cloud, grid, sc.robot, sc.arm);
  EXPECT_EQ(r.score, 1.0);
  EXPECT_NE(std::find(r.alerts.begin(), r.alerts.end(), kCollisionAlert), r.alerts.end());
}

TEST(Risk, MatchesOracleAndIsMonotoneUnderSigmaInflation) {
  const Scenario sc = fixture("printer_cell");
  Scenario open = sc;
  open.scene.static_obstacles.clear();
  const OccupancyGrid grid = rasterize_scene(open.scene, 0.05, 0.5);
  const Transform3D arm_in_world = arm_base_in_world(sc.robot, Pose2D{});
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> box(-0.9, 0.9), height(-0.3, 0.9), sig(0.0, 0.015), grow(1.0, 3.0),
      unit(0.0, 1.0);
  int collisions = 0, clean = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const PlanProposal p = random_arm_proposal(rng);
    std::vector<Eigen::Vector3d> points;
    std::vector<double> sigmas;
    UncertainPointCloud cloud;
    const int n = 40;
    for (int i = 0; i < n; ++i) {
      const Vec3 q(box(rng), box(rng), height(rng));
      const double s = unit(rng) < 0.05 ? std::numeric_limits<double>::infinity() : sig(rng);
      points.push_back(q);
      sigmas.push_back(s);
      cloud.entries.push_back({arm_in_world.apply(q), Vec3::UnitZ(), s, 3});
    }
    const RiskReport r = compute_risk(p, cloud, grid, sc.robot, sc.arm);
    const OracleRisk o = oracle_risk(sc, p, points, sigmas);
    ASSERT_GE(r.score, 0.0);
    ASSERT_LE(r.score, 1.0);
    if (o.collision) {
      ++collisions;
      EXPECT_EQ(r.score, 1.0) << "trial " << trial;
    } else {
      ++clean;
      EXPECT_NEAR(r.max_sigma_near_path, o.sigma, 1e-12) << "trial " << trial;
      EXPECT_NEAR(r.score, risk_score(o.sigma, o.clearance), 1e-9) << "trial " << trial;
    }
    UncertainPointCloud inflated = cloud;
    for (auto& e : inflated.entries) e.sigma *= grow(rng);
    const RiskReport ri = compute_risk(p, inflated, grid, sc.robot, sc.arm);
    EXPECT_GE(ri.score, r.score) << "trial " << trial;
  }
  EXPECT_GT(collisions, 0);
  EXPECT_GT(clean, 0);
}

TEST(SupervisorProperty, RandomCommandSequencesKeepSafetyInvariants) {
  const Scenario sc = fixture("printer_cell");
  const PropertyStats stats = run_command_sequences(sc, printer_profiles(sc), 10000, 20, 7);
  EXPECT_EQ(stats.violations, 0u) << stats.first_violation;
  // The random walk actually exercised the interesting paths.
  EXPECT_GT(stats.executions, 100u);
  EXPECT_GT(stats.stale_refusals, 10u);
  EXPECT_GT(stats.halts, 100u);
  EXPECT_GT(stats.motions, 100u);
}
