#pragma once

// Test doubles and brute-force checks shared by the supervisor unit tests
// and the acceptance suite.

#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <random>
#include <vector>

#include "mtend/error.hpp"
#include "mtend/supervisor.hpp"
#include "oracles.hpp"

namespace support {

using namespace mtend;

/// Arm-only proposal with the base parked at the origin: a joint-linear
/// sweep between two random configurations near home.
inline PlanProposal random_arm_proposal(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-0.6, 0.6);
  JointConfig a = home_config(), b = home_config();
  for (int i = 0; i < 6; ++i) {
    a[i] += jitter(rng);
    b[i] += jitter(rng);
  }
  PlanProposal p;
  p.goal = MoveBaseTask{};
  PlanSegment seg;
  seg.label = "scan";
  seg.kind = SegmentKind::Arm;
  const int n = 12;
  for (int k = 0; k < n; ++k) {
    SimFrame f;
    f.t = k * kFrameDt;
    f.q = a + (b - a) * (static_cast<double>(k) / (n - 1));
    p.frames.push_back(f);
  }
  seg.last_frame = n - 1;
  p.segments.push_back(seg);
  return p;
}

struct OracleRisk {
  bool collision{false};
  double sigma{0.0};
  double clearance{std::numeric_limits<double>::infinity()};
};

/// Brute force over every frame, sphere and point (arm-base frame).
inline OracleRisk oracle_risk(const mtend::Scenario& sc, const PlanProposal& p, const std::vector<Eigen::Vector3d>& points,
                       const std::vector<double>& sigmas) {
  OracleRisk out;
  for (const auto& f : p.frames) {
    const auto v = oracle::brute_check(sc.robot, sc.arm, points, f.q);
    out.collision |= v.collision;
    out.clearance = std::min(out.clearance, v.clearance);
    for (const auto& s : oracle::brute_spheres(sc.robot, sc.arm, f.q))
      for (std::size_t i = 0; i < points.size(); ++i)
        if (std::isfinite(sigmas[i]) && (points[i] - s.center).norm() <= s.radius + 0.05)
          out.sigma = std::max(out.sigma, sigmas[i]);
  }
  return out;
}

/// Planner stand-in: instant proposals with a short arm wiggle and a short
/// base creep; move_base goals with x < 0 fail, pose hints with x < 0 are
/// infeasible.
class StubPlanner : public TaskPlanner {
 public:
  PlanProposal plan(const TaskGoal& goal, const WorldSnapshot& world, const std::vector<Hint>&, const PlanProposal*,
                    const std::atomic<bool>*) const override {
    if (const auto* m = std::get_if<MoveBaseTask>(&goal); m && m->goal.x < 0.0)
      throw Error(ErrorCode::NoPath, "stub failure");
    PlanProposal p;
    p.goal = goal;
    p.world_version = world.version;
    PlanSegment arm;
    arm.label = "wiggle";
    arm.kind = SegmentKind::Arm;
    arm.base_pose = world.robot.base;
    for (int k = 0; k < 4; ++k) {
      SimFrame f;
      f.t = k * kFrameDt;
      f.base = world.robot.base;
      f.q = world.robot.q;
      f.q[0] += 0.01 * k;
      p.frames.push_back(f);
    }
    arm.last_frame = 3;
    p.segments.push_back(arm);
    PlanSegment base;
    base.label = "creep";
    base.kind = SegmentKind::Base;
    base.first_frame = 4;
    base.last_frame = 5;
    p.segments.push_back(base);
    for (int k = 4; k < 6; ++k) {
      SimFrame f = p.frames.back();
      f.t = k * kFrameDt;
      f.segment = 1;
      p.frames.push_back(f);
    }
    return p;
  }
  void check_hint(const Hint& hint, const WorldSnapshot&, const PlanProposal&) const override {
    if (const auto* pose = std::get_if<Pose2D>(&hint); pose && pose->x < 0.0)
      throw Error(ErrorCode::HintInfeasible, "stub infeasible");
  }
};


struct PropertyStats {
  std::size_t violations{0};
  std::string first_violation;
  std::size_t executions{0};
  std::size_t stale_refusals{0};
  std::size_t halts{0};
  std::size_t motions{0};
};

/// Random command sequences against the stub planner. Checks after every
/// command: EXECUTING is entered only by approving the active draft planned
/// at the current world version; stale drafts are refused with
/// StaleProposal; HALTED is left only through enable; motion is emitted
/// only from EXECUTING or TELEOP. The event log is checked at the end of
/// each sequence.
inline PropertyStats run_command_sequences(const Scenario& sc, const ProfileSet& profiles, int sequences, int length,
                                           std::uint64_t seed) {
  const auto planner = std::make_shared<StubPlanner>();
  std::mt19937_64 rng(seed);
  PropertyStats stats;
  int seq = 0, step = 0;
  const auto violate = [&](const std::string& what) {
    if (stats.violations++ == 0) {
      std::ostringstream os;
      os << "seq " << seq << " step " << step << ": " << what;
      stats.first_violation = os.str();
    }
  };
  for (seq = 0; seq < sequences; ++seq) {
    std::size_t emitted = 0;
    Mode emit_mode = Mode::Idle;
    SessionConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(seq);
    cfg.motion_sink = [&](const MotionOutput& m) {
      ++emitted;
      emit_mode = m.mode;
    };
    Session s(sc, profiles, planner, cfg);
    std::uint64_t model_version = 0;
    std::map<std::uint64_t, std::uint64_t> planned_at;
    for (step = 0; step < length; ++step) {
      const auto before = s.snapshot();
      const std::size_t emitted_before = emitted;
      const int cmd = std::uniform_int_distribution<int>(0, 12)(rng);
      std::uint64_t id = before.active_proposal.value_or(1);
      if (std::uniform_int_distribution<int>(0, 4)(rng) == 0) id = std::uniform_int_distribution<std::uint64_t>(1, 6)(rng);
      bool approved = false, stale_expected = false;
      try {
        switch (cmd) {
          case 0: {
            const double x = std::uniform_int_distribution<int>(0, 5)(rng) == 0 ? -1.0 : 2.0;
            s.submit_task(MoveBaseTask{{x, 0.0, 0.0}});
            break;
          }
          case 1:
          case 2: {
            const auto p = s.proposal(id);
            stale_expected = p && planned_at.count(id) && planned_at[id] != model_version &&
                             before.mode == Mode::Proposed && before.active_proposal == id &&
                             p->status == ProposalStatus::Draft;
            s.approve(id);
            approved = true;
            break;
          }
          case 3: s.reject(id); break;
          case 4: {
            const double x = std::uniform_int_distribution<int>(0, 3)(rng) == 0 ? -1.0 : 1.5;
            s.refine_with_hint(id, Pose2D{x, 0.0, 0.0});
            break;
          }
          case 5: s.enter_teleop(); break;
          case 6: s.exit_teleop(); break;
          case 7: {
            const int kind = std::uniform_int_distribution<int>(0, 2)(rng);
            if (kind == 0) s.teleop_cmd(BaseTeleop{0.2, 0.1});
            if (kind == 1) s.teleop_cmd(JogTeleop{JogDirection::PosZ, 0.01});
            if (kind == 2) s.teleop_cmd(GripperTeleop{true});
            break;
          }
          case 8: s.emergency_stop(); break;
          case 9: s.enable(); break;
          case 10:
            s.ingest_cloud(UncertainPointCloud{});
            ++model_version;
            break;
          default:
            for (int k = 0; k < 3; ++k) s.tick();
            break;
        }
      } catch (const Error& e) {
        if (stale_expected) {
          if (e.code() != ErrorCode::StaleProposal) violate(std::string("stale approve refused with ") + to_string(e.code()));
          ++stats.stale_refusals;
        }
      }
      const auto after = s.snapshot();
      // Newly proposed drafts remember the world version they were planned in.
      if (after.mode == Mode::Proposed && after.active_proposal && !planned_at.count(*after.active_proposal))
        planned_at[*after.active_proposal] = model_version;
      if (stale_expected && approved) violate("stale draft approved");
      if (after.mode == Mode::Executing && before.mode != Mode::Executing) {
        if (!approved || before.mode != Mode::Proposed || before.active_proposal != id ||
            !planned_at.count(id) || planned_at.at(id) != model_version)
          violate("EXECUTING entered without approving the current draft");
        ++stats.executions;
      }
      if (before.mode == Mode::Halted && after.mode != Mode::Halted && !(cmd == 9 && after.mode == Mode::Idle))
        violate(std::string("left HALTED for ") + to_string(after.mode));
      if (after.mode == Mode::Halted && before.mode != Mode::Halted) ++stats.halts;
      if (emitted != emitted_before) {
        if (!motion_allowed(before.mode) || !motion_allowed(emit_mode))
          violate(std::string("motion emitted in ") + to_string(before.mode));
        ++stats.motions;
      }
    }
    // Every entry into EXECUTING is an approval, every exit from HALTED an enable.
    for (const auto& e : s.events()) {
      if (e["mode_after"] == "EXECUTING" && e["mode_before"] != "EXECUTING" && e["event"] != "approved")
        violate("log: EXECUTING entered by " + e["event"].get<std::string>());
      if (e["mode_before"] == "HALTED" && e["mode_after"] != "HALTED" && e["event"] != "enabled")
        violate("log: HALTED left by " + e["event"].get<std::string>());
    }
  }
  return stats;
}

}  // namespace support
