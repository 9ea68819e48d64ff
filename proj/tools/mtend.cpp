#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include <CLI11.hpp>

#include "mtend/error.hpp"
#include "mtend/gateway.hpp"

using namespace mtend;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

const fs::path kDataDir = MTEND_DATA_DIR;

fs::path scenario_path(const std::string& name) {
  const fs::path p(name);
  if (fs::exists(p)) return p;
  return kDataDir / "scenarios" / (name + ".json");
}

/// Benchmark queries: fixture, start, goal.
struct BenchCase {
  std::string scenario;
  Pose2D goal;
};

const std::vector<BenchCase> kBenchCases = {
    {"corridor", {7.0, 0.0, 0.0}},
    {"two_obstacles", {9.0, 0.0, 0.0}},
    {"dynamic_room", {8.0, 0.0, 0.0}},
    {"printer_cell", {2.25, 0.0, 0.0}},
};

int cmd_serve(const std::string& scenario, int port, const std::string& host, const std::string& profiles_dir,
              std::uint64_t seed, bool stepped, const std::string& request_log) {
  ProfileRepository repo(profiles_dir);
  for (const auto& e : repo.load_errors()) std::cerr << "warning: " << e.message << "\n";
  SessionConfig cfg;
  cfg.seed = seed;
  cfg.async_planning = !stepped;
  PlannerConfig planner_config;
  planner_config.seed = seed;
  Session session(load_scenario(scenario_path(scenario)), repo.profiles(),
                  std::make_shared<ScenarioPlanner>(planner_config), cfg);
  GatewayConfig gc;
  gc.host = host;
  gc.port = port;
  gc.realtime = !stepped;
  if (!request_log.empty()) gc.request_log = request_log;
  Gateway gateway(session, repo, gc);
  const int bound = gateway.start();
  std::cout << "listening on http://" << host << ":" << bound << std::endl;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_interrupted.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  gateway.stop();
  return 0;
}

int cmd_run_headless(const std::string& scenario, const std::string& script, const std::string& log,
                     double auto_approve_below, const std::string& profiles_dir, std::uint64_t seed) {
  ProfileRepository repo(profiles_dir);
  for (const auto& e : repo.load_errors()) std::cerr << "warning: " << e.message << "\n";
  HeadlessOptions options;
  options.auto_approve_below = auto_approve_below;
  options.seed = seed;
  if (!log.empty()) options.event_log = log;
  const auto t0 = std::chrono::steady_clock::now();
  const HeadlessResult r =
      run_headless(load_scenario(scenario_path(scenario)), repo.profiles(), load_task_script(script), options);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& p : r.executed)
    std::cout << "proposal " << p.id << ": " << p.segments.size() << " segments, " << p.frames.size()
              << " frames, risk " << p.risk.score << "\n";
  std::cout << (r.ok ? "ok: " : "failed: ") << r.message << " (" << r.events.size() << " events, " << wall
            << " s)\n";
  return r.ok ? 0 : 1;
}

int cmd_bench_base(int seeds, const std::string& out_path) {
  std::ofstream file;
  if (out_path != "-") {
    file.open(out_path);
    if (!file) throw Error(ErrorCode::Io, "cannot write " + out_path);
  }
  std::ostream& out = out_path == "-" ? std::cout : file;
  out << "scenario,seed,time_s,length_m,min_clearance_m,iterations\n";
  for (const auto& c : kBenchCases) {
    Scenario sc = load_scenario(scenario_path(c.scenario));
    const OccupancyGrid grid = rasterize_scene(sc.scene, 0.05, 0.5);
    const BandObjectives objectives = BandObjectives::for_robot(sc.robot);
    for (int seed = 0; seed < seeds; ++seed) {
      const auto t0 = std::chrono::steady_clock::now();
      const RoutePlan plan = plan_route(grid, sc.start, c.goal, objectives, {}, static_cast<std::uint64_t>(seed));
      const double time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const auto& best = plan.chosen();
      double length = 0.0;
      for (std::size_t i = 1; i < best.band.nodes.size(); ++i)
        length += (best.band.nodes[i].pose.position() - best.band.nodes[i - 1].pose.position()).norm();
      out << c.scenario << ',' << seed << ',' << time << ',' << length << ',' << best.report.min_clearance << ','
          << best.report.iterations << '\n';
    }
  }
  return 0;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

int cmd_fuse_demo(double noise, int scans, std::uint64_t seed) {
  if (scans < 2) throw Error(ErrorCode::Validation, "--scans: fusion needs at least 2 scans");
  const Scenario sc = load_scenario(scenario_path("plate"));
  Transform3D cam;
  cam.translation = Vec3(0.5, 0.0, 0.45);
  cam.rotation = look_rotation(Vec3(0.5, 0.0, 0.0) - cam.translation);
  std::mt19937_64 rng(seed);
  std::vector<CameraScan> captures;
  for (int i = 0; i < scans; ++i) captures.push_back({capture_depth(sc.scene, cam, noise, &rng), cam});
  const UncertainPointCloud fused = fuse(captures);
  std::vector<double> sigmas;
  std::size_t single = 0;
  for (const auto& e : fused.entries) {
    if (std::isfinite(e.sigma))
      sigmas.push_back(e.sigma);
    else
      ++single;
  }
  if (sigmas.empty()) throw Error(ErrorCode::EmptyRegion, "no fused point has a finite sigma");
  std::sort(sigmas.begin(), sigmas.end());
  const double med = median(sigmas);
  std::printf("scans %d  generator sigma %.6f m\n", scans, noise);
  std::printf("fused points %zu  (single-observation %zu)\n", fused.entries.size(), single);
  std::printf("sigma min %.6f  median %.6f  p90 %.6f  max %.6f m\n", sigmas.front(), med,
              sigmas[sigmas.size() * 9 / 10], sigmas.back());
  if (noise > 0.0) std::printf("median / generator %.4f\n", med / noise);
  return 0;
}

int cmd_ik_check(int samples, std::uint64_t seed) {
  const Scenario sc = load_scenario(scenario_path("printer_cell"));
  const ArmModel& arm = sc.arm;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  int failures = 0, singular = 0;
  double worst_pos = 0.0, worst_rot = 0.0;
  for (int i = 0; i < samples; ++i) {
    JointConfig q;
    for (int k = 0; k < 6; ++k) q[k] = u(rng);
    const Transform3D target = fk(arm, q);
    const IkSolutionSet set = ik_all(arm, target);
    // Near a straight elbow the two elbow branches lie within the duplicate
    // tolerance and are merged, so the seed is matched at that tolerance.
    const double seed_tol = std::abs(std::sin(q[2])) < 1e-3 ? kDuplicateSolutionTol : 1e-6;
    bool seed_found = false;
    for (const auto& s : set.solutions) {
      const Transform3D back = fk(arm, s);
      worst_pos = std::max(worst_pos, (back.translation - target.translation).norm());
      worst_rot = std::max(worst_rot, rotation_distance(back.rotation, target.rotation));
      JointConfig d = s - q;
      for (int k = 0; k < 6; ++k) d[k] = normalize_angle(d[k]);
      seed_found |= d.cwiseAbs().maxCoeff() < seed_tol;
    }
    // Wrist-aligned configurations have a continuum of solutions; only the
    // pose round trip applies there.
    const bool wrist_singular = std::abs(std::sin(q[4])) < 1e-3;
    singular += wrist_singular;
    if (set.solutions.empty() || (!seed_found && !wrist_singular)) ++failures;
  }
  const bool ok = failures == 0 && worst_pos <= 1e-6 && worst_rot <= 1e-6;
  std::printf("samples %d  failures %d  wrist-singular %d\n", samples, failures, singular);
  std::printf("worst round trip %.3e m  %.3e rad\n", worst_pos, worst_rot);
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mobile-manipulator machine-tending simulator and supervisory service"};
  app.require_subcommand(1);

  std::string scenario = "printer_cell", host = "127.0.0.1", profiles = (kDataDir / "profiles").string();
  std::string request_log;
  int port = 8080;
  std::uint64_t seed = 1;
  bool stepped = false;
  auto* serve = app.add_subcommand("serve", "Run the HTTP gateway");
  serve->add_option("--scenario", scenario, "Scenario file or bundled fixture name")->required();
  serve->add_option("--port", port, "TCP port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--profiles", profiles, "Profile repository directory");
  serve->add_option("--seed", seed, "Simulation seed");
  serve->add_flag("--stepped", stepped, "Advance time only through POST /sim/step");
  serve->add_option("--record", request_log, "Append state-changing requests to this JSON-lines file");

  std::string script, log;
  double auto_approve_below = 1.0;
  auto* headless = app.add_subcommand("run-headless", "Execute a scripted task list without an operator");
  headless->add_option("--scenario", scenario, "Scenario file or bundled fixture name")->required();
  headless->add_option("--script", script, "Task script (JSON)")->required()->check(CLI::ExistingFile);
  headless->add_option("--log", log, "Event log output (JSON lines)");
  headless->add_option("--auto-approve-below", auto_approve_below, "Approve proposals with risk below this")
      ->check(CLI::Range(0.0, 1.0 + 1e-9));
  headless->add_option("--profiles", profiles, "Profile repository directory");
  headless->add_option("--seed", seed, "Simulation seed");

  int seeds = 10;
  std::string out = "-";
  auto* bench = app.add_subcommand("bench-base", "Benchmark the base planner on bundled fixtures");
  bench->add_option("--seeds", seeds, "Seeds per fixture")->check(CLI::PositiveNumber);
  bench->add_option("--out", out, "CSV output path ('-' for stdout)");

  double noise = 0.002;
  int scans = 20;
  auto* fuse_demo = app.add_subcommand("fuse-demo", "Fuse noisy scans of the plate fixture");
  fuse_demo->add_option("--noise", noise, "Depth noise sigma (m)")->check(CLI::NonNegativeNumber);
  fuse_demo->add_option("--scans", scans, "Number of scans")->check(CLI::PositiveNumber);
  fuse_demo->add_option("--seed", seed, "Noise seed");

  int samples = 10000;
  auto* ik = app.add_subcommand("ik-check", "FK/IK round trip over random configurations");
  ik->add_option("--samples", samples, "Random configurations")->check(CLI::PositiveNumber);
  ik->add_option("--seed", seed, "Sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*serve) return cmd_serve(scenario, port, host, profiles, seed, stepped, request_log);
    if (*headless) return cmd_run_headless(scenario, script, log, auto_approve_below, profiles, seed);
    if (*bench) return cmd_bench_base(seeds, out);
    if (*fuse_demo) return cmd_fuse_demo(noise, scans, seed);
    if (*ik) return cmd_ik_check(samples, seed);
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
