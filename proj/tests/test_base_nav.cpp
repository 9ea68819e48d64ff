#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <random>

#include "mtend/base_nav.hpp"
#include "mtend/error.hpp"

using namespace mtend;

namespace {

Scenario fixture(const std::string& name) {
  return load_scenario(std::filesystem::path(MTEND_DATA_DIR) / "scenarios" / (name + ".json"));
}

NoiseConfig zero_noise() {
  NoiseConfig n;
  n.odom_distance_fraction = 0.0;
  n.odom_dtheta_std = 0.0;
  n.imu_rate_std = 0.0;
  n.imu_bias = 0.0;
  n.lidar_range_std = 0.0;
  return n;
}

double segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace

TEST(StepBase, ArcExamples) {
  const Pose2D a = integrate_arc({0, 0, 0}, 0.0, 0.0, 1.0);
  EXPECT_EQ(a, Pose2D(0, 0, 0));
  const Pose2D b = integrate_arc({0, 0, 0}, 1.0, 0.0, 1.0);
  EXPECT_NEAR(b.x, 1.0, 1e-15);
  EXPECT_NEAR(b.y, 0.0, 1e-15);
  const Pose2D c = integrate_arc({0, 0, 0}, kPi / 2, kPi / 2, 1.0);
  EXPECT_NEAR(c.x, 1.0, 1e-12);
  EXPECT_NEAR(c.y, 1.0, 1e-12);
  EXPECT_NEAR(c.theta, kPi / 2, 1e-12);
}

TEST(StepBase, TickRespectsArcAndPrecondition) {
  RobotModel robot;
  robot.max_v = 2.0;
  robot.max_omega = 2.0;
  robot.max_accel = 100.0;
  BaseState s{{0, 0, 0}, kPi / 2, kPi / 2};
  for (int i = 0; i < 10; ++i) s = step_base(s, {kPi / 2, kPi / 2}, 0.1, robot);
  EXPECT_NEAR(s.truth.x, 1.0, 1e-12);
  EXPECT_NEAR(s.truth.y, 1.0, 1e-12);
  EXPECT_NEAR(s.truth.theta, kPi / 2, 1e-12);
  EXPECT_THROW(step_base(s, {0, 0}, 1.0, robot), Error);
  EXPECT_THROW(step_base(s, {0, 0}, 0.0, robot), Error);
}

TEST(StepBase, ClampsToLimits) {
  RobotModel robot;
  BaseState s;
  for (int i = 0; i < 200; ++i) s = step_base(s, {5.0, -5.0}, 0.1, robot);
  EXPECT_DOUBLE_EQ(s.v, robot.max_v);
  EXPECT_DOUBLE_EQ(s.omega, -robot.max_omega);
  const BaseState one = step_base(BaseState{}, {5.0, 0.0}, 0.1, robot);
  EXPECT_NEAR(one.v, robot.max_accel * 0.1, 1e-15);
}

TEST(StepBase, MatchesFineEuler) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int n = 0; n < 200; ++n) {
    const double v = 0.5 * u(rng), w = u(rng), dt = 0.1 * std::abs(u(rng)) + 1e-3;
    const Pose2D p0(u(rng), u(rng), 3 * u(rng));
    const Pose2D arc = integrate_arc(p0, v, w, dt);
    double x = p0.x, y = p0.y, th = p0.theta;
    const int k = 1000;
    // Heading sampled at each substep midpoint; plain forward Euler carries
    // about 2.5e-6 m of its own error at the velocity limits.
    for (int i = 0; i < k; ++i) {
      const double mid = th + 0.5 * w * dt / k;
      x += v * std::cos(mid) * dt / k;
      y += v * std::sin(mid) * dt / k;
      th += w * dt / k;
    }
    EXPECT_NEAR(arc.x, x, 1e-6);
    EXPECT_NEAR(arc.y, y, 1e-6);
    EXPECT_NEAR(normalize_angle(arc.theta - th), 0.0, 1e-9);
  }
}

TEST(Odometry, ZeroNoiseExactAndDeterministic) {
  const BaseState s{{0, 0, 0}, 0.3, 0.2};
  Rng rng(1);
  const auto r = read_odometry(s, 0.02, zero_noise(), rng);
  EXPECT_DOUBLE_EQ(r.dv, 0.3 * 0.02);
  EXPECT_DOUBLE_EQ(r.dtheta, 0.2 * 0.02);
  Rng a(42), b(42);
  NoiseConfig n;
  for (int i = 0; i < 100; ++i) {
    const auto ra = read_odometry(s, 0.02, n, a), rb = read_odometry(s, 0.02, n, b);
    EXPECT_EQ(ra.dv, rb.dv);
    EXPECT_EQ(ra.dtheta, rb.dtheta);
  }
}

TEST(Odometry, MonteCarloStd) {
  NoiseConfig n;
  const BaseState s{{0, 0, 0}, 0.5, 0.0};
  Rng rng(3);
  const int k = 10000;
  double sd = 0, sth = 0;
  for (int i = 0; i < k; ++i) {
    const auto r = read_odometry(s, 0.02, n, rng);
    sd += std::pow(r.dv - 0.01, 2);
    sth += r.dtheta * r.dtheta;
  }
  EXPECT_NEAR(std::sqrt(sd / k), 0.01 * 0.01, 0.1 * 0.01 * 0.01);
  EXPECT_NEAR(std::sqrt(sth / k), n.odom_dtheta_std, 0.1 * n.odom_dtheta_std);
}

TEST(Imu, ZeroNoiseDeterminismAndBias) {
  const BaseState s{{0, 0, 0}, 0.0, 0.4};
  Rng rng(1);
  EXPECT_DOUBLE_EQ(read_imu(s, 0.02, zero_noise(), rng).yaw_rate, 0.4);
  NoiseConfig n;
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(read_imu(s, 0.02, n, a).yaw_rate, read_imu(s, 0.02, n, b).yaw_rate);
  Rng r(6);
  double sum = 0;
  const int k = 20000;
  for (int i = 0; i < k; ++i) sum += read_imu(BaseState{}, 0.02, n, r).yaw_rate;
  // Standard error 0.005 / sqrt(2e4) = 3.5e-5.
  EXPECT_NEAR(sum / k, n.imu_bias, 2e-4);
}

TEST(Ekf, ExactOdometryTracksTruth) {
  const NoiseConfig n = zero_noise();
  BaseState s{{0.5, -0.2, 0.3}, 0.0, 0.0};
  EkfEstimate e = EkfEstimate::at(s.truth, 0.0);
  RobotModel robot;
  Rng rng(0);
  for (int i = 0; i < 500; ++i) {
    s = step_base(s, {0.4, 0.7 * std::sin(i * 0.01)}, 0.02, robot);
    e = ekf_predict(e, read_odometry(s, 0.02, n, rng), n);
  }
  EXPECT_NEAR(e.mean.x, s.truth.x, 1e-9);
  EXPECT_NEAR(e.mean.y, s.truth.y, 1e-9);
  EXPECT_NEAR(normalize_angle(e.mean.theta - s.truth.theta), 0.0, 1e-9);
}

TEST(Ekf, TraceIncreasesWithNoise) {
  NoiseConfig n;
  EkfEstimate e = EkfEstimate::at({0, 0, 0});
  for (int i = 0; i < 50; ++i) {
    const double before = e.covariance.trace();
    e = ekf_predict(e, {0.01, 0.002}, n);
    EXPECT_GT(e.covariance.trace(), before);
  }
}

// On straight motion along +x the heading and x channels decouple into
// scalar Kalman filters.
TEST(Ekf, StraightLineMatchesScalarFilters) {
  NoiseConfig n;
  const double r = n.ekf_yaw_variance;
  EkfEstimate e = EkfEstimate::at({0, 0, 0}, 1e-4);
  double p_th = 1e-4, p_x = 1e-4;
  for (int i = 0; i < 200; ++i) {
    const double d = 0.01;
    e = ekf_predict(e, {d, 0.0}, n);
    p_th += n.odom_dtheta_std * n.odom_dtheta_std;
    p_x += std::pow(n.odom_distance_fraction * d, 2);
    e = ekf_update_yaw(e, 0.0, 0.02, r);
    p_th = p_th * r / (p_th + r);
    EXPECT_NEAR(e.covariance(2, 2), p_th, 1e-9);
    EXPECT_NEAR(e.covariance(0, 0), p_x, 1e-9);
  }
}

TEST(Ekf, UpdateLimits) {
  EkfEstimate e = EkfEstimate::at({1, 2, 0.0}, 0.1);
  e.imu_heading = 0.0;
  const auto pulled = ekf_update_yaw(e, 0.5, 1.0, 1e-12);
  EXPECT_NEAR(pulled.mean.theta, 0.5, 1e-9);
  const auto same = ekf_update_yaw(e, 0.5, 1.0, std::numeric_limits<double>::infinity());
  EXPECT_EQ(same.mean, e.mean);
  EXPECT_EQ(same.covariance, e.covariance);
}

TEST(Ekf, CovarianceStaysSymmetricPsd) {
  NoiseConfig n;
  Rng rng(12);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  EkfEstimate e = EkfEstimate::at({0, 0, 0});
  for (int i = 0; i < 5000; ++i) {
    if (u(rng) > 0.0) e = ekf_predict(e, {0.02 * u(rng), 0.05 * u(rng)}, n);
    else e = ekf_update_yaw(e, u(rng), 0.02, std::abs(u(rng)) * 1e-3 + 1e-9);
    EXPECT_LE((e.covariance - e.covariance.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Mat3>(e.covariance).eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(Ekf, FusionBeatsOdometryRmse) {
  const Scenario sc = fixture("loop");
  int wins = 0;
  for (int seed = 0; seed < 50; ++seed) {
    BaseSimulator sim(sc, seed);
    double fused = 0, dr = 0;
    int k = 0;
    for (int i = 0; i < 1500; ++i) {
      sim.tick({0.4, 0.25});
      fused += (sim.estimate().mean.position() - sim.state().truth.position()).squaredNorm();
      dr += (sim.dead_reckoning().position() - sim.state().truth.position()).squaredNorm();
      ++k;
    }
    if (fused < dr) ++wins;
  }
  EXPECT_GE(wins, 48);
}

TEST(Lidar, EmptySceneHasNoReturns) {
  Scenario sc;
  sc.scene.finalize();
  const auto scan = simulate_lidar(sc.scene, {5, 5, 0}, 0.0, sc.robot, sc.noise, nullptr);
  ASSERT_EQ(scan.ranges.size(), 360u);
  for (double r : scan.ranges) EXPECT_EQ(r, LidarScan::kNoReturn);
}

TEST(Lidar, WallAtTwoMeters) {
  Scene scene;
  scene.static_obstacles.push_back({{7, -50}, {8, -50}, {8, 50}, {7, 50}});
  scene.finalize();
  RobotModel robot;
  // Wall normal is along -x; robot faces +y so the beam at bearing -90 degrees hits it.
  const auto scan = simulate_lidar(scene, {5, 0, kPi / 2}, 0.0, robot, zero_noise(), nullptr);
  EXPECT_NEAR(scan.ranges[90], 2.0, 1e-12);
  EXPECT_NEAR(scan.bearing(90), -kPi / 2, 1e-12);
}

TEST(Lidar, MatchesPerBeamRaycast) {
  const Scenario sc = fixture("printer_cell");
  const Pose2D pose(2.0, 0.3, 0.4);
  const auto scan = simulate_lidar(sc.scene, pose, 0.0, sc.robot, zero_noise(), nullptr);
  for (int i = 0; i < 360; ++i) {
    const double a = pose.theta + (-kPi + i * kPi / 180.0);
    const auto h = raycast(sc.scene, {pose.x, pose.y, sc.robot.lidar_height}, {std::cos(a), std::sin(a), 0}, 8.0, 0.0);
    if (h) EXPECT_NEAR(scan.ranges[i], h->distance, 1e-12);
    else EXPECT_EQ(scan.ranges[i], LidarScan::kNoReturn);
  }
}

TEST(Lidar, SeesDynamicObstacle) {
  Scenario sc = fixture("dynamic_room");
  const auto before = simulate_lidar(sc.scene, {1, 0, 0}, 0.0, sc.robot, zero_noise(), nullptr);
  const auto after = simulate_lidar(sc.scene, {1, 0, 0}, 5.0, sc.robot, zero_noise(), nullptr);
  EXPECT_EQ(before.ranges[180], LidarScan::kNoReturn);
  EXPECT_NEAR(after.ranges[180], 3.5 - 0.25, 1e-9);
}

TEST(Grid, DistanceTransformMatchesBruteForce) {
  std::mt19937_64 rng(4);
  std::bernoulli_distribution b(0.03);
  const int w = 37, h = 23;
  std::vector<std::uint8_t> seeds(w * h);
  for (auto& s : seeds) s = b(rng);
  const auto d = squared_distance_transform(seeds, w, h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double best = 1e20;
      for (int r2 = 0; r2 < h; ++r2)
        for (int c2 = 0; c2 < w; ++c2)
          if (seeds[r2 * w + c2]) best = std::min(best, double((r - r2) * (r - r2) + (c - c2) * (c - c2)));
      EXPECT_EQ(d[r * w + c], best);
    }
}

TEST(Grid, RepeatedHitsClamp) {
  const Scenario sc = fixture("corridor");
  OccupancyGrid g = OccupancyGrid::covering(sc.scene.floor_bounds, 0.05, 0.5);
  const auto scan = simulate_lidar(sc.scene, sc.start, 0.0, sc.robot, zero_noise(), nullptr);
  for (int i = 0; i < 10; ++i) g = update_map(g, scan, sc.start, 0.0);
  const double a = sc.start.theta + scan.bearing(270);
  const Vec2 hit = sc.start.position() + scan.ranges[270] * Vec2(std::cos(a), std::sin(a));
  EXPECT_DOUBLE_EQ(g.log_odds(g.world_to_cell(hit)), OccupancyGrid::kClamp);
}

TEST(Grid, FreeBeamCellsBelowHalf) {
  OccupancyGrid g(0.05, {0, 0, 0}, 200, 200, 0.3);
  LidarScan scan;
  scan.ranges.assign(360, LidarScan::kNoReturn);
  g = update_map(g, scan, {5, 5, 0}, 0.0);
  for (const auto& c : trace_cells(g.world_to_cell({5, 5}), g.world_to_cell({9.9, 5})))
    EXPECT_LT(g.probability(c), 0.5);
}

TEST(Grid, TimestampMismatchRejected) {
  OccupancyGrid g(0.05, {0, 0, 0}, 20, 20, 0.3);
  LidarScan scan;
  scan.ranges.assign(360, LidarScan::kNoReturn);
  scan.timestamp = 1.0;
  EXPECT_THROW(update_map(g, scan, {0.5, 0.5, 0}, 1.1), Error);
  EXPECT_NO_THROW(update_map(g, scan, {0.5, 0.5, 0}, 1.02));
}

TEST(Grid, AgreesWithRasterization) {
  const Scenario sc = fixture("two_obstacles");
  OccupancyGrid g = OccupancyGrid::covering(sc.scene.floor_bounds, 0.05, 0.5);
  Rng rng(21);
  const std::vector<Pose2D> poses{{1, 0, 0}, {5, 1.5, 0.5}, {5, -1.5, -0.5}, {8.5, 0, kPi}, {2, -2, 1.0}};
  for (const auto& p : poses)
    for (int k = 0; k < 4; ++k) g = update_map(g, simulate_lidar(sc.scene, p, 0.0, sc.robot, sc.noise, &rng), p, 0.0);
  int known = 0, agree = 0;
  const double half_diag = 0.5 * std::sqrt(2.0) * g.resolution();
  for (int r = 0; r < g.height(); ++r)
    for (int c = 0; c < g.width(); ++c) {
      const auto st = g.state({r, c});
      if (st == CellState::Unknown) continue;
      const Vec2 p = g.cell_center({r, c});
      bool truth = false;
      for (const auto& poly : sc.scene.static_obstacles) {
        if (point_in_polygon(poly, p)) truth = true;
        for (std::size_t i = 0; i < poly.size(); ++i)
          if (segment_distance(p, poly[i], poly[(i + 1) % poly.size()]) <= half_diag) truth = true;
      }
      ++known;
      agree += (truth == (st == CellState::Occupied));
    }
  ASSERT_GT(known, 1000);
  EXPECT_GE(double(agree) / known, 0.95);
}

TEST(Grid, InflationExhaustive) {
  const Scenario sc = fixture("two_obstacles");
  OccupancyGrid g = OccupancyGrid::covering(sc.scene.floor_bounds, 0.05, 0.5);
  g = update_map(g, simulate_lidar(sc.scene, {1, 0, 0}, 0.0, sc.robot, zero_noise(), nullptr), {1, 0, 0}, 0.0);
  const auto occ = g.occupied_cells();
  ASSERT_FALSE(occ.empty());
  for (int r = 0; r < g.height(); ++r)
    for (int c = 0; c < g.width(); ++c) {
      if (g.lethal({r, c})) continue;
      for (const auto& o : occ) ASSERT_GT((g.cell_center({r, c}) - g.cell_center(o)).norm(), g.inflation_radius());
    }
  EXPECT_TRUE(g.lethal({-1, 0}));
}

TEST(Grid, CopiesDoNotShareMutations) {
  OccupancyGrid a(0.1, {0, 0, 0}, 10, 10, 0.15);
  EXPECT_FALSE(a.lethal({5, 5}));
  OccupancyGrid b = a;
  b.set_log_odds({5, 5}, 4.0);
  EXPECT_TRUE(b.lethal({5, 6}));
  EXPECT_FALSE(a.lethal({5, 6}));
  EXPECT_NE(a.version(), b.version());
}

TEST(Telemetry, FieldNames) {
  LidarScan scan;
  scan.ranges.assign(360, 1.0);
  scan.ranges[10] = LidarScan::kNoReturn;
  const auto f = telemetry_frame(1.5, {1, 2, 0.1}, EkfEstimate::at({1, 2, 0.1}), 0.3, 0.0, scan);
  for (const char* k : {"t", "truth_pose", "est_pose", "cov_diag", "v", "omega", "scan_downsampled"})
    EXPECT_TRUE(f.contains(k)) << k;
  EXPECT_EQ(f.size(), 7u);
  EXPECT_EQ(f["scan_downsampled"].size(), 36u);
  EXPECT_TRUE(f["scan_downsampled"][1].is_null());
}
