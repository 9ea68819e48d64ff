#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <sstream>

#include "mtend/error.hpp"
#include "mtend/perception.hpp"

using namespace mtend;

namespace {

Scenario fixture(const std::string& name) {
  return load_scenario(std::filesystem::path(MTEND_DATA_DIR) / "scenarios" / (name + ".json"));
}

/// Axis-aligned box mesh.
void add_box(TriangleMesh& m, const Vec3& lo, const Vec3& hi) {
  const int base = static_cast<int>(m.vertices.size());
  for (int i = 0; i < 8; ++i)
    m.vertices.emplace_back(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(), i & 4 ? hi.z() : lo.z());
  const int faces[12][3] = {{0, 1, 3}, {0, 3, 2}, {4, 6, 7}, {4, 7, 5}, {0, 4, 5}, {0, 5, 1},
                            {2, 3, 7}, {2, 7, 6}, {0, 2, 6}, {0, 6, 4}, {1, 5, 7}, {1, 7, 3}};
  for (const auto& f : faces) m.triangles.push_back({base + f[0], base + f[1], base + f[2]});
}

Scene plate_scene(double half = 1.0) {
  Scene s;
  add_box(s.machine_mesh, {-half, -half, -0.01}, {half, half, 0.0});
  s.floor_bounds = {{-3, -3}, {3, 3}};
  s.finalize();
  return s;
}

Transform3D camera_at(const Vec3& eye, const Vec3& target) {
  Transform3D t;
  t.rotation = look_rotation(target - eye);
  t.translation = eye;
  return t;
}

/// Scans of the plane z = 0 with Gaussian noise along its normal.
std::vector<CameraScan> noisy_plane_scans(int scans, double sigma, std::uint64_t seed, int side = 40) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  std::uniform_real_distribution<double> jitter(-0.00125, 0.00125);
  std::vector<CameraScan> out;
  for (int s = 0; s < scans; ++s) {
    CameraScan sc;
    sc.camera = camera_at({0, 0, 0.3}, {0, 0, 0});
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j)
        sc.cloud.points.emplace_back(0.0025 * (i - side / 2) + jitter(rng), 0.0025 * (j - side / 2) + jitter(rng), n(rng));
    out.push_back(std::move(sc));
  }
  return out;
}

double median_sigma(const UncertainPointCloud& c) {
  std::vector<double> s;
  for (const auto& e : c.entries)
    if (std::isfinite(e.sigma)) s.push_back(e.sigma);
  std::nth_element(s.begin(), s.begin() + static_cast<long>(s.size() / 2), s.end());
  return s[s.size() / 2];
}

double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

}  // namespace

TEST(ScanProfile, ArcOfThree) {
  const Vec3 target(0.5, 0.0, 0.0);
  const auto p = generate_scan_profile(ScanShape::Arc, 0.3, target, 3);
  ASSERT_EQ(p.waypoints.size(), 3u);
  const double bearings[3] = {-kPi / 3, 0.0, kPi / 3};
  for (int i = 0; i < 3; ++i) {
    // Lateral axis for a target straight ahead is +y.
    const Vec3 expect = target + 0.3 * Vec3(0, std::sin(bearings[i]), std::cos(bearings[i]));
    EXPECT_LT((p.waypoints[i].translation - expect).norm(), 1e-12);
    const Vec3 axis = p.waypoints[i].rotation.col(2);
    EXPECT_NEAR(axis.dot((target - p.waypoints[i].translation).normalized()), 1.0, 1e-12);
    EXPECT_TRUE(p.waypoints[i].is_valid());
  }
}

TEST(ScanProfile, HemisphereGeometry) {
  const Vec3 target(0.4, 0.2, 0.1);
  const auto p = generate_scan_profile(ScanShape::Hemisphere, 0.35, target, 12);
  ASSERT_EQ(p.waypoints.size(), 12u);
  double min_sep = kPi;
  for (std::size_t i = 0; i < p.waypoints.size(); ++i) {
    const Vec3 di = p.waypoints[i].translation - target;
    EXPECT_NEAR(di.norm(), 0.35, 1e-9);
    EXPECT_GT(di.z(), 0.0);
    for (std::size_t j = i + 1; j < p.waypoints.size(); ++j)
      min_sep = std::min(min_sep, angle_between(di, p.waypoints[j].translation - target));
  }
  EXPECT_GT(min_sep, 20.0 * kPi / 180.0);
}

TEST(ScanProfile, RasterAndValidation) {
  const Vec3 target(0.5, 0.1, 0.0);
  const auto p = generate_scan_profile(ScanShape::Raster, 0.4, target, 9);
  ASSERT_EQ(p.waypoints.size(), 9u);
  for (const auto& w : p.waypoints) {
    EXPECT_NEAR(w.translation.z(), 0.4, 1e-12);
    // The view axis passes through the target.
    const Vec3 d = target - w.translation;
    const Vec3 axis = w.rotation.col(2);
    EXPECT_LT((d - d.dot(axis) * axis).norm(), 1e-9);
  }
  EXPECT_THROW(generate_scan_profile(ScanShape::Arc, 0.1, target, 5), Error);
  EXPECT_THROW(generate_scan_profile(ScanShape::Arc, 0.9, target, 5), Error);
  EXPECT_THROW(generate_scan_profile(ScanShape::Arc, 0.3, target, 2), Error);
  EXPECT_THROW(generate_scan_profile(ScanShape::Arc, 0.3, target, 31), Error);
  const auto back = scan_profile_from_json(to_json(p));
  EXPECT_EQ(to_json(back), to_json(p));
  EXPECT_THROW(scan_shape_from_string("spiral"), Error);
}

TEST(CaptureDepth, EmptySceneAndSquareOnPlate) {
  Scene empty;
  empty.finalize();
  EXPECT_TRUE(capture_depth(empty, camera_at({0, 0, 0.5}, {0, 0, 0}), 0.0, nullptr).empty());

  const Scene plate = plate_scene();
  const Transform3D cam = camera_at({0, 0, 0.5}, {0, 0, 0});
  const PointCloud c = capture_depth(plate, cam, 0.0, nullptr);
  EXPECT_EQ(c.size(), 64u * 48u);
  for (const auto& p : c.points) EXPECT_NEAR(cam.inverse().apply(p).z(), 0.5, 1e-9);
}

TEST(CaptureDepth, MatchesPerPixelRaycast) {
  const Scenario sc = fixture("printer_cell");
  const Transform3D world_from_frame = Transform3D::from_pose2d({2.3, 0, 0}) * sc.robot.arm_mount;
  const Transform3D cam = camera_at({0.4, 0.1, 0.1}, {0.65, 0.0, -0.01});
  const PointCloud c = capture_depth(sc.scene, cam, 0.0, nullptr, world_from_frame);
  const DepthCamera intr;
  const Transform3D wc = world_from_frame * cam;
  std::vector<Vec3> oracle;
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) {
      const Vec3 ray = Vec3(std::tan(kPi / 6) * (2.0 * (u + 0.5) / 64 - 1), std::tan(kPi / 8) * (2.0 * (v + 0.5) / 48 - 1), 1)
                           .normalized();
      const auto hit = raycast(sc.scene, wc.translation, wc.rotation * ray, 1.5, 0.0);
      if (hit && hit->distance >= 0.15) oracle.push_back(world_from_frame.inverse().apply(hit->point));
    }
  ASSERT_EQ(c.size(), oracle.size());
  ASSERT_GT(c.size(), 100u);
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_LT((c.points[i] - oracle[i]).norm(), 1e-9);
}

TEST(CaptureDepth, NoiseIsAlongRay) {
  const Scene plate = plate_scene();
  const Transform3D cam = camera_at({0, 0, 0.5}, {0, 0, 0});
  std::mt19937_64 rng(3);
  const PointCloud c = capture_depth(plate, cam, 0.01, &rng);
  double sum2 = 0.0;
  for (const auto& p : c.points) {
    const Vec3 local = cam.inverse().apply(p);
    // The perturbed point stays on the pixel ray.
    const Vec3 dir = local.normalized();
    const double exact = 0.5 / dir.z();
    sum2 += std::pow(local.norm() - exact, 2);
  }
  EXPECT_NEAR(std::sqrt(sum2 / c.size()), 0.01, 0.001);
}

TEST(Stitch, SubsetIdempotentAndOutliers) {
  const Scene plate = plate_scene();
  const PointCloud c = capture_depth(plate, camera_at({0, 0, 0.4}, {0, 0, 0}), 0.0, nullptr);
  const PointCloud once = stitch({c});
  EXPECT_LE(once.size(), c.size());
  const double half_diag = 0.5 * std::sqrt(3.0) * kVoxelSize;
  const PointIndex idx(c.points);
  for (const auto& p : once.points) EXPECT_LE((c.points[idx.nearest(p, 1)[0]] - p).norm(), half_diag + 1e-12);
  const PointCloud twice = stitch({c, c});
  ASSERT_EQ(twice.size(), once.size());
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_LT((twice.points[i] - once.points[i]).norm(), 1e-12);

  PointCloud noisy = c;
  for (int k = 0; k < 10; ++k) noisy.points.emplace_back(0.3 * k - 1.5, 2.0, 1.0 + 0.1 * k);
  noisy.viewpoints.clear();
  PointCloud plain = c;
  plain.viewpoints.clear();
  const PointCloud filtered = stitch({noisy});
  const PointCloud inliers = stitch({plain});
  for (const auto& p : filtered.points) EXPECT_LT(p.z(), 0.5);
  EXPECT_NEAR(double(filtered.size()), double(inliers.size()), 0.01 * inliers.size());
}

TEST(Normals, PlaneSphereOrientationDegenerate) {
  PointCloud plane;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j) {
      plane.points.emplace_back(0.01 * i, 0.01 * j, 0.0);
      plane.viewpoints.emplace_back(0.1, 0.1, -1.0);
    }
  const auto pn = estimate_normals(plane);
  for (const auto& n : pn.normals) EXPECT_LT(angle_between(n, Vec3(0, 0, -1)), kPi / 180.0);

  PointCloud sphere;
  const int count = 2000;
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / count;
    const double r = std::sqrt(1 - z * z);
    sphere.points.push_back(0.1 * Vec3(r * std::cos(golden * i), r * std::sin(golden * i), z));
    sphere.viewpoints.push_back(sphere.points.back() * 5.0);
  }
  const auto sn = estimate_normals(sphere);
  for (std::size_t i = 0; i < sphere.size(); ++i) {
    EXPECT_LT(angle_between(sn.normals[i], sphere.points[i].normalized()), 3.0 * kPi / 180.0);
    EXPECT_GE(sn.normals[i].dot(sphere.viewpoints[i] - sphere.points[i]), 0.0);
    EXPECT_NEAR(sn.normals[i].norm(), 1.0, 1e-6);
  }

  PointCloud line;
  for (int i = 0; i < 12; ++i) line.points.emplace_back(0.01 * i, 0, 0);
  const auto ln = estimate_normals(line);
  for (bool d : ln.degenerate) EXPECT_TRUE(d);
  line.points.resize(7);
  EXPECT_THROW(estimate_normals(line), Error);
}

TEST(Fuse, IdenticalNoiseFreeScansHaveZeroSigma) {
  const Scene plate = plate_scene();
  const Transform3D cam = camera_at({0.02, 0.01, 0.35}, {0, 0, 0});
  const PointCloud c = capture_depth(plate, cam, 0.0, nullptr);
  const auto fused = fuse({{c, cam}, {c, cam}, {c, cam}});
  ASSERT_FALSE(fused.entries.empty());
  EXPECT_LE(fused.entries.size(), stitch({c, c, c}).size());
  for (const auto& e : fused.entries) {
    EXPECT_NEAR(e.sigma, 0.0, 1e-12);
    EXPECT_LE(e.support, 3u);
    EXPECT_GE(e.support, 1u);
    EXPECT_NEAR(e.n.norm(), 1.0, 1e-6);
  }
  EXPECT_THROW(fuse({{c, cam}}), Error);
}

TEST(Fuse, RecoversInjectedNoise) {
  const auto fused = fuse(noisy_plane_scans(20, 0.002, 11));
  EXPECT_NEAR(median_sigma(fused), 0.002, 0.15 * 0.002);
  for (const auto& e : fused.entries) {
    EXPECT_LE(e.support, 20u);
    EXPECT_TRUE(std::isfinite(e.sigma));
  }
}

TEST(Fuse, DoublingNoiseDoublesSigma) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const double a = median_sigma(fuse(noisy_plane_scans(8, 0.002, seed, 24)));
    const double b = median_sigma(fuse(noisy_plane_scans(8, 0.004, seed, 24)));
    EXPECT_GE(b / a, 1.7) << seed;
    EXPECT_LE(b / a, 2.3) << seed;
  }
}

TEST(Fuse, PlateFixtureCalibration) {
  // Square-on captures: range noise along the ray is close to the normal.
  const Scenario sc = fixture("plate");
  const Transform3D cam = camera_at({0.5, 0.0, 0.45}, {0.5, 0.0, 0.0});
  const auto run = [&](double sigma) {
    std::mt19937_64 rng(17);
    std::vector<CameraScan> scans;
    for (int i = 0; i < 20; ++i) scans.push_back({capture_depth(sc.scene, cam, sigma, &rng), cam});
    return median_sigma(fuse(scans));
  };
  const double a = run(0.002), b = run(0.004);
  EXPECT_NEAR(a, 0.002, 0.15 * 0.002);
  EXPECT_GE(b / a, 1.7);
  EXPECT_LE(b / a, 2.3);
}

TEST(Fuse, PlateFixtureMeansOnSurface) {
  const Scenario sc = fixture("plate");
  const auto prof = generate_scan_profile(ScanShape::Arc, 0.3, {0.5, 0.0, 0.0}, 5);
  std::vector<CameraScan> scans;
  for (const auto& w : prof.waypoints) scans.push_back({capture_depth(sc.scene, w, 0.0, nullptr), w});
  const auto fused = fuse(scans);
  ASSERT_GT(fused.entries.size(), 500u);
  for (const auto& e : fused.entries) {
    // Distance to the plate box surface.
    const Vec3 lo(0.35, -0.15, -0.01), hi(0.65, 0.15, 0.0);
    const Vec3 q = e.p.cwiseMax(lo).cwiseMin(hi);
    EXPECT_LT((e.p - q).norm(), kVoxelSize);
  }
}

TEST(Alert, TrivialAndOracle) {
  UncertainPointCloud c;
  for (int i = 0; i < 10; ++i) c.entries.push_back({Vec3(0.01 * i, 0, 0), Vec3::UnitZ(), 0.0, 2});
  EXPECT_FALSE(uncertainty_alert(c, Vec3::Zero(), 1.0, 0.001).alert);
  c.entries[3].sigma = 0.02;
  const auto a = uncertainty_alert(c, Vec3::Zero(), 1.0, 0.01);
  EXPECT_TRUE(a.alert);
  EXPECT_EQ(a.max_sigma, 0.02);
  EXPECT_THROW(uncertainty_alert(c, Vec3::Zero(), 0.0), Error);
  try {
    uncertainty_alert(c, Vec3(5, 5, 5), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyRegion);
  }

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  UncertainPointCloud r;
  for (int i = 0; i < 2000; ++i) r.entries.push_back({Vec3(u(rng), u(rng), u(rng)), Vec3::UnitZ(), 0.01 * (u(rng) + 1), 1});
  for (int q = 0; q < 50; ++q) {
    const Vec3 center(u(rng), u(rng), u(rng));
    double oracle = -1;
    for (const auto& e : r.entries)
      if ((e.p - center).norm() <= 0.4) oracle = std::max(oracle, e.sigma);
    if (oracle < 0) continue;
    EXPECT_EQ(uncertainty_alert(r, center, 0.4).max_sigma, oracle);
  }
}

TEST(Serialization, BinaryAndJsonRoundTrip) {
  UncertainPointCloud c;
  c.entries.push_back({Vec3(1, 2, 3), Vec3(0, 0, 1), 0.004, 7});
  c.entries.push_back({Vec3(-1, 0.5, 0), Vec3(1, 0, 0), std::numeric_limits<double>::infinity(), 1});
  std::stringstream ss;
  write_binary(ss, c);
  EXPECT_EQ(ss.str().size(), 8u + 2u * (7u * 8u + 4u));
  const std::string bytes = ss.str();
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2u);  // little-endian count
  const auto back = read_binary(ss);
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.entries[0].p, c.entries[0].p);
  EXPECT_EQ(back.entries[0].support, 7u);
  EXPECT_TRUE(std::isinf(back.entries[1].sigma));
  const auto j = to_json(c);
  EXPECT_TRUE(j["entries"][1]["sigma"].is_null());
  const auto jb = ucloud_from_json(j);
  EXPECT_EQ(jb.entries[0].sigma, 0.004);
  EXPECT_TRUE(std::isinf(jb.entries[1].sigma));
  std::stringstream truncated(bytes.substr(0, 20));
  EXPECT_THROW(read_binary(truncated), Error);
}
