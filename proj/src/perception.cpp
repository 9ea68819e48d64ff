#include "mtend/perception.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <tuple>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>

#include "mtend/error.hpp"

namespace mtend {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

// ---------------------------------------------------------------------------
// Spatial index

using BPoint = bg::model::point<double, 3, bg::cs::cartesian>;
using BBox = bg::model::box<BPoint>;
using BValue = std::pair<BPoint, std::size_t>;

struct PointIndex::Impl {
  std::vector<Vec3> points;
  bgi::rtree<BValue, bgi::rstar<16>> tree;
};

namespace {

BPoint bpoint(const Vec3& p) { return BPoint(p.x(), p.y(), p.z()); }

}  // namespace

PointIndex::PointIndex(const std::vector<Vec3>& points) : impl_(std::make_unique<Impl>()) {
  impl_->points = points;
  std::vector<BValue> values;
  values.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) values.emplace_back(bpoint(points[i]), i);
  impl_->tree = bgi::rtree<BValue, bgi::rstar<16>>(values.begin(), values.end());
}

PointIndex::~PointIndex() = default;
PointIndex::PointIndex(PointIndex&&) noexcept = default;
PointIndex& PointIndex::operator=(PointIndex&&) noexcept = default;

std::vector<std::size_t> PointIndex::nearest(const Vec3& p, std::size_t k) const {
  std::vector<BValue> found;
  impl_->tree.query(bgi::nearest(bpoint(p), static_cast<unsigned>(k)), std::back_inserter(found));
  std::vector<std::pair<double, std::size_t>> order;
  for (const auto& v : found) order.emplace_back((impl_->points[v.second] - p).squaredNorm(), v.second);
  std::sort(order.begin(), order.end());
  std::vector<std::size_t> out;
  for (const auto& o : order) out.push_back(o.second);
  return out;
}

std::vector<std::size_t> PointIndex::in_box(const Vec3& lo, const Vec3& hi) const {
  std::vector<BValue> found;
  impl_->tree.query(bgi::intersects(BBox(bpoint(lo), bpoint(hi))), std::back_inserter(found));
  std::vector<std::size_t> out;
  for (const auto& v : found) out.push_back(v.second);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> PointIndex::within(const Vec3& p, double radius) const {
  std::vector<std::size_t> out;
  for (std::size_t i : in_box(p - Vec3::Constant(radius), p + Vec3::Constant(radius)))
    if ((impl_->points[i] - p).squaredNorm() <= radius * radius) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Scan profiles

const char* to_string(ScanShape shape) {
  switch (shape) {
    case ScanShape::Hemisphere: return "hemisphere";
    case ScanShape::Arc: return "arc";
    case ScanShape::Raster: return "raster";
  }
  return "arc";
}

ScanShape scan_shape_from_string(const std::string& s) {
  if (s == "hemisphere") return ScanShape::Hemisphere;
  if (s == "arc") return ScanShape::Arc;
  if (s == "raster") return ScanShape::Raster;
  throw Error(ErrorCode::Validation, "unknown scan shape '" + s + "'");
}

namespace {

Transform3D looking_at(const Vec3& eye, const Vec3& target) {
  Transform3D t;
  t.rotation = look_rotation(target - eye);
  t.translation = eye;
  return t;
}

}  // namespace

ScanProfile generate_scan_profile(ScanShape shape, double standoff, const Vec3& target, int count,
                                  const std::string& name) {
  if (!(standoff >= kMinStandoff && standoff <= kMaxStandoff))
    throw Error(ErrorCode::OutOfRange, "standoff must lie in [0.15, 0.8] m");
  if (count < 3 || count > 30) throw Error(ErrorCode::OutOfRange, "waypoint count must lie in [3, 30]");
  if (!target.allFinite()) throw Error(ErrorCode::Validation, "target must be finite");
  ScanProfile prof;
  prof.name = name.empty() ? std::string(to_string(shape)) : name;
  prof.shape = shape;
  prof.standoff = standoff;
  prof.target = target;
  switch (shape) {
    case ScanShape::Hemisphere: {
      const double golden = kPi * (3.0 - std::sqrt(5.0));
      for (int i = 0; i < count; ++i) {
        const double z = 1.0 - (i + 0.5) / count;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * i;
        const Vec3 dir(r * std::cos(phi), r * std::sin(phi), z);
        prof.waypoints.push_back(looking_at(target + standoff * dir, target));
      }
      break;
    }
    case ScanShape::Arc: {
      // Lateral axis: horizontal and perpendicular to base -> target.
      Vec3 reach(target.x(), target.y(), 0.0);
      if (reach.norm() < 1e-9) reach = Vec3::UnitX();
      const Vec3 lateral = Vec3::UnitZ().cross(reach.normalized());
      for (int i = 0; i < count; ++i) {
        const double beta = (-60.0 + 120.0 * i / (count - 1)) * kPi / 180.0;
        const Vec3 dir = std::sin(beta) * lateral + std::cos(beta) * Vec3::UnitZ();
        prof.waypoints.push_back(looking_at(target + standoff * dir, target));
      }
      break;
    }
    case ScanShape::Raster: {
      const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
      const int rows = (count + cols - 1) / cols;
      const double side = standoff;
      for (int i = 0; i < count; ++i) {
        const int r = i / cols, c = i % cols;
        const double x = cols > 1 ? -0.5 * side + side * c / (cols - 1) : 0.0;
        const double y = rows > 1 ? -0.5 * side + side * r / (rows - 1) : 0.0;
        prof.waypoints.push_back(looking_at(target + Vec3(x, y, standoff), target));
      }
      break;
    }
  }
  return prof;
}

nlohmann::json to_json(const ScanProfile& profile) {
  nlohmann::json wps = nlohmann::json::array();
  for (const auto& w : profile.waypoints) wps.push_back(to_json(w));
  return {{"name", profile.name},
          {"waypoints", wps},
          {"source",
           {{"shape", to_string(profile.shape)},
            {"standoff", profile.standoff},
            {"target", {profile.target.x(), profile.target.y(), profile.target.z()}}}}};
}

ScanProfile scan_profile_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::Parse, "scan profile must be an object");
  ScanProfile p;
  try {
    p.name = j.at("name").get<std::string>();
    const auto& src = j.at("source");
    p.shape = scan_shape_from_string(src.at("shape").get<std::string>());
    p.standoff = src.at("standoff").get<double>();
    const auto& t = src.at("target");
    p.target = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("scan profile: ") + e.what());
  }
  const auto& wps = j.at("waypoints");
  for (std::size_t i = 0; i < wps.size(); ++i)
    p.waypoints.push_back(transform_from_json(wps[i], "waypoints[" + std::to_string(i) + "]"));
  if (p.waypoints.empty()) throw Error(ErrorCode::Validation, "scan profile has no waypoints");
  return p;
}

// ---------------------------------------------------------------------------
// Depth capture

Vec3 DepthCamera::ray(int u, int v) const {
  const double x = std::tan(0.5 * hfov) * (2.0 * (u + 0.5) / width - 1.0);
  const double y = std::tan(0.5 * vfov) * (2.0 * (v + 0.5) / height - 1.0);
  return Vec3(x, y, 1.0).normalized();
}

PointCloud capture_depth(const Scene& scene, const Transform3D& camera, double noise_sigma, std::mt19937_64* rng,
                         const Transform3D& world_from_frame, double t, const DepthCamera& intr) {
  if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::Validation, "noise sigma must be non-negative");
  const Transform3D world_cam = world_from_frame * camera;
  std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
  PointCloud cloud;
  for (int v = 0; v < intr.height; ++v)
    for (int u = 0; u < intr.width; ++u) {
      const Vec3 ray_cam = intr.ray(u, v);
      const Vec3 dir = world_cam.rotation * ray_cam;
      const auto hit = raycast(scene, world_cam.translation, dir, intr.max_range, t);
      if (!hit || hit->distance < intr.min_range) continue;
      double range = hit->distance;
      if (rng && noise_sigma > 0.0) range += noise(*rng);
      cloud.points.push_back(camera.apply(range * ray_cam));
      cloud.viewpoints.push_back(camera.translation);
    }
  return cloud;
}

PointCloud transformed(const PointCloud& cloud, const Transform3D& t) {
  PointCloud out;
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  for (const auto& v : cloud.viewpoints) out.viewpoints.push_back(t.apply(v));
  return out;
}

// ---------------------------------------------------------------------------
// Stitching

PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  const bool views = cloud.viewpoints.size() == cloud.points.size();
  struct Acc {
    Vec3 sum{Vec3::Zero()};
    Vec3 view{Vec3::Zero()};
    int n{0};
  };
  std::map<std::tuple<long, long, long>, Acc> voxels;
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Vec3& p = cloud.points[i];
    if (!p.allFinite()) continue;
    const auto key = std::make_tuple(static_cast<long>(std::floor(p.x() / voxel)),
                                     static_cast<long>(std::floor(p.y() / voxel)),
                                     static_cast<long>(std::floor(p.z() / voxel)));
    Acc& a = voxels[key];
    a.sum += p;
    if (views) a.view += cloud.viewpoints[i];
    ++a.n;
  }
  if (voxels.size() > PointCloud::kMaxPoints)
    throw Error(ErrorCode::OutOfRange, "stitched cloud exceeds the point cap");
  PointCloud out;
  for (const auto& [key, a] : voxels) {
    out.points.push_back(a.sum / a.n);
    if (views) out.viewpoints.push_back(a.view / a.n);
  }
  return out;
}

PointCloud remove_outliers(const PointCloud& cloud, int k, double factor) {
  const std::size_t n = cloud.size();
  if (n <= static_cast<std::size_t>(k)) return cloud;
  const PointIndex index(cloud.points);
  std::vector<double> mean_dist(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto nn = index.nearest(cloud.points[i], static_cast<std::size_t>(k) + 1);
    double sum = 0.0;
    int used = 0;
    for (std::size_t j : nn) {
      if (j == i) continue;
      if (used == k) break;
      sum += (cloud.points[j] - cloud.points[i]).norm();
      ++used;
    }
    mean_dist[i] = used ? sum / used : 0.0;
  }
  double global = 0.0;
  for (double d : mean_dist) global += d;
  global /= static_cast<double>(n);
  const bool views = cloud.viewpoints.size() == n;
  PointCloud out;
  for (std::size_t i = 0; i < n; ++i) {
    if (mean_dist[i] > factor * global) continue;
    out.points.push_back(cloud.points[i]);
    if (views) out.viewpoints.push_back(cloud.viewpoints[i]);
  }
  return out;
}

PointCloud stitch(const std::vector<PointCloud>& clouds) {
  PointCloud all;
  bool views = true;
  for (const auto& c : clouds) views = views && c.viewpoints.size() == c.points.size();
  for (const auto& c : clouds) {
    all.points.insert(all.points.end(), c.points.begin(), c.points.end());
    if (views) all.viewpoints.insert(all.viewpoints.end(), c.viewpoints.begin(), c.viewpoints.end());
  }
  return remove_outliers(voxel_downsample(all));
}

// ---------------------------------------------------------------------------
// Normals

NormalEstimate estimate_normals(const PointCloud& cloud, int k) {
  if (cloud.size() < static_cast<std::size_t>(k))
    throw Error(ErrorCode::Validation, "normal estimation needs at least " + std::to_string(k) + " points");
  const bool views = cloud.viewpoints.size() == cloud.size();
  const PointIndex index(cloud.points);
  NormalEstimate out;
  out.normals.resize(cloud.size(), Vec3::UnitZ());
  out.degenerate.resize(cloud.size(), false);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto nn = index.nearest(cloud.points[i], static_cast<std::size_t>(k) + 1);
    Vec3 mean = Vec3::Zero();
    for (std::size_t j : nn) mean += cloud.points[j];
    mean /= static_cast<double>(nn.size());
    Mat3 cov = Mat3::Zero();
    for (std::size_t j : nn) {
      const Vec3 d = cloud.points[j] - mean;
      cov += d * d.transpose();
    }
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 ev = eig.eigenvalues();  // ascending
    Vec3 n = eig.eigenvectors().col(0).normalized();
    if (!(ev[2] > 0.0) || ev[1] <= 1e-6 * ev[2]) out.degenerate[i] = true;
    const Vec3 toward = views ? Vec3(cloud.viewpoints[i] - cloud.points[i]) : Vec3::UnitZ();
    if (n.dot(toward) < 0.0) n = -n;
    out.normals[i] = n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fusion

UncertainPointCloud fuse(const std::vector<CameraScan>& scans) {
  if (scans.size() < 2) throw Error(ErrorCode::Validation, "fusion needs at least two scans");
  std::vector<PointCloud> clouds;
  std::vector<Vec3> raw;
  std::vector<std::uint32_t> raw_scan;
  for (std::size_t s = 0; s < scans.size(); ++s) {
    PointCloud c = scans[s].cloud;
    if (c.viewpoints.size() != c.points.size()) c.viewpoints.assign(c.points.size(), scans[s].camera.translation);
    for (const auto& p : c.points) {
      raw.push_back(p);
      raw_scan.push_back(static_cast<std::uint32_t>(s));
    }
    clouds.push_back(std::move(c));
  }
  const PointCloud stitched = stitch(clouds);
  UncertainPointCloud out;
  if (stitched.empty()) return out;
  const PointIndex index(raw);

  // Multi-scan means form the fused cloud. Each is taken inside a cylinder
  // along a coarse PCA normal of the raw neighborhood, which collapses the
  // voxel layers that range noise creates. Means of one column coincide, so
  // they are merged again before 8-NN PCA.
  const auto cylinder = [&](const Vec3& c, const Vec3& n) {
    std::vector<std::size_t> inside;
    for (std::size_t j : index.within(c, std::hypot(kFusionAxialWindow, kFusionLateralRadius))) {
      const Vec3 off = raw[j] - c;
      const double axial = off.dot(n);
      if (std::abs(axial) <= kFusionAxialWindow && (off - axial * n).norm() <= kFusionLateralRadius)
        inside.push_back(j);
    }
    return inside;
  };
  PointCloud means;
  means.viewpoints = stitched.viewpoints;
  for (const auto& c : stitched.points) {
    const auto near = index.within(c, kFusionMeanRadius);
    Vec3 coarse = Vec3::UnitZ();
    if (near.size() >= 3) {
      Vec3 mean = Vec3::Zero();
      for (std::size_t j : near) mean += raw[j];
      mean /= static_cast<double>(near.size());
      Mat3 cov = Mat3::Zero();
      for (std::size_t j : near) cov += (raw[j] - mean) * (raw[j] - mean).transpose();
      coarse = Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvectors().col(0).normalized();
    }
    const auto inside = cylinder(c, coarse);
    Vec3 sum = Vec3::Zero();
    for (std::size_t j : inside) sum += raw[j];
    means.points.push_back(inside.empty() ? c : Vec3(sum / static_cast<double>(inside.size())));
  }
  const PointCloud fused_cloud = voxel_downsample(means, kVoxelSize);
  NormalEstimate normals;
  if (fused_cloud.size() >= static_cast<std::size_t>(kNormalNeighbors)) {
    normals = estimate_normals(fused_cloud);
  } else {
    normals.normals.assign(fused_cloud.size(), Vec3::UnitZ());
    normals.degenerate.assign(fused_cloud.size(), true);
  }
  for (std::size_t i = 0; i < fused_cloud.size(); ++i) {
    const Vec3& c = fused_cloud.points[i];
    const Vec3& n = normals.normals[i];
    std::vector<double> d;
    std::set<std::uint32_t> contributing;
    Vec3 sum = Vec3::Zero();
    for (std::size_t j : cylinder(c, n)) {
      d.push_back((raw[j] - c).dot(n));
      sum += raw[j];
      contributing.insert(raw_scan[j]);
    }
    UncertainPoint e;
    e.n = n;
    if (d.empty()) {
      e.p = c;
      e.sigma = std::numeric_limits<double>::infinity();
      e.support = 1;
    } else {
      e.p = sum / static_cast<double>(d.size());
      e.support = static_cast<std::uint32_t>(contributing.size());
      if (d.size() < 2 || normals.degenerate[i]) {
        e.sigma = std::numeric_limits<double>::infinity();
      } else {
        double mean = 0.0;
        for (double x : d) mean += x;
        mean /= static_cast<double>(d.size());
        double var = 0.0;
        for (double x : d) var += (x - mean) * (x - mean);
        e.sigma = std::sqrt(var / static_cast<double>(d.size() - 1));
      }
    }
    out.entries.push_back(e);
  }
  return out;
}

UncertaintyAlert uncertainty_alert(const UncertainPointCloud& cloud, const Vec3& center, double radius,
                                   double threshold) {
  if (!(radius > 0.0)) throw Error(ErrorCode::Validation, "region radius must be positive");
  bool any = false;
  UncertaintyAlert out;
  for (const auto& e : cloud.entries) {
    if ((e.p - center).norm() > radius) continue;
    out.max_sigma = any ? std::max(out.max_sigma, e.sigma) : e.sigma;
    any = true;
  }
  if (!any) throw Error(ErrorCode::EmptyRegion, "no fused points inside the region");
  out.alert = out.max_sigma > threshold;
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw Error(ErrorCode::Parse, "truncated cloud stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_binary(std::ostream& out, const UncertainPointCloud& cloud) {
  put_le<std::uint64_t>(out, cloud.entries.size());
  for (const auto& e : cloud.entries) {
    for (int k = 0; k < 3; ++k) put_le<double>(out, e.p[k]);
    for (int k = 0; k < 3; ++k) put_le<double>(out, e.n[k]);
    put_le<double>(out, e.sigma);
    put_le<std::uint32_t>(out, e.support);
  }
}

UncertainPointCloud read_binary(std::istream& in) {
  const auto count = get_le<std::uint64_t>(in);
  if (count > 50'000'000) throw Error(ErrorCode::Parse, "implausible cloud entry count");
  UncertainPointCloud cloud;
  cloud.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    UncertainPoint e;
    for (int k = 0; k < 3; ++k) e.p[k] = get_le<double>(in);
    for (int k = 0; k < 3; ++k) e.n[k] = get_le<double>(in);
    e.sigma = get_le<double>(in);
    e.support = get_le<std::uint32_t>(in);
    cloud.entries.push_back(e);
  }
  return cloud;
}

nlohmann::json to_json(const UncertainPointCloud& cloud) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : cloud.entries) {
    nlohmann::json sigma = std::isfinite(e.sigma) ? nlohmann::json(e.sigma) : nlohmann::json(nullptr);
    entries.push_back({{"p", {e.p.x(), e.p.y(), e.p.z()}},
                       {"n", {e.n.x(), e.n.y(), e.n.z()}},
                       {"sigma", sigma},
                       {"support", e.support}});
  }
  return {{"entries", entries}};
}

UncertainPointCloud ucloud_from_json(const nlohmann::json& j) {
  UncertainPointCloud cloud;
  try {
    for (const auto& e : j.at("entries")) {
      UncertainPoint u;
      for (int k = 0; k < 3; ++k) {
        u.p[k] = e.at("p").at(k).get<double>();
        u.n[k] = e.at("n").at(k).get<double>();
      }
      u.sigma = e.at("sigma").is_null() ? std::numeric_limits<double>::infinity() : e.at("sigma").get<double>();
      u.support = e.at("support").get<std::uint32_t>();
      cloud.entries.push_back(u);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::Parse, std::string("uncertain cloud: ") + ex.what());
  }
  return cloud;
}

}  // namespace mtend
