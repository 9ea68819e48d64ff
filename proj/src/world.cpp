#include "mtend/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "mtend/error.hpp"

namespace mtend {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Triangle BVH

class MeshIndex {
 public:
  explicit MeshIndex(const TriangleMesh& mesh) : mesh_(mesh) {
    order_.resize(mesh.triangles.size());
    std::iota(order_.begin(), order_.end(), 0);
    centroids_.reserve(mesh.triangles.size());
    for (const auto& t : mesh.triangles)
      centroids_.push_back((mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0);
    if (!order_.empty()) build(0, order_.size());
  }

  std::optional<std::pair<double, int>> intersect(const Vec3& o, const Vec3& d, double max_t) const {
    if (nodes_.empty()) return std::nullopt;
    const Vec3 inv(1.0 / d.x(), 1.0 / d.y(), 1.0 / d.z());
    std::optional<std::pair<double, int>> best;
    double best_t = max_t;
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const Node& n = nodes_[stack.back()];
      stack.pop_back();
      if (!slab(n, o, inv, best_t)) continue;
      if (n.left < 0) {
        for (std::size_t i = n.begin; i < n.end; ++i) {
          const auto& tri = mesh_.triangles[order_[i]];
          if (auto t = intersect_triangle(o, d, mesh_.vertices[tri[0]], mesh_.vertices[tri[1]],
                                          mesh_.vertices[tri[2]]);
              t && *t <= best_t) {
            best_t = *t;
            best = {*t, order_[i]};
          }
        }
      } else {
        stack.push_back(n.left);
        stack.push_back(n.right);
      }
    }
    return best;
  }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left{-1};
    int right{-1};
    std::size_t begin{0};
    std::size_t end{0};
  };

  static bool slab(const Node& n, const Vec3& o, const Vec3& inv, double max_t) {
    double t0 = 0.0, t1 = max_t;
    for (int a = 0; a < 3; ++a) {
      double tn = (n.box.min()[a] - o[a]) * inv[a];
      double tf = (n.box.max()[a] - o[a]) * inv[a];
      if (std::isnan(tn) || std::isnan(tf)) {
        if (o[a] < n.box.min()[a] || o[a] > n.box.max()[a]) return false;
        continue;
      }
      if (tn > tf) std::swap(tn, tf);
      t0 = std::max(t0, tn);
      t1 = std::min(t1, tf * (1.0 + 4e-16) + 1e-12);
      if (t0 > t1) return false;
    }
    return true;
  }

  int build(std::size_t begin, std::size_t end) {
    Node node;
    node.begin = begin;
    node.end = end;
    for (std::size_t i = begin; i < end; ++i)
      for (int k = 0; k < 3; ++k) node.box.extend(mesh_.vertices[mesh_.triangles[order_[i]][k]]);
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= 4) return id;
    const Vec3 extent = node.box.sizes();
    int axis = 0;
    if (extent.y() > extent[axis]) axis = 1;
    if (extent.z() > extent[axis]) axis = 2;
    const std::size_t mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) { return centroids_[a][axis] < centroids_[b][axis]; });
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  TriangleMesh mesh_;
  std::vector<int> order_;
  std::vector<Vec3> centroids_;
  std::vector<Node> nodes_;
};

void Scene::finalize() { index_ = std::make_shared<const MeshIndex>(machine_mesh); }

// ---------------------------------------------------------------------------
// Primitives

std::optional<double> intersect_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                         const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = origin - a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = dir.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = e2.dot(q) * inv;
  if (t <= 1e-12) return std::nullopt;
  return t;
}

std::optional<double> intersect_sphere(const Vec3& origin, const Vec3& dir, const Vec3& center,
                                       double radius) {
  const Vec3 oc = origin - center;
  const double b = oc.dot(dir);
  const double c = oc.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  const double t0 = -b - sq;
  if (t0 > 1e-12) return t0;
  const double t1 = -b + sq;
  if (t1 > 1e-12) return t1;
  return std::nullopt;
}

namespace {

struct Candidate {
  double t{std::numeric_limits<double>::infinity()};
  Vec3 normal{Vec3::Zero()};
  void offer(double tt, const Vec3& n) {
    if (tt < t) {
      t = tt;
      normal = n;
    }
  }
};

// Vertical prism over a polygon between z = 0 and z = height.
void intersect_prism(const Polygon& poly, double height, const Vec3& o, const Vec3& d, Candidate& best) {
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = poly[i], b = poly[(i + 1) % n];
    const Vec2 e = b - a;
    // Solve o_xy + t d_xy = a + s e.
    const double den = d.x() * (-e.y()) - d.y() * (-e.x());
    if (std::abs(den) < 1e-15) continue;
    const Vec2 r(a.x() - o.x(), a.y() - o.y());
    const double t = (r.x() * (-e.y()) - r.y() * (-e.x())) / den;
    const double s = (d.x() * r.y() - d.y() * r.x()) / den;
    if (t <= 1e-12 || s < 0.0 || s > 1.0) continue;
    const double z = o.z() + t * d.z();
    if (z < 0.0 || z > height) continue;
    best.offer(t, Vec3(e.y(), -e.x(), 0.0).normalized());
  }
  if (std::abs(d.z()) > 1e-15) {
    for (const double zc : {0.0, height}) {
      const double t = (zc - o.z()) / d.z();
      if (t <= 1e-12) continue;
      const Vec2 p(o.x() + t * d.x(), o.y() + t * d.y());
      if (point_in_polygon(poly, p)) best.offer(t, Vec3::UnitZ());
    }
  }
}

void intersect_cylinder(const Vec2& c, double radius, double height, const Vec3& o, const Vec3& d,
                        Candidate& best) {
  const Vec2 oc(o.x() - c.x(), o.y() - c.y());
  const Vec2 dd(d.x(), d.y());
  const double a = dd.squaredNorm();
  if (a > 1e-18) {
    const double b = oc.dot(dd);
    const double cc = oc.squaredNorm() - radius * radius;
    const double disc = b * b - a * cc;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      for (const double t : {(-b - sq) / a, (-b + sq) / a}) {
        if (t <= 1e-12) continue;
        const double z = o.z() + t * d.z();
        if (z < 0.0 || z > height) continue;
        const Vec2 p = oc + t * dd;
        best.offer(t, Vec3(p.x(), p.y(), 0.0).normalized());
        break;
      }
    }
  }
  if (std::abs(d.z()) > 1e-15) {
    for (const double zc : {0.0, height}) {
      const double t = (zc - o.z()) / d.z();
      if (t <= 1e-12) continue;
      if ((oc + t * dd).norm() <= radius) best.offer(t, Vec3::UnitZ());
    }
  }
}

}  // namespace

bool point_in_polygon(const Polygon& poly, const Vec2& p) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[j];
    if ((a.y() > p.y()) != (b.y() > p.y()) &&
        p.x() < (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x())
      inside = !inside;
  }
  return inside;
}

namespace {

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

bool segments_intersect(const Vec2& p1, const Vec2& p2, const Vec2& q1, const Vec2& q2) {
  const double d1 = cross2(q2 - q1, p1 - q1);
  const double d2 = cross2(q2 - q1, p2 - q1);
  const double d3 = cross2(p2 - p1, q1 - p1);
  const double d4 = cross2(p2 - p1, q2 - p1);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)))
    return true;
  auto on_segment = [](const Vec2& a, const Vec2& b, const Vec2& p) {
    return std::min(a.x(), b.x()) <= p.x() && p.x() <= std::max(a.x(), b.x()) &&
           std::min(a.y(), b.y()) <= p.y() && p.y() <= std::max(a.y(), b.y());
  };
  if (d1 == 0 && on_segment(q1, q2, p1)) return true;
  if (d2 == 0 && on_segment(q1, q2, p2)) return true;
  if (d3 == 0 && on_segment(p1, p2, q1)) return true;
  if (d4 == 0 && on_segment(p1, p2, q2)) return true;
  return false;
}

}  // namespace

bool polygon_is_simple(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      if (adjacent) continue;
      if (segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n])) return false;
    }
  }
  return true;
}

std::optional<RayHit> raycast(const Scene& scene, const Vec3& origin, const Vec3& direction,
                              double max_range, std::optional<double> t) {
  Candidate best;
  if (scene.mesh_index()) {
    if (auto hit = scene.mesh_index()->intersect(origin, direction, max_range)) {
      const auto& tri = scene.machine_mesh.triangles[hit->second];
      const auto& v = scene.machine_mesh.vertices;
      best.offer(hit->first, (v[tri[1]] - v[tri[0]]).cross(v[tri[2]] - v[tri[0]]).normalized());
    }
  } else {
    for (const auto& tri : scene.machine_mesh.triangles) {
      const auto& v = scene.machine_mesh.vertices;
      if (auto tt = intersect_triangle(origin, direction, v[tri[0]], v[tri[1]], v[tri[2]]))
        best.offer(*tt, (v[tri[1]] - v[tri[0]]).cross(v[tri[2]] - v[tri[0]]).normalized());
    }
  }
  for (const auto& poly : scene.static_obstacles) intersect_prism(poly, kObstacleHeight, origin, direction, best);
  if (scene.part) {
    const Vec3 c = scene.part->pose.translation;
    if (auto tt = intersect_sphere(origin, direction, c, scene.part->radius))
      best.offer(*tt, (origin + *tt * direction - c).normalized());
  }
  if (t) {
    for (std::size_t i = 0; i < scene.dynamic_obstacles.size(); ++i)
      intersect_cylinder(dynamic_obstacle_pose(scene, i, *t), scene.dynamic_obstacles[i].radius,
                         kObstacleHeight, origin, direction, best);
  }
  if (!(best.t <= max_range)) return std::nullopt;
  RayHit hit;
  hit.distance = best.t;
  hit.point = origin + best.t * direction;
  hit.normal = best.normal.dot(direction) > 0.0 ? -best.normal : best.normal;
  return hit;
}

Vec2 dynamic_obstacle_pose(const Scene& scene, std::size_t id, double t) {
  if (id >= scene.dynamic_obstacles.size())
    throw Error(ErrorCode::UnknownId, "unknown dynamic obstacle id " + std::to_string(id));
  if (t < 0.0) throw Error(ErrorCode::OutOfRange, "time must be non-negative");
  const auto& wps = scene.dynamic_obstacles[id].waypoints;
  if (wps.empty()) throw Error(ErrorCode::Validation, "dynamic obstacle has no waypoints");
  if (t <= wps.front().t) return {wps.front().x, wps.front().y};
  for (std::size_t i = 0; i + 1 < wps.size(); ++i) {
    const auto& a = wps[i];
    const auto& b = wps[i + 1];
    if (t <= b.t) {
      const double s = (t - a.t) / (b.t - a.t);
      return {a.x + s * (b.x - a.x), a.y + s * (b.y - a.y)};
    }
  }
  return {wps.back().x, wps.back().y};
}

// ---------------------------------------------------------------------------
// Robot defaults and validation

std::vector<std::vector<LinkSphere>> default_link_spheres(const ArmModel& arm) {
  constexpr std::array<double, 6> kRadii{0.075, 0.06, 0.05, 0.045, 0.045, 0.04};
  std::vector<std::vector<LinkSphere>> links;
  auto chain = [](const Vec3& from, const Vec3& to, double radius) {
    const double len = (to - from).norm();
    const int n = std::clamp(static_cast<int>(std::ceil(len / radius)) + 1, 6, 10);
    std::vector<LinkSphere> out;
    for (int i = 0; i < n; ++i) {
      const double s = static_cast<double>(i) / (n - 1);
      out.push_back({from + s * (to - from), radius});
    }
    return out;
  };
  for (int k = 0; k < 6; ++k) {
    const auto& p = arm.dh[k];
    // Origin of frame k expressed in frame k+1; independent of the joint angle.
    const Vec3 prev = -Vec3(p.a, p.d * std::sin(p.alpha), p.d * std::cos(p.alpha));
    links.push_back(chain(prev, Vec3::Zero(), kRadii[k]));
  }
  // Gripper body from the flange to 4 cm short of the TCP; fingertips are
  // left free so the fingers can straddle a part.
  const Vec3 flange = arm.tool_offset.inverse().translation;
  const Vec3 tip = flange + (Vec3::Zero() - flange) * std::max(0.0, 1.0 - 0.04 / std::max(flange.norm(), 1e-9));
  links.push_back(chain(flange, tip, 0.035));
  return links;
}

void validate(const RobotModel& robot) {
  auto positive = [](double v, const char* field) {
    if (!(v > 0.0)) throw Error(ErrorCode::Validation, std::string("robot.") + field + " must be > 0");
  };
  positive(robot.base_radius, "base_radius");
  positive(robot.wheel_base, "wheel_base");
  positive(robot.max_v, "max_v");
  positive(robot.max_omega, "max_omega");
  positive(robot.max_accel, "max_accel");
  if (!robot.arm_mount.is_valid(1e-9)) throw Error(ErrorCode::Validation, "robot.arm_mount is not a rigid transform");
  for (std::size_t l = 0; l < robot.link_spheres.size(); ++l)
    for (std::size_t s = 0; s < robot.link_spheres[l].size(); ++s)
      if (!(robot.link_spheres[l][s].radius > 0.0))
        throw Error(ErrorCode::Validation,
                    "robot.link_spheres[" + std::to_string(l) + "][" + std::to_string(s) + "].radius must be > 0");
}

void validate(const Scene& scene) {
  for (std::size_t i = 0; i < scene.static_obstacles.size(); ++i) {
    if (!polygon_is_simple(scene.static_obstacles[i]))
      throw Error(ErrorCode::Validation, "obstacles[" + std::to_string(i) + "] is not a simple polygon", i);
  }
  if (scene.part && !(scene.part->radius > 0.0)) throw Error(ErrorCode::Validation, "part.radius must be > 0");
  if (scene.part && !scene.part->pose.is_valid(1e-6)) throw Error(ErrorCode::Validation, "part.pose is not a rigid transform");
  for (std::size_t i = 0; i < scene.dynamic_obstacles.size(); ++i) {
    const auto& d = scene.dynamic_obstacles[i];
    const std::string field = "dynamic_obstacles[" + std::to_string(i) + "]";
    if (!(d.radius > 0.0)) throw Error(ErrorCode::Validation, field + ".radius must be > 0", i);
    if (d.waypoints.empty()) throw Error(ErrorCode::Validation, field + ".waypoints is empty", i);
    for (std::size_t k = 1; k < d.waypoints.size(); ++k)
      if (!(d.waypoints[k].t > d.waypoints[k - 1].t))
        throw Error(ErrorCode::Validation, field + ".waypoints times must be strictly increasing", i);
  }
  const auto& tris = scene.machine_mesh.triangles;
  for (std::size_t i = 0; i < tris.size(); ++i)
    for (int k : tris[i])
      if (k < 0 || static_cast<std::size_t>(k) >= scene.machine_mesh.vertices.size())
        throw Error(ErrorCode::Validation, "machine_mesh.triangles[" + std::to_string(i) + "] index out of range", i);
  if (!(scene.floor_bounds.max.x() > scene.floor_bounds.min.x() && scene.floor_bounds.max.y() > scene.floor_bounds.min.y()))
    throw Error(ErrorCode::Validation, "floor bounds are empty");
}

// ---------------------------------------------------------------------------
// JSON

namespace {

const json& require(const json& j, const char* key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw Error(ErrorCode::Parse, "missing field " + path + "." + key);
  return j.at(key);
}

double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw Error(ErrorCode::Parse, "field " + path + " must be a number");
  return j.get<double>();
}

double number_or(const json& j, const char* key, double fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  return number(j.at(key), path + "." + key);
}

Vec2 vec2(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2) throw Error(ErrorCode::Parse, "field " + path + " must be [x, y]");
  return {number(j[0], path + "[0]"), number(j[1], path + "[1]")};
}

Vec3 vec3(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::Parse, "field " + path + " must be [x, y, z]");
  return {number(j[0], path + "[0]"), number(j[1], path + "[1]"), number(j[2], path + "[2]")};
}

json vec_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

ArmModel parse_arm(const json& j) {
  ArmModel arm = ArmModel::ur5();
  if (j.contains("dh")) {
    const auto& dh = j.at("dh");
    if (!dh.is_array() || dh.size() != 6) throw Error(ErrorCode::Parse, "field arm.dh must list 6 joints");
    for (std::size_t i = 0; i < 6; ++i) {
      const std::string p = "arm.dh[" + std::to_string(i) + "]";
      arm.dh[i] = {number(require(dh[i], "a", p), p + ".a"), number(require(dh[i], "d", p), p + ".d"),
                   number(require(dh[i], "alpha", p), p + ".alpha")};
    }
  }
  if (j.contains("limits")) {
    const auto& lim = j.at("limits");
    if (!lim.is_array() || lim.size() != 6) throw Error(ErrorCode::Parse, "field arm.limits must list 6 pairs");
    for (std::size_t i = 0; i < 6; ++i) {
      const Vec2 l = vec2(lim[i], "arm.limits[" + std::to_string(i) + "]");
      if (!(l.x() < l.y())) throw Error(ErrorCode::Validation, "arm.limits[" + std::to_string(i) + "] must have lo < hi");
      arm.limits[i] = {l.x(), l.y()};
    }
  }
  if (j.contains("tool_offset")) arm.tool_offset = transform_from_json(j.at("tool_offset"), "arm.tool_offset");
  if (j.contains("camera_offset")) arm.camera_offset = transform_from_json(j.at("camera_offset"), "arm.camera_offset");
  double reach = 0.0;
  for (const auto& p : arm.dh) reach += std::abs(p.a) + std::abs(p.d);
  if (!(reach > 0.0)) throw Error(ErrorCode::Validation, "arm.dh has zero total reach");
  return arm;
}

json arm_json(const ArmModel& arm) {
  json dh = json::array(), limits = json::array();
  for (const auto& p : arm.dh) dh.push_back({{"a", p.a}, {"d", p.d}, {"alpha", p.alpha}});
  for (const auto& l : arm.limits) limits.push_back(json::array({l.first, l.second}));
  return {{"dh", dh}, {"limits", limits}, {"tool_offset", to_json(arm.tool_offset)},
          {"camera_offset", to_json(arm.camera_offset)}};
}

}  // namespace

json to_json(const Transform3D& t) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r) rot.push_back(json::array({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)}));
  return {{"translation", vec_json(t.translation)}, {"rotation", rot}};
}

Transform3D transform_from_json(const json& j, const std::string& field) {
  if (!j.is_object()) throw Error(ErrorCode::Parse, "field " + field + " must be an object");
  Transform3D t;
  if (j.contains("translation")) t.translation = vec3(j.at("translation"), field + ".translation");
  if (j.contains("rotation")) {
    const auto& r = j.at("rotation");
    if (!r.is_array() || r.size() != 3) throw Error(ErrorCode::Parse, "field " + field + ".rotation must be 3x3");
    for (int i = 0; i < 3; ++i) t.rotation.row(i) = vec3(r[i], field + ".rotation[" + std::to_string(i) + "]").transpose();
  } else if (j.contains("rpy")) {
    const Vec3 rpy = vec3(j.at("rpy"), field + ".rpy");
    t.rotation = Transform3D::from_rpy(rpy.x(), rpy.y(), rpy.z()).rotation;
  }
  if (!t.is_valid(1e-6)) throw Error(ErrorCode::Validation, "field " + field + ".rotation is not orthonormal");
  return t;
}

json to_json(const Pose2D& p) { return {{"x", p.x}, {"y", p.y}, {"theta", p.theta}}; }

Pose2D pose_from_json(const json& j, const std::string& field) {
  return {number(require(j, "x", field), field + ".x"), number(require(j, "y", field), field + ".y"),
          number(require(j, "theta", field), field + ".theta")};
}

Scenario parse_scenario(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::Parse, "scenario must be a JSON object");
  Scenario sc;
  Scene& scene = sc.scene;
  if (doc.contains("floor")) {
    const auto& f = doc.at("floor");
    scene.floor_bounds.min = vec2(require(f, "min", "floor"), "floor.min");
    scene.floor_bounds.max = vec2(require(f, "max", "floor"), "floor.max");
  }
  if (doc.contains("obstacles")) {
    const auto& obs = doc.at("obstacles");
    if (!obs.is_array()) throw Error(ErrorCode::Parse, "field obstacles must be an array");
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const std::string p = "obstacles[" + std::to_string(i) + "]";
      const auto& verts = require(obs[i], "vertices", p);
      if (!verts.is_array()) throw Error(ErrorCode::Parse, "field " + p + ".vertices must be an array");
      Polygon poly;
      for (std::size_t k = 0; k < verts.size(); ++k) poly.push_back(vec2(verts[k], p + ".vertices[" + std::to_string(k) + "]"));
      scene.static_obstacles.push_back(std::move(poly));
    }
  }
  if (doc.contains("machine_mesh")) {
    const auto& m = doc.at("machine_mesh");
    const auto& verts = require(m, "vertices", "machine_mesh");
    const auto& tris = require(m, "triangles", "machine_mesh");
    for (std::size_t k = 0; k < verts.size(); ++k)
      scene.machine_mesh.vertices.push_back(vec3(verts[k], "machine_mesh.vertices[" + std::to_string(k) + "]"));
    for (std::size_t k = 0; k < tris.size(); ++k) {
      const std::string p = "machine_mesh.triangles[" + std::to_string(k) + "]";
      if (!tris[k].is_array() || tris[k].size() != 3) throw Error(ErrorCode::Parse, "field " + p + " must be [i, j, k]");
      std::array<int, 3> t{};
      for (int c = 0; c < 3; ++c) {
        if (!tris[k][c].is_number_integer()) throw Error(ErrorCode::Parse, "field " + p + " must hold integers");
        t[c] = tris[k][c].get<int>();
      }
      scene.machine_mesh.triangles.push_back(t);
    }
  }
  if (doc.contains("part") && !doc.at("part").is_null()) {
    const auto& p = doc.at("part");
    Part part;
    part.pose = transform_from_json(require(p, "pose", "part"), "part.pose");
    part.radius = number(require(p, "radius", "part"), "part.radius");
    scene.part = part;
  }
  if (doc.contains("dynamic_obstacles")) {
    const auto& dyn = doc.at("dynamic_obstacles");
    for (std::size_t i = 0; i < dyn.size(); ++i) {
      const std::string p = "dynamic_obstacles[" + std::to_string(i) + "]";
      DynamicObstacle d;
      d.radius = number(require(dyn[i], "radius", p), p + ".radius");
      const auto& wps = require(dyn[i], "waypoints", p);
      for (std::size_t k = 0; k < wps.size(); ++k) {
        const std::string wp = p + ".waypoints[" + std::to_string(k) + "]";
        if (!wps[k].is_array() || wps[k].size() != 3) throw Error(ErrorCode::Parse, "field " + wp + " must be [t, x, y]");
        d.waypoints.push_back({number(wps[k][0], wp + "[0]"), number(wps[k][1], wp + "[1]"), number(wps[k][2], wp + "[2]")});
      }
      scene.dynamic_obstacles.push_back(std::move(d));
    }
  }

  sc.arm = doc.contains("arm") ? parse_arm(doc.at("arm")) : ArmModel::ur5();

  RobotModel& robot = sc.robot;
  if (doc.contains("robot")) {
    const auto& r = doc.at("robot");
    robot.base_radius = number_or(r, "base_radius", robot.base_radius, "robot");
    robot.wheel_base = number_or(r, "wheel_base", robot.wheel_base, "robot");
    robot.max_v = number_or(r, "max_v", robot.max_v, "robot");
    robot.max_omega = number_or(r, "max_omega", robot.max_omega, "robot");
    robot.max_accel = number_or(r, "max_accel", robot.max_accel, "robot");
    robot.lidar_height = number_or(r, "lidar_height", robot.lidar_height, "robot");
    if (r.contains("arm_mount")) robot.arm_mount = transform_from_json(r.at("arm_mount"), "robot.arm_mount");
    if (r.contains("link_spheres")) {
      const auto& ls = r.at("link_spheres");
      for (std::size_t l = 0; l < ls.size(); ++l) {
        std::vector<LinkSphere> link;
        for (std::size_t s = 0; s < ls[l].size(); ++s) {
          const std::string p = "robot.link_spheres[" + std::to_string(l) + "][" + std::to_string(s) + "]";
          link.push_back({vec3(require(ls[l][s], "center", p), p + ".center"), number(require(ls[l][s], "radius", p), p + ".radius")});
        }
        robot.link_spheres.push_back(std::move(link));
      }
    }
  }
  if (robot.link_spheres.empty()) robot.link_spheres = default_link_spheres(sc.arm);

  if (doc.contains("start_pose")) sc.start = pose_from_json(doc.at("start_pose"), "start_pose");
  if (doc.contains("noise")) {
    const auto& n = doc.at("noise");
    NoiseConfig& c = sc.noise;
    c.odom_distance_fraction = number_or(n, "odom_distance_fraction", c.odom_distance_fraction, "noise");
    c.odom_dtheta_std = number_or(n, "odom_dtheta_std", c.odom_dtheta_std, "noise");
    c.imu_rate_std = number_or(n, "imu_rate_std", c.imu_rate_std, "noise");
    c.imu_bias = number_or(n, "imu_bias", c.imu_bias, "noise");
    c.lidar_range_std = number_or(n, "lidar_range_std", c.lidar_range_std, "noise");
    c.depth_std = number_or(n, "depth_std", c.depth_std, "noise");
    c.ekf_yaw_variance = number_or(n, "ekf_yaw_variance", c.ekf_yaw_variance, "noise");
  }

  validate(scene);
  validate(robot);
  scene.finalize();
  return sc;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open scenario file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::Parse, path.string() + ": " + e.what());
  }
  return parse_scenario(doc);
}

json scenario_to_json(const Scenario& sc) {
  json doc;
  doc["floor"] = {{"min", vec_json(sc.scene.floor_bounds.min)}, {"max", vec_json(sc.scene.floor_bounds.max)}};
  json obstacles = json::array();
  for (const auto& poly : sc.scene.static_obstacles) {
    json verts = json::array();
    for (const auto& v : poly) verts.push_back(vec_json(v));
    obstacles.push_back({{"vertices", verts}});
  }
  doc["obstacles"] = obstacles;
  json mv = json::array(), mt = json::array();
  for (const auto& v : sc.scene.machine_mesh.vertices) mv.push_back(vec_json(v));
  for (const auto& t : sc.scene.machine_mesh.triangles) mt.push_back(json::array({t[0], t[1], t[2]}));
  doc["machine_mesh"] = {{"vertices", mv}, {"triangles", mt}};
  doc["part"] = sc.scene.part ? json{{"pose", to_json(sc.scene.part->pose)}, {"radius", sc.scene.part->radius}} : json(nullptr);
  json dyn = json::array();
  for (const auto& d : sc.scene.dynamic_obstacles) {
    json wps = json::array();
    for (const auto& w : d.waypoints) wps.push_back(json::array({w.t, w.x, w.y}));
    dyn.push_back({{"radius", d.radius}, {"waypoints", wps}});
  }
  doc["dynamic_obstacles"] = dyn;
  json links = json::array();
  for (const auto& link : sc.robot.link_spheres) {
    json l = json::array();
    for (const auto& s : link) l.push_back({{"center", vec_json(s.center)}, {"radius", s.radius}});
    links.push_back(l);
  }
  doc["robot"] = {{"base_radius", sc.robot.base_radius}, {"wheel_base", sc.robot.wheel_base},
                  {"max_v", sc.robot.max_v},             {"max_omega", sc.robot.max_omega},
                  {"max_accel", sc.robot.max_accel},     {"lidar_height", sc.robot.lidar_height},
                  {"arm_mount", to_json(sc.robot.arm_mount)}, {"link_spheres", links}};
  doc["arm"] = arm_json(sc.arm);
  doc["start_pose"] = to_json(sc.start);
  const NoiseConfig& n = sc.noise;
  doc["noise"] = {{"odom_distance_fraction", n.odom_distance_fraction}, {"odom_dtheta_std", n.odom_dtheta_std},
                  {"imu_rate_std", n.imu_rate_std}, {"imu_bias", n.imu_bias},
                  {"lidar_range_std", n.lidar_range_std}, {"depth_std", n.depth_std},
                  {"ekf_yaw_variance", n.ekf_yaw_variance}};
  return doc;
}

void save_scenario(const Scenario& scenario, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write scenario file " + path.string());
  out << scenario_to_json(scenario).dump(2) << '\n';
}

}  // namespace mtend
