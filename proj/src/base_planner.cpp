#include "mtend/base_planner.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <map>
#include <queue>
#include <set>
#include <tuple>

#include <Eigen/Sparse>

#include "mtend/error.hpp"

namespace mtend {

namespace {

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInf = std::numeric_limits<double>::infinity();

double hinge(double x) { return x > 0.0 ? x : 0.0; }

std::vector<Pose2D> waypoints_from_cells(const OccupancyGrid& grid, const std::vector<Cell>& cells,
                                         const Pose2D& goal) {
  std::vector<Pose2D> out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Vec2 p = grid.cell_center(cells[i]);
    double th = goal.theta;
    if (i + 1 < cells.size()) {
      const Vec2 d = grid.cell_center(cells[i + 1]) - p;
      th = std::atan2(d.y(), d.x());
    }
    out.emplace_back(p.x(), p.y(), th);
  }
  return out;
}

double cell_path_length(const OccupancyGrid& grid, const std::vector<Cell>& cells) {
  double len = 0.0;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    const int dr = std::abs(cells[i].row - cells[i - 1].row), dc = std::abs(cells[i].col - cells[i - 1].col);
    len += (dr && dc ? kSqrt2 : (dr || dc ? 1.0 : 0.0)) * grid.resolution();
  }
  return len;
}

}  // namespace

// ---------------------------------------------------------------------------
// Global planning

GlobalPath plan_global(const OccupancyGrid& grid, const Pose2D& start, const Pose2D& goal) {
  const Cell s = grid.world_to_cell(start.position());
  const Cell g = grid.world_to_cell(goal.position());
  if (grid.lethal(s)) throw Error(ErrorCode::StartOccupied, "start cell is inside the inflated obstacle layer");
  if (grid.lethal(g)) throw Error(ErrorCode::GoalOccupied, "goal cell is inside the inflated obstacle layer");

  const int w = grid.width(), h = grid.height();
  const auto idx = [w](const Cell& c) { return static_cast<std::size_t>(c.row) * w + c.col; };
  std::vector<double> cost(static_cast<std::size_t>(w) * h, kInf);
  std::vector<int> parent(cost.size(), -1);
  std::vector<std::uint8_t> closed(cost.size(), 0);
  const auto heuristic = [&](const Cell& c) { return std::hypot(c.row - g.row, c.col - g.col); };

  using Entry = std::tuple<double, int, int>;  // f, row, col
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;
  cost[idx(s)] = 0.0;
  open.emplace(heuristic(s), s.row, s.col);
  bool found = false;
  while (!open.empty()) {
    const auto [f, r, c] = open.top();
    open.pop();
    const Cell cur{r, c};
    if (closed[idx(cur)]) continue;
    closed[idx(cur)] = 1;
    if (cur == g) {
      found = true;
      break;
    }
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        if (!dr && !dc) continue;
        const Cell nb{r + dr, c + dc};
        if (!grid.in_bounds(nb) || closed[idx(nb)] || grid.lethal(nb)) continue;
        const double ng = cost[idx(cur)] + (dr && dc ? kSqrt2 : 1.0);
        if (ng < cost[idx(nb)] - 1e-12) {
          cost[idx(nb)] = ng;
          parent[idx(nb)] = static_cast<int>(idx(cur));
          open.emplace(ng + heuristic(nb), nb.row, nb.col);
        }
      }
  }
  if (!found) throw Error(ErrorCode::NoPath, "goal is not reachable on the inflated grid");

  GlobalPath path;
  path.start = start;
  path.goal = goal;
  for (int i = static_cast<int>(idx(g)); i >= 0; i = parent[i]) path.cells.push_back({i / w, i % w});
  std::reverse(path.cells.begin(), path.cells.end());
  path.waypoints = waypoints_from_cells(grid, path.cells, goal);
  path.length = cell_path_length(grid, path.cells);
  return path;
}

GlobalPath path_from_polyline(const OccupancyGrid& grid, const Pose2D& start, const Pose2D& goal,
                              const std::vector<Vec2>& polyline) {
  GlobalPath path;
  path.start = start;
  path.goal = goal;
  for (std::size_t i = 0; i + 1 < polyline.size(); ++i) {
    const auto seg = trace_cells(grid.world_to_cell(polyline[i]), grid.world_to_cell(polyline[i + 1]));
    for (const auto& c : seg)
      if (path.cells.empty() || !(path.cells.back() == c)) path.cells.push_back(c);
  }
  if (path.cells.empty()) path.cells.push_back(grid.world_to_cell(start.position()));
  path.waypoints = waypoints_from_cells(grid, path.cells, goal);
  path.length = cell_path_length(grid, path.cells);
  return path;
}

// ---------------------------------------------------------------------------
// Band basics

double TimedElasticBand::duration() const {
  double t = 0.0;
  for (std::size_t i = 0; i + 1 < nodes.size(); ++i) t += nodes[i].dt;
  return t;
}

double TimedElasticBand::length() const {
  double l = 0.0;
  for (std::size_t i = 0; i + 1 < nodes.size(); ++i)
    l += (nodes[i + 1].pose.position() - nodes[i].pose.position()).norm();
  return l;
}

Pose2D TimedElasticBand::pose_at(double t) const {
  if (nodes.empty()) return {};
  if (t <= 0.0) return nodes.front().pose;
  for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
    if (t <= nodes[i].dt) {
      const double s = nodes[i].dt > 0.0 ? t / nodes[i].dt : 1.0;
      const Pose2D& a = nodes[i].pose;
      const Pose2D& b = nodes[i + 1].pose;
      return {a.x + s * (b.x - a.x), a.y + s * (b.y - a.y), a.theta + s * normalize_angle(b.theta - a.theta)};
    }
    t -= nodes[i].dt;
  }
  return nodes.back().pose;
}

VelocityCommand TimedElasticBand::velocity_at(double t) const {
  if (t < 0.0) return {};
  for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
    if (t < nodes[i].dt) {
      const Pose2D& a = nodes[i].pose;
      const Pose2D& b = nodes[i + 1].pose;
      const Vec2 d = b.position() - a.position();
      const double sign = d.x() * std::cos(a.theta) + d.y() * std::sin(a.theta) >= 0.0 ? 1.0 : -1.0;
      return {sign * d.norm() / nodes[i].dt, normalize_angle(b.theta - a.theta) / nodes[i].dt};
    }
    t -= nodes[i].dt;
  }
  return {};
}

TimedElasticBand init_band(const GlobalPath& path, double nominal_speed) {
  if (!(nominal_speed > 0.0)) throw Error(ErrorCode::Validation, "nominal speed must be positive");
  std::vector<Vec2> pts{path.start.position()};
  for (std::size_t i = 1; i + 1 < path.waypoints.size(); ++i) pts.push_back(path.waypoints[i].position());
  pts.push_back(path.goal.position());

  std::vector<double> cum{0.0};
  for (std::size_t i = 1; i < pts.size(); ++i) cum.push_back(cum.back() + (pts[i] - pts[i - 1]).norm());
  const double total = cum.back();

  TimedElasticBand band;
  if (total < 1e-9) {
    band.nodes.push_back({path.start, kBandDtMin});
    band.nodes.push_back({path.goal, 0.0});
    return band;
  }
  const std::size_t n =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(total / 0.25 - 1e-9)) + 1, kBandMinNodes, kBandMaxNodes);
  const double spacing = total / static_cast<double>(n - 1);
  const double dt = std::clamp(spacing / nominal_speed, kBandDtMin, kBandDtMax);
  std::vector<Vec2> samples;
  std::size_t seg = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double s = k + 1 == n ? total : spacing * static_cast<double>(k);
    while (seg + 2 < cum.size() && cum[seg + 1] < s) ++seg;
    const double len = cum[seg + 1] - cum[seg];
    const double u = len > 0.0 ? std::clamp((s - cum[seg]) / len, 0.0, 1.0) : 0.0;
    samples.push_back(pts[seg] + u * (pts[seg + 1] - pts[seg]));
  }
  for (std::size_t k = 0; k < n; ++k) {
    Pose2D pose;
    if (k == 0) pose = path.start;
    else if (k + 1 == n) pose = path.goal;
    else {
      const Vec2 d = samples[k + 1] - samples[k];
      pose = Pose2D(samples[k].x(), samples[k].y(), std::atan2(d.y(), d.x()));
    }
    band.nodes.push_back({pose, k + 1 == n ? 0.0 : dt});
  }
  return band;
}

BandObjectives BandObjectives::for_robot(const RobotModel& robot) {
  BandObjectives o;
  o.base_radius = robot.base_radius;
  o.max_v = robot.max_v;
  o.max_omega = robot.max_omega;
  o.max_accel = robot.max_accel;
  o.max_alpha = robot.max_accel / (0.5 * robot.wheel_base);
  return o;
}

double base_clearance(const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs, const Vec2& p,
                      double base_radius) {
  double d = grid.signed_distance(p) - 0.5 * grid.resolution();
  for (const auto& disc : discs) d = std::min(d, (p - disc.center).norm() - disc.radius);
  return d - base_radius;
}

namespace {

bool point_lethal(const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs, const Vec2& p) {
  if (grid.lethal_at(p)) return true;
  for (const auto& d : discs)
    if ((p - d.center).norm() - d.radius <= grid.inflation_radius()) return true;
  return false;
}

template <typename F>
void sample_band(const TimedElasticBand& band, F&& f) {
  for (std::size_t i = 0; i + 1 < band.nodes.size(); ++i) {
    const Vec2 a = band.nodes[i].pose.position(), b = band.nodes[i + 1].pose.position();
    const int steps = std::max(1, static_cast<int>(std::ceil((b - a).norm() / 0.01)));
    for (int k = 0; k < steps; ++k) f(a + (b - a) * (double(k) / steps));
  }
  if (!band.nodes.empty()) f(band.nodes.back().pose.position());
}

}  // namespace

bool band_feasible(const TimedElasticBand& band, const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs,
                   double /*base_radius*/) {
  bool ok = true;
  for (std::size_t i = 1; i + 1 < band.nodes.size(); ++i)
    if (point_lethal(grid, discs, band.nodes[i].pose.position())) return false;
  // Segments: only flag samples away from the (fixed) endpoints' own cells.
  sample_band(band, [&](const Vec2& p) {
    if (!ok) return;
    const bool near_end = (p - band.nodes.front().pose.position()).norm() < 1e-9 ||
                          (p - band.nodes.back().pose.position()).norm() < 1e-9;
    if (!near_end && point_lethal(grid, discs, p)) ok = false;
  });
  return ok;
}

double band_min_clearance(const TimedElasticBand& band, const OccupancyGrid& grid,
                          const std::vector<DiscObstacle>& discs, double base_radius) {
  double m = kInf;
  sample_band(band, [&](const Vec2& p) { m = std::min(m, base_clearance(grid, discs, p, base_radius)); });
  return m;
}

// ---------------------------------------------------------------------------
// Band optimization

namespace {

constexpr int kSegResiduals = 7;
constexpr int kNodeResiduals = 2;
constexpr int kAccResiduals = 2;
constexpr double kObstacleMargin = 0.02;

struct BandProblem {
  const BandObjectives& obj;
  const OccupancyGrid& grid;
  const std::vector<DiscObstacle>& discs;

  double clearance(const Vec2& p) const { return base_clearance(grid, discs, p, obj.base_radius); }
};

struct BandState {
  std::vector<Pose2D> poses;
  std::vector<double> dts;

  std::size_t n() const { return poses.size(); }
  std::size_t variable_count() const { return 3 * (n() - 2) + dts.size(); }
  std::size_t residual_count() const {
    return kSegResiduals * dts.size() + kNodeResiduals * n() + kAccResiduals * 2 * n();
  }

  static BandState from(const TimedElasticBand& b) {
    BandState s;
    for (std::size_t i = 0; i < b.nodes.size(); ++i) {
      s.poses.push_back(b.nodes[i].pose);
      if (i + 1 < b.nodes.size()) s.dts.push_back(b.nodes[i].dt);
    }
    return s;
  }

  TimedElasticBand band() const {
    TimedElasticBand b;
    for (std::size_t i = 0; i < n(); ++i) b.nodes.push_back({poses[i], i < dts.size() ? dts[i] : 0.0});
    return b;
  }

  double& var(std::size_t j) {
    const std::size_t pose_vars = 3 * (n() - 2);
    if (j < pose_vars) {
      Pose2D& p = poses[1 + j / 3];
      return j % 3 == 0 ? p.x : (j % 3 == 1 ? p.y : p.theta);
    }
    return dts[j - pose_vars];
  }
};

struct SegmentKinematics {
  double v;
  double omega;
};

SegmentKinematics segment_velocity(const BandState& s, std::size_t k) {
  const Pose2D& a = s.poses[k];
  const Pose2D& b = s.poses[k + 1];
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double dist = std::hypot(dx, dy);
  const double sign = dx * std::cos(a.theta) + dy * std::sin(a.theta) >= 0.0 ? 1.0 : -1.0;
  return {sign * dist / s.dts[k], normalize_angle(b.theta - a.theta) / s.dts[k]};
}

// Residual groups. Offsets into the stacked vector:
//   segments [0, S*7), nodes [S*7, S*7 + N*2), accelerations after that.
void eval_segment(const BandProblem& pr, const BandState& s, std::size_t k, double* r) {
  const auto& w = pr.obj.weights;
  const Pose2D& a = s.poses[k];
  const Pose2D& b = s.poses[k + 1];
  const double dx = b.x - a.x, dy = b.y - a.y;
  const auto kin = segment_velocity(s, k);
  const double dt = s.dts[k];
  const double v_eps = 0.02 * pr.obj.max_v, w_eps = 0.02 * pr.obj.max_omega;
  r[0] = std::sqrt(w.time * std::max(dt, 0.0));
  r[1] = std::sqrt(w.velocity) * hinge(std::abs(kin.v) - (pr.obj.max_v - v_eps));
  r[2] = std::sqrt(w.velocity) * hinge(std::abs(kin.omega) - (pr.obj.max_omega - w_eps));
  const double ca = std::cos(a.theta), sa = std::sin(a.theta), cb = std::cos(b.theta), sb = std::sin(b.theta);
  r[3] = std::sqrt(w.kinematics) * ((ca + cb) * dy - (sa + sb) * dx);
  r[4] = std::sqrt(w.forward_drive) * hinge(-(dx * ca + dy * sa));
  const Vec2 mid(0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
  r[5] = std::sqrt(w.obstacle) * hinge(pr.obj.min_obstacle_distance + kObstacleMargin - pr.clearance(mid));
  r[6] = 0.0;
  if (pr.obj.min_turn_radius > 0.0) {
    const double dth = std::abs(normalize_angle(b.theta - a.theta));
    if (dth > 1e-6) r[6] = std::sqrt(w.kinematics) * hinge(pr.obj.min_turn_radius - std::hypot(dx, dy) / dth);
  }
}

void eval_node(const BandProblem& pr, const BandState& s, std::size_t i, double* r) {
  r[0] = r[1] = 0.0;
  if (i == 0 || i + 1 == s.n()) return;
  const double c = pr.clearance(s.poses[i].position());
  r[0] = std::sqrt(pr.obj.weights.obstacle) * hinge(pr.obj.min_obstacle_distance + kObstacleMargin - c);
  r[1] = std::sqrt(pr.obj.weights.inflation) * hinge(pr.obj.inflation_distance - c);
}

std::pair<double, double> node_acceleration(const BandProblem& pr, const BandState& s, std::size_t i) {
  const std::size_t segs = s.dts.size();
  SegmentKinematics prev{pr.obj.start_v, pr.obj.start_omega}, next{0.0, 0.0};
  if (i > 0) prev = segment_velocity(s, i - 1);
  if (i < segs) next = segment_velocity(s, i);
  double denom;
  if (i == 0) denom = 0.5 * s.dts[0];
  else if (i == segs) denom = 0.5 * s.dts[segs - 1];
  else denom = 0.5 * (s.dts[i - 1] + s.dts[i]);
  return {(next.v - prev.v) / denom, (next.omega - prev.omega) / denom};
}

void eval_acc(const BandProblem& pr, const BandState& s, std::size_t i, double* r) {
  const auto [a, alpha] = node_acceleration(pr, s, i);
  const double a_eps = 0.02 * pr.obj.max_accel, al_eps = 0.02 * pr.obj.max_alpha;
  r[0] = std::sqrt(pr.obj.weights.acceleration) * hinge(std::abs(a) - (pr.obj.max_accel - a_eps));
  r[1] = std::sqrt(pr.obj.weights.acceleration) * hinge(std::abs(alpha) - (pr.obj.max_alpha - al_eps));
}

std::size_t node_offset(const BandState& s) { return kSegResiduals * s.dts.size(); }
std::size_t acc_offset(const BandState& s) { return node_offset(s) + kNodeResiduals * s.n(); }

Eigen::VectorXd residuals(const BandProblem& pr, const BandState& s) {
  Eigen::VectorXd r = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.residual_count()));
  for (std::size_t k = 0; k < s.dts.size(); ++k) eval_segment(pr, s, k, r.data() + kSegResiduals * k);
  for (std::size_t i = 0; i < s.n(); ++i) eval_node(pr, s, i, r.data() + node_offset(s) + kNodeResiduals * i);
  for (std::size_t i = 0; i < s.n(); ++i) eval_acc(pr, s, i, r.data() + acc_offset(s) + kAccResiduals * i);
  return r;
}

// Residual groups touched by variable j, written into `out` as
// (offset, size) pairs, then evaluated.
void eval_affected(const BandProblem& pr, const BandState& s, std::size_t j,
                   std::vector<std::pair<std::size_t, std::vector<double>>>& out) {
  out.clear();
  const std::size_t pose_vars = 3 * (s.n() - 2);
  const std::size_t n = s.n(), segs = s.dts.size();
  auto add_seg = [&](std::size_t k) {
    std::vector<double> r(kSegResiduals);
    eval_segment(pr, s, k, r.data());
    out.emplace_back(kSegResiduals * k, std::move(r));
  };
  auto add_node = [&](std::size_t i) {
    std::vector<double> r(kNodeResiduals);
    eval_node(pr, s, i, r.data());
    out.emplace_back(node_offset(s) + kNodeResiduals * i, std::move(r));
  };
  auto add_acc = [&](std::size_t i) {
    std::vector<double> r(kAccResiduals);
    eval_acc(pr, s, i, r.data());
    out.emplace_back(acc_offset(s) + kAccResiduals * i, std::move(r));
  };
  if (j < pose_vars) {
    const std::size_t i = 1 + j / 3;
    add_seg(i - 1);
    if (i < segs) add_seg(i);
    add_node(i);
    for (std::size_t a = i - 1; a <= std::min(i + 1, n - 1); ++a) add_acc(a);
  } else {
    const std::size_t k = j - pose_vars;
    add_seg(k);
    add_acc(k);
    add_acc(k + 1);
    if (k > 0) add_acc(k - 1);
    if (k + 2 < n) add_acc(k + 2);
  }
}

Eigen::SparseMatrix<double> jacobian(const BandProblem& pr, BandState s) {
  const std::size_t m = s.residual_count(), nv = s.variable_count();
  std::vector<Eigen::Triplet<double>> trip;
  std::vector<std::pair<std::size_t, std::vector<double>>> plus, minus;
  for (std::size_t j = 0; j < nv; ++j) {
    double& x = s.var(j);
    const double x0 = x;
    const double h = 1e-6;
    x = x0 + h;
    eval_affected(pr, s, j, plus);
    x = x0 - h;
    eval_affected(pr, s, j, minus);
    x = x0;
    std::set<std::size_t> seen;
    for (std::size_t g = 0; g < plus.size(); ++g) {
      const std::size_t off = plus[g].first;
      if (!seen.insert(off).second) continue;
      for (std::size_t e = 0; e < plus[g].second.size(); ++e) {
        const double d = (plus[g].second[e] - minus[g].second[e]) / (2.0 * h);
        if (d != 0.0) trip.emplace_back(static_cast<int>(off + e), static_cast<int>(j), d);
      }
    }
  }
  Eigen::SparseMatrix<double> jac(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(nv));
  jac.setFromTriplets(trip.begin(), trip.end());
  return jac;
}

void clamp_dts(BandState& s) {
  for (auto& dt : s.dts) dt = std::clamp(dt, kBandDtMin, kBandDtMax);
}

double cost_of(const BandProblem& pr, const BandState& s) { return residuals(pr, s).squaredNorm(); }

/// Levenberg-Marquardt inner loop; returns the improved state.
BandState levenberg_marquardt(const BandProblem& pr, BandState s, int iterations, double& lambda) {
  if (s.variable_count() == 0) return s;
  Eigen::VectorXd r = residuals(pr, s);
  double cost = r.squaredNorm();
  for (int it = 0; it < iterations; ++it) {
    const auto jac = jacobian(pr, s);
    const Eigen::SparseMatrix<double> jt = jac.transpose();
    Eigen::SparseMatrix<double> h = jt * jac;
    const Eigen::VectorXd g = jt * r;
    bool improved = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Eigen::SparseMatrix<double> a = h;
      for (Eigen::Index d = 0; d < a.rows(); ++d) a.coeffRef(d, d) += lambda * (h.coeff(d, d) + 1e-6);
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(a);
      if (solver.info() != Eigen::Success) {
        lambda *= 10.0;
        continue;
      }
      const Eigen::VectorXd delta = -solver.solve(g);
      BandState trial = s;
      for (std::size_t j = 0; j < trial.variable_count(); ++j) trial.var(j) += delta[static_cast<Eigen::Index>(j)];
      clamp_dts(trial);
      for (auto& p : trial.poses) p = Pose2D(p.x, p.y, p.theta);
      const Eigen::VectorXd tr = residuals(pr, trial);
      const double tc = tr.squaredNorm();
      if (tc < cost) {
        s = std::move(trial);
        r = tr;
        cost = tc;
        lambda = std::max(lambda / 3.0, 1e-9);
        improved = true;
        break;
      }
      lambda *= 4.0;
    }
    if (!improved) break;
  }
  return s;
}

/// Inserts / removes nodes to keep segments within [0.1, 0.4] m (and
/// rotation steps within 0.4 rad). Returns true when the band changed.
bool resize(BandState& s) {
  bool changed = false;
  BandState out;
  out.poses.push_back(s.poses[0]);
  for (std::size_t k = 0; k < s.dts.size(); ++k) {
    const Pose2D& a = s.poses[k];
    const Pose2D& b = s.poses[k + 1];
    const double dist = (b.position() - a.position()).norm();
    const double dth = normalize_angle(b.theta - a.theta);
    const std::size_t projected = out.poses.size() + (s.n() - k - 1);
    if ((dist > 0.4 || std::abs(dth) > 0.4) && projected < kBandMaxNodes) {
      out.poses.emplace_back(0.5 * (a.x + b.x), 0.5 * (a.y + b.y), a.theta + 0.5 * dth);
      out.dts.push_back(std::max(0.5 * s.dts[k], kBandDtMin));
      out.dts.push_back(std::max(0.5 * s.dts[k], kBandDtMin));
      changed = true;
    } else {
      out.dts.push_back(s.dts[k]);
    }
    out.poses.push_back(b);
  }
  // Removal pass: drop an interior node whose incoming segment is tiny.
  for (std::size_t k = 0; k + 1 < out.dts.size() && out.n() > kBandMinNodes;) {
    const Pose2D& a = out.poses[k];
    const Pose2D& b = out.poses[k + 1];
    const double dist = (b.position() - a.position()).norm();
    const double dth = std::abs(normalize_angle(b.theta - a.theta));
    const double merged = out.dts[k] + out.dts[k + 1];
    const std::size_t victim = k + 1;  // interior because k + 1 < dts.size()
    if (dist < 0.1 && dth < 0.1 && merged <= kBandDtMax) {
      out.poses.erase(out.poses.begin() + static_cast<long>(victim));
      out.dts[k] = merged;
      out.dts.erase(out.dts.begin() + static_cast<long>(k + 1));
      changed = true;
    } else {
      ++k;
    }
  }
  s = std::move(out);
  return changed;
}

/// Stretches segment durations until velocity and acceleration limits hold.
void project_limits(const BandProblem& pr, BandState& s) {
  for (std::size_t k = 0; k < s.dts.size(); ++k) {
    const double dist = (s.poses[k + 1].position() - s.poses[k].position()).norm();
    const double dth = std::abs(normalize_angle(s.poses[k + 1].theta - s.poses[k].theta));
    const double need = std::max(dist / pr.obj.max_v, dth / pr.obj.max_omega);
    s.dts[k] = std::clamp(std::max(s.dts[k], need), kBandDtMin, kBandDtMax);
  }
  for (int pass = 0; pass < 500; ++pass) {
    bool violated = false;
    for (std::size_t i = 0; i < s.n(); ++i) {
      const auto [a, alpha] = node_acceleration(pr, s, i);
      const double ratio = std::max(std::abs(a) / pr.obj.max_accel, std::abs(alpha) / pr.obj.max_alpha);
      if (ratio <= 1.0 + 1e-9) continue;
      violated = true;
      const double k = std::sqrt(ratio) * (1.0 + 1e-9);
      if (i > 0) s.dts[i - 1] = std::min(s.dts[i - 1] * k, kBandDtMax);
      if (i < s.dts.size()) s.dts[i] = std::min(s.dts[i] * k, kBandDtMax);
    }
    if (!violated) break;
  }
}

CostReport report_of(const BandProblem& pr, const BandState& s) {
  const Eigen::VectorXd r = residuals(pr, s);
  CostReport rep;
  for (std::size_t k = 0; k < s.dts.size(); ++k) {
    const double* g = r.data() + kSegResiduals * k;
    rep.time += g[0] * g[0];
    rep.velocity += g[1] * g[1] + g[2] * g[2];
    rep.kinematics += g[3] * g[3] + g[4] * g[4] + g[6] * g[6];
    rep.obstacle += g[5] * g[5];
  }
  for (std::size_t i = 0; i < s.n(); ++i) {
    const double* g = r.data() + node_offset(s) + kNodeResiduals * i;
    rep.obstacle += g[0] * g[0] + g[1] * g[1];
    const double* a = r.data() + acc_offset(s) + kAccResiduals * i;
    rep.acceleration += a[0] * a[0] + a[1] * a[1];
  }
  rep.total = r.squaredNorm();
  const auto band = s.band();
  rep.min_clearance = band_min_clearance(band, pr.grid, pr.discs, pr.obj.base_radius);
  rep.feasible = band_feasible(band, pr.grid, pr.discs, pr.obj.base_radius);
  return rep;
}

void check_cancel(const BandObjectives& o) {
  if (o.cancel && o.cancel->load()) throw Error(ErrorCode::Cancelled, "band optimization cancelled");
}

}  // namespace

CostReport evaluate_band(const TimedElasticBand& band, const BandObjectives& objectives, const OccupancyGrid& grid,
                         const std::vector<DiscObstacle>& discs) {
  BandProblem pr{objectives, grid, discs};
  return report_of(pr, BandState::from(band));
}

OptimizedBand optimize_band(const TimedElasticBand& band, const BandObjectives& objectives,
                            const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs) {
  if (band.nodes.size() < 2) throw Error(ErrorCode::Validation, "band needs at least two nodes");
  BandProblem pr{objectives, grid, discs};
  const Pose2D first = band.nodes.front().pose, last = band.nodes.back().pose;

  BandState cur = BandState::from(band);
  clamp_dts(cur);
  while (resize(cur)) {
  }
  double cur_cost = cost_of(pr, cur);
  std::vector<double> history{cur_cost};
  double lambda = 1e-3;
  int increases = 0, iterations = 0;

  for (int outer = 0; outer < objectives.max_outer_iterations; ++outer) {
    check_cancel(objectives);
    ++iterations;
    BandState cand = levenberg_marquardt(pr, cur, objectives.inner_iterations, lambda);
    const double c = cost_of(pr, cand);
    const double scale = std::max(1.0, std::abs(cur_cost));
    if (!(c <= cur_cost + 1e-9 * scale)) {
      if (++increases >= 3) throw Error(ErrorCode::DivergedBand, "band cost increased on 3 consecutive iterations");
      lambda *= 10.0;
      continue;
    }
    increases = 0;
    history.push_back(c);
    const bool stalled = cur_cost - c <= 1e-7 * scale;
    // Resizing changes the residual set; the cost is re-baselined after it.
    const bool changed = resize(cand);
    cand.poses.front() = first;
    cand.poses.back() = last;
    cur = std::move(cand);
    cur_cost = changed ? cost_of(pr, cur) : c;
    if (stalled && !changed) break;
  }
  // Final time scaling onto the hard velocity / acceleration limits.
  project_limits(pr, cur);
  OptimizedBand out;
  out.band = cur.band();
  out.band.nodes.front().pose = first;
  out.band.nodes.back().pose = last;
  out.report = report_of(pr, cur);
  out.report.iterations = iterations;
  out.report.history = std::move(history);
  return out;
}

// ---------------------------------------------------------------------------
// Homotopy classes

std::vector<Vec2> obstacle_representatives(const OccupancyGrid& grid) {
  const int w = grid.width(), h = grid.height();
  std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
  std::vector<Vec2> reps;
  int next = 0;
  for (int r0 = 0; r0 < h; ++r0)
    for (int c0 = 0; c0 < w; ++c0) {
      const std::size_t i0 = static_cast<std::size_t>(r0) * w + c0;
      if (label[i0] >= 0 || !grid.occupied({r0, c0})) continue;
      std::vector<Cell> comp;
      std::vector<Cell> stack{{r0, c0}};
      label[i0] = next;
      bool border = false;
      while (!stack.empty()) {
        const Cell c = stack.back();
        stack.pop_back();
        comp.push_back(c);
        if (c.row == 0 || c.col == 0 || c.row == h - 1 || c.col == w - 1) border = true;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const Cell nb{c.row + dr, c.col + dc};
            if (!grid.in_bounds(nb)) continue;
            const std::size_t ni = static_cast<std::size_t>(nb.row) * w + nb.col;
            if (label[ni] >= 0 || !grid.occupied(nb)) continue;
            label[ni] = next;
            stack.push_back(nb);
          }
      }
      ++next;
      if (border || comp.size() < 3) continue;
      Vec2 centroid = Vec2::Zero();
      for (const auto& c : comp) centroid += grid.cell_center(c);
      centroid /= static_cast<double>(comp.size());
      const Cell* best = &comp.front();
      double bd = kInf;
      for (const auto& c : comp) {
        const double d = (grid.cell_center(c) - centroid).squaredNorm();
        if (d < bd || (d == bd && c < *best)) {
          bd = d;
          best = &c;
        }
      }
      reps.push_back(grid.cell_center(*best));
    }
  return reps;
}

namespace {

/// +1 / -1 when segment a->b crosses the vertical ray from `rep` going up
/// (or down when `up` is false), 0 otherwise.
int ray_crossing(const Vec2& a, const Vec2& b, const Vec2& rep, bool up) {
  const bool right_a = a.x() >= rep.x(), right_b = b.x() >= rep.x();
  if (right_a == right_b) return 0;
  const double t = (rep.x() - a.x()) / (b.x() - a.x());
  const double y = a.y() + t * (b.y() - a.y());
  if (up ? y <= rep.y() : y >= rep.y()) return 0;
  return right_b ? 1 : -1;
}

std::vector<Vec2> path_polyline(const GlobalPath& path) {
  std::vector<Vec2> pts{path.start.position()};
  for (std::size_t i = 1; i + 1 < path.waypoints.size(); ++i) pts.push_back(path.waypoints[i].position());
  pts.push_back(path.goal.position());
  return pts;
}

}  // namespace

HomotopySignature homotopy_signature(const std::vector<Vec2>& polyline, const std::vector<Vec2>& representatives) {
  HomotopySignature sig(representatives.size(), 0);
  for (std::size_t r = 0; r < representatives.size(); ++r)
    for (std::size_t i = 0; i + 1 < polyline.size(); ++i)
      sig[r] += ray_crossing(polyline[i], polyline[i + 1], representatives[r], true);
  return sig;
}

HomotopySignature homotopy_signature(const GlobalPath& path, const std::vector<Vec2>& representatives) {
  return homotopy_signature(path_polyline(path), representatives);
}

namespace {

bool segment_free(const OccupancyGrid& grid, const Vec2& a, const Vec2& b) {
  for (const auto& c : trace_cells(grid.world_to_cell(a), grid.world_to_cell(b)))
    if (grid.lethal(c)) return false;
  return true;
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

struct Roadmap {
  std::vector<Vec2> nodes;
  std::vector<std::vector<std::pair<int, double>>> edges;
};

Roadmap build_roadmap(const OccupancyGrid& grid, const Vec2& start, const Vec2& goal, std::uint64_t seed,
                      const HomotopyOptions& opt) {
  Roadmap rm;
  rm.nodes = {start, goal};
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double sx = u(rng), sy = u(rng);
  const double wx = grid.width() * grid.resolution(), wy = grid.height() * grid.resolution();
  for (int i = 1; i <= opt.samples; ++i) {
    const double hx = std::fmod(halton(i, 2) + sx, 1.0), hy = std::fmod(halton(i, 3) + sy, 1.0);
    const Vec2 p = grid.origin().transform(Vec2(hx * wx, hy * wy));
    if (!grid.lethal_at(p)) rm.nodes.push_back(p);
  }
  const std::size_t n = rm.nodes.size();
  rm.edges.assign(n, {});
  std::set<std::pair<int, int>> made;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> near;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) near.emplace_back((rm.nodes[i] - rm.nodes[j]).squaredNorm(), static_cast<int>(j));
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(opt.neighbors), near.size());
    std::partial_sort(near.begin(), near.begin() + static_cast<long>(k), near.end());
    for (std::size_t q = 0; q < k; ++q) {
      const int a = static_cast<int>(i), b = near[q].second;
      const auto key = std::minmax(a, b);
      if (made.count(key)) continue;
      made.insert(key);
      if (!segment_free(grid, rm.nodes[a], rm.nodes[b])) continue;
      const double d = std::sqrt(near[q].first);
      rm.edges[a].emplace_back(b, d);
      rm.edges[b].emplace_back(a, d);
    }
  }
  for (auto& e : rm.edges) std::sort(e.begin(), e.end());
  return rm;
}

/// Dijkstra from node 0 to node 1 skipping edges that cross any blocked ray.
std::optional<std::vector<int>> shortest_route(const Roadmap& rm, const std::vector<std::pair<Vec2, bool>>& blocked) {
  const std::size_t n = rm.nodes.size();
  std::vector<double> dist(n, kInf);
  std::vector<int> parent(n, -1);
  using Entry = std::pair<double, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;
  dist[0] = 0.0;
  open.emplace(0.0, 0);
  while (!open.empty()) {
    const auto [d, u] = open.top();
    open.pop();
    if (d > dist[u]) continue;
    if (u == 1) break;
    for (const auto& [v, w] : rm.edges[u]) {
      bool crosses = false;
      for (const auto& [rep, up] : blocked)
        if (ray_crossing(rm.nodes[u], rm.nodes[v], rep, up) != 0) crosses = true;
      if (crosses) continue;
      if (d + w < dist[v] - 1e-12) {
        dist[v] = d + w;
        parent[v] = u;
        open.emplace(dist[v], v);
      }
    }
  }
  if (!std::isfinite(dist[1])) return std::nullopt;
  std::vector<int> route;
  for (int v = 1; v >= 0; v = parent[v]) route.push_back(v);
  std::reverse(route.begin(), route.end());
  return route;
}

double polyline_length(const std::vector<Vec2>& pts) {
  double l = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) l += (pts[i] - pts[i - 1]).norm();
  return l;
}

double point_polyline_distance(const Vec2& p, const std::vector<Vec2>& pts) {
  double best = kInf;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const Vec2 ab = pts[i + 1] - pts[i];
    const double t = ab.squaredNorm() > 0 ? std::clamp((p - pts[i]).dot(ab) / ab.squaredNorm(), 0.0, 1.0) : 0.0;
    best = std::min(best, (p - (pts[i] + t * ab)).norm());
  }
  return best;
}

/// Removes roadmap detours: keeps the farthest directly visible vertex.
std::vector<Vec2> shortcut(const OccupancyGrid& grid, const std::vector<Vec2>& pts) {
  if (pts.size() <= 2) return pts;
  std::vector<Vec2> out{pts.front()};
  std::size_t i = 0;
  while (i + 1 < pts.size()) {
    std::size_t j = pts.size() - 1;
    while (j > i + 1 && !segment_free(grid, pts[i], pts[j])) --j;
    out.push_back(pts[j]);
    i = j;
  }
  return out;
}

}  // namespace

std::vector<GlobalPath> enumerate_homotopy_candidates(const OccupancyGrid& grid, const Pose2D& start,
                                                      const Pose2D& goal, std::size_t k_max, std::uint64_t seed,
                                                      const HomotopyOptions& options) {
  if (grid.lethal_at(start.position())) throw Error(ErrorCode::StartOccupied, "start is inside the inflated layer");
  if (grid.lethal_at(goal.position())) throw Error(ErrorCode::GoalOccupied, "goal is inside the inflated layer");
  const auto reps = obstacle_representatives(grid);
  const Roadmap rm = build_roadmap(grid, start.position(), goal.position(), seed, options);

  const auto to_points = [&](const std::vector<int>& route) {
    std::vector<Vec2> pts;
    for (int v : route) pts.push_back(rm.nodes[v]);
    return pts;
  };
  const auto base = shortest_route(rm, {});
  if (!base) {
    // The roadmap may simply be too sparse; the grid search is exact.
    GlobalPath path = plan_global(grid, start, goal);
    return {path};
  }
  const std::vector<Vec2> base_pts = to_points(*base);

  // Obstacles near the unconstrained route decide the classes worth trying.
  std::vector<std::pair<double, std::size_t>> near;
  for (std::size_t r = 0; r < reps.size(); ++r) near.emplace_back(point_polyline_distance(reps[r], base_pts), r);
  std::sort(near.begin(), near.end());
  std::vector<std::size_t> chosen;
  for (const auto& [d, r] : near)
    if (chosen.size() < 4 && d < 3.0) chosen.push_back(r);

  struct Found {
    double length;
    std::vector<Vec2> pts;
    HomotopySignature sig;
  };
  std::vector<Found> found;
  const std::size_t combos = std::size_t{1} << chosen.size();
  for (std::size_t mask = 0; mask <= combos; ++mask) {
    std::vector<std::pair<Vec2, bool>> blocked;
    if (mask < combos)
      for (std::size_t b = 0; b < chosen.size(); ++b) blocked.emplace_back(reps[chosen[b]], ((mask >> b) & 1) != 0);
    const auto route = mask == combos ? base : shortest_route(rm, blocked);
    if (!route) continue;
    auto pts = shortcut(grid, to_points(*route));
    Found f{polyline_length(pts), pts, homotopy_signature(pts, reps)};
    found.push_back(std::move(f));
  }
  std::stable_sort(found.begin(), found.end(), [](const Found& a, const Found& b) { return a.length < b.length; });
  const double shortest = found.front().length;
  std::vector<GlobalPath> out;
  std::vector<HomotopySignature> sigs;
  for (const auto& f : found) {
    if (out.size() >= k_max) break;
    if (f.length > options.max_length_ratio * shortest + 1e-9) break;
    if (std::find(sigs.begin(), sigs.end(), f.sig) != sigs.end()) continue;
    sigs.push_back(f.sig);
    out.push_back(path_from_polyline(grid, start, goal, f.pts));
  }
  return out;
}

std::size_t select_best(const std::vector<OptimizedBand>& bands) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < bands.size(); ++i) {
    if (!bands[i].report.feasible) continue;
    if (!best || bands[i].report.total < bands[*best].report.total) best = i;
  }
  if (!best) throw Error(ErrorCode::AllInfeasible, "no feasible band among the candidates");
  return *best;
}

namespace {

OptimizedBand optimize_with_retries(const TimedElasticBand& init, const BandObjectives& objectives,
                                    const OccupancyGrid& grid, const std::vector<DiscObstacle>& discs) {
  OptimizedBand best = optimize_band(init, objectives, grid, discs);
  BandObjectives o = objectives;
  for (int attempt = 0; attempt < 2; ++attempt) {
    if (best.report.min_clearance >= objectives.min_obstacle_distance) break;
    o.weights.obstacle *= 10.0;
    try {
      OptimizedBand again = optimize_band(best.band, o, grid, discs);
      // Re-score under the caller's weights so candidates compare fairly.
      again.report = [&] {
        CostReport r = evaluate_band(again.band, objectives, grid, discs);
        r.iterations = best.report.iterations + again.report.iterations;
        r.history = again.report.history;
        return r;
      }();
      if (again.report.min_clearance > best.report.min_clearance) best = std::move(again);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Cancelled) throw;
      break;
    }
  }
  return best;
}

}  // namespace

RoutePlan plan_route(const OccupancyGrid& grid, const Pose2D& start, const Pose2D& goal,
                     const BandObjectives& objectives, const std::vector<DiscObstacle>& discs, std::uint64_t seed,
                     std::optional<Vec2> via) {
  std::vector<GlobalPath> paths;
  if (via) {
    if (grid.lethal_at(*via)) throw Error(ErrorCode::HintInfeasible, "via point is inside the inflated layer");
    const Vec2 d1 = *via - start.position();
    const Pose2D mid(via->x(), via->y(), std::atan2(d1.y(), d1.x()));
    const GlobalPath a = plan_global(grid, start, mid);
    const GlobalPath b = plan_global(grid, mid, goal);
    std::vector<Vec2> pts{start.position()};
    for (std::size_t i = 1; i < a.waypoints.size(); ++i) pts.push_back(a.waypoints[i].position());
    pts.back() = *via;
    for (std::size_t i = 1; i + 1 < b.waypoints.size(); ++i) pts.push_back(b.waypoints[i].position());
    pts.push_back(goal.position());
    paths.push_back(path_from_polyline(grid, start, goal, pts));
  } else {
    paths = enumerate_homotopy_candidates(grid, start, goal, 4, seed);
  }
  const auto reps = obstacle_representatives(grid);

  RoutePlan plan;
  std::vector<std::future<std::optional<OptimizedBand>>> jobs;
  for (const auto& p : paths) {
    jobs.push_back(std::async(std::launch::async, [&, p]() -> std::optional<OptimizedBand> {
      try {
        return optimize_with_retries(init_band(p, 0.8 * objectives.max_v), objectives, grid, discs);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::DivergedBand) return std::nullopt;
        throw;
      }
    }));
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    auto result = jobs[i].get();
    if (!result) continue;
    plan.signatures.push_back(homotopy_signature(paths[i], reps));
    plan.candidates.push_back(std::move(*result));
  }
  plan.best = select_best(plan.candidates);
  return plan;
}

// ---------------------------------------------------------------------------
// Dynamic obstacles and local replanning

std::vector<DiscObstacle> detect_dynamic_obstacles(const OccupancyGrid& static_grid, const LidarScan& scan,
                                                   const Pose2D& pose) {
  std::vector<std::vector<Vec2>> clusters;
  std::vector<Vec2> current;
  const auto flush = [&] {
    if (current.size() >= 3) clusters.push_back(current);
    current.clear();
  };
  const double explained = 2.5 * static_grid.resolution();
  for (std::size_t i = 0; i < scan.ranges.size(); ++i) {
    const double r = scan.ranges[i];
    if (!std::isfinite(r)) {
      flush();
      continue;
    }
    const double a = pose.theta + scan.bearing(i);
    const Vec2 p = pose.position() + r * Vec2(std::cos(a), std::sin(a));
    const Cell c = static_grid.world_to_cell(p);
    const bool known = static_grid.in_bounds(c) && static_grid.obstacle_distance(c) <= explained;
    if (known) {
      flush();
      continue;
    }
    if (!current.empty() && (p - current.back()).norm() > 0.15) flush();
    current.push_back(p);
  }
  flush();
  if (clusters.size() >= 2 && std::isfinite(scan.ranges.front()) && std::isfinite(scan.ranges.back())) {
    // The scan wraps around; merge a cluster split at the seam.
    auto& first = clusters.front();
    auto& last = clusters.back();
    if ((first.front() - last.back()).norm() <= 0.15) {
      last.insert(last.end(), first.begin(), first.end());
      clusters.erase(clusters.begin());
    }
  }

  std::vector<DiscObstacle> discs;
  for (const auto& pts : clusters) {
    Vec2 centroid = Vec2::Zero();
    for (const auto& p : pts) centroid += p;
    centroid /= static_cast<double>(pts.size());
    double chord = 0.0;
    for (const auto& p : pts)
      for (const auto& q : pts) chord = std::max(chord, (p - q).norm());
    // Algebraic circle fit: x^2 + y^2 + D x + E y + F = 0.
    Eigen::MatrixXd a(static_cast<Eigen::Index>(pts.size()), 3);
    Eigen::VectorXd b(static_cast<Eigen::Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Vec2 q = pts[i] - centroid;
      a.row(static_cast<Eigen::Index>(i)) << q.x(), q.y(), 1.0;
      b[static_cast<Eigen::Index>(i)] = -(q.x() * q.x() + q.y() * q.y());
    }
    const Eigen::Vector3d sol = a.colPivHouseholderQr().solve(b);
    Vec2 center = centroid + Vec2(-0.5 * sol[0], -0.5 * sol[1]);
    double radius = std::sqrt(std::max(0.0, 0.25 * (sol[0] * sol[0] + sol[1] * sol[1]) - sol[2]));
    const Vec2 away = (centroid - pose.position()).normalized();
    const bool plausible = std::isfinite(radius) && radius > 0.03 && radius < 1.0 &&
                           (center - pose.position()).norm() > (centroid - pose.position()).norm();
    if (!plausible) {
      radius = 0.5 * chord;
      center = centroid + away * radius;
    }
    radius = std::max(radius, 0.5 * chord) + 0.05;
    discs.push_back({center, radius});
  }
  return discs;
}

ReplanResult replan_local(const TimedElasticBand& band, const OccupancyGrid& static_grid, const LidarScan& scan,
                          const Pose2D& pose, double elapsed, const BandObjectives& objectives, std::uint64_t seed) {
  ReplanResult out;
  out.discs = detect_dynamic_obstacles(static_grid, scan, pose);
  OccupancyGrid local = static_grid;
  for (const auto& d : out.discs) local.stamp_disc(d.center, d.radius);

  // Remaining part of the band, re-anchored at the current pose.
  TimedElasticBand warm;
  warm.nodes.push_back({pose, 0.0});
  double t = 0.0;
  for (std::size_t i = 0; i + 1 < band.nodes.size(); ++i) {
    t += band.nodes[i].dt;
    if (t > elapsed + 1e-9) warm.nodes.push_back(band.nodes[i + 1]);
  }
  if (warm.nodes.size() < 2) warm.nodes.push_back(band.nodes.back());
  // The first kept segment now starts from the current pose.
  warm.nodes.front().dt = kBandDtMin;
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < band.nodes.size(); ++i) {
    if (acc + band.nodes[i].dt > elapsed + 1e-9) {
      warm.nodes.front().dt = std::max(acc + band.nodes[i].dt - elapsed, kBandDtMin);
      break;
    }
    acc += band.nodes[i].dt;
  }
  warm.nodes.back().dt = 0.0;

  BandObjectives moving = objectives;
  const VelocityCommand now = band.velocity_at(elapsed);
  moving.start_v = now.v;
  moving.start_omega = now.omega;

  // Static clearance is whatever the map allows; dynamic discs must be
  // cleared by the full margin.
  const auto disc_clearance = [&](const TimedElasticBand& b) {
    double worst = kInf;
    sample_band(b, [&](const Vec2& p) {
      for (const auto& d : out.discs) worst = std::min(worst, (p - d.center).norm() - d.radius - objectives.base_radius);
    });
    return worst;
  };
  const auto good = [&](const OptimizedBand& b) {
    return b.report.feasible && disc_clearance(b.band) >= objectives.min_obstacle_distance - 0.01;
  };
  // Nothing new in the way: the remaining band is still the optimum.
  if (disc_clearance(warm) >= objectives.min_obstacle_distance + kObstacleMargin &&
      band_feasible(warm, local, out.discs, objectives.base_radius)) {
    out.band.report = evaluate_band(warm, moving, local, out.discs);
    out.band.band = std::move(warm);
    return out;
  }
  try {
    OptimizedBand b = optimize_with_retries(warm, moving, local, out.discs);
    if (good(b)) {
      out.band = std::move(b);
      return out;
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DivergedBand) throw;
  }
  out.fell_back = true;
  try {
    RoutePlan plan = plan_route(local, pose, band.nodes.back().pose, moving, out.discs, seed);
    out.band = plan.chosen();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Cancelled) throw;
    throw Error(ErrorCode::AllInfeasible, std::string("local replanning failed: ") + e.what());
  }
  return out;
}

DriveResult drive_band(const Scenario& scenario, const OccupancyGrid& static_grid, TimedElasticBand band,
                       const BandObjectives& objectives, std::uint64_t seed, double replan_period, double timeout) {
  constexpr double kTick = 0.02;
  const int ticks_per_replan = std::max(1, static_cast<int>(std::lround(replan_period / kTick)));
  DriveResult out;
  Rng rng(seed);
  double t = 0.0, elapsed = 0.0;
  Pose2D pose = band.nodes.front().pose;
  out.trace.push_back({t, pose});
  for (int tick = 1; t < timeout; ++tick) {
    t += kTick;
    elapsed += kTick;
    pose = band.pose_at(elapsed);
    out.trace.push_back({t, pose});
    if (elapsed >= band.duration()) {
      out.reached = true;
      break;
    }
    if (tick % ticks_per_replan != 0) continue;
    const LidarScan scan = simulate_lidar(scenario.scene, pose, t, scenario.robot, scenario.noise, &rng);
    try {
      ReplanResult r = replan_local(band, static_grid, scan, pose, elapsed, objectives, seed);
      ++out.replans;
      out.fallbacks += r.fell_back ? 1 : 0;
      band = std::move(r.band.band);
      elapsed = 0.0;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AllInfeasible) throw;
      out.halted = true;
      break;
    }
  }
  out.final_band = std::move(band);
  return out;
}

nlohmann::json to_json(const TimedElasticBand& band, const CostReport& report, const HomotopySignature& signature) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : band.nodes)
    nodes.push_back({{"x", n.pose.x}, {"y", n.pose.y}, {"theta", n.pose.theta}, {"dT", n.dt}});
  return {{"nodes", nodes}, {"cost", report.total}, {"feasible", report.feasible}, {"signature", signature}};
}

}  // namespace mtend
