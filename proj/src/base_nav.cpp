#include "mtend/base_nav.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mtend/error.hpp"

namespace mtend {

Pose2D integrate_arc(const Pose2D& p, double v, double omega, double dt) {
  if (std::abs(omega) < 1e-6) {
    return {p.x + v * dt * std::cos(p.theta), p.y + v * dt * std::sin(p.theta), p.theta + omega * dt};
  }
  const double r = v / omega;
  const double th = p.theta + omega * dt;
  return {p.x + r * (std::sin(th) - std::sin(p.theta)), p.y - r * (std::cos(th) - std::cos(p.theta)), th};
}

BaseState step_base(const BaseState& state, const VelocityCommand& cmd, double dt, const RobotModel& robot) {
  if (!(dt > 0.0 && dt <= 0.1 + 1e-12)) throw Error(ErrorCode::OutOfRange, "base tick dt must be in (0, 0.1] s");
  const double max_alpha = robot.max_accel / (0.5 * robot.wheel_base);
  double v = std::clamp(cmd.v, -robot.max_v, robot.max_v);
  double w = std::clamp(cmd.omega, -robot.max_omega, robot.max_omega);
  v = std::clamp(v, state.v - robot.max_accel * dt, state.v + robot.max_accel * dt);
  w = std::clamp(w, state.omega - max_alpha * dt, state.omega + max_alpha * dt);
  BaseState next;
  next.truth = integrate_arc(state.truth, v, w, dt);
  next.v = v;
  next.omega = w;
  return next;
}

OdometryReading read_odometry(const BaseState& state, double dt, const NoiseConfig& noise, Rng& rng) {
  OdometryReading r{state.v * dt, state.omega * dt};
  if (state.v == 0.0 && state.omega == 0.0) return r;
  const double sd = noise.odom_distance_fraction * std::abs(r.dv);
  if (sd > 0.0) r.dv += std::normal_distribution<double>(0.0, sd)(rng);
  if (noise.odom_dtheta_std > 0.0) r.dtheta += std::normal_distribution<double>(0.0, noise.odom_dtheta_std)(rng);
  return r;
}

ImuReading read_imu(const BaseState& state, double /*dt*/, const NoiseConfig& noise, Rng& rng) {
  ImuReading r{state.omega + noise.imu_bias};
  if (noise.imu_rate_std > 0.0) r.yaw_rate += std::normal_distribution<double>(0.0, noise.imu_rate_std)(rng);
  return r;
}

EkfEstimate EkfEstimate::at(const Pose2D& pose, double variance) {
  EkfEstimate e;
  e.mean = pose;
  e.covariance = Mat3::Identity() * variance;
  e.imu_heading = pose.theta;
  return e;
}

namespace {

Mat3 symmetrize(const Mat3& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

EkfEstimate ekf_predict(const EkfEstimate& est, const OdometryReading& odom, const NoiseConfig& noise) {
  const double d = odom.dv, h = 0.5 * odom.dtheta;
  // sinc and its derivative, with series expansions near zero.
  const double s = std::abs(h) < 1e-6 ? 1.0 - h * h / 6.0 : std::sin(h) / h;
  const double ds = std::abs(h) < 1e-6 ? -h / 3.0 : (h * std::cos(h) - std::sin(h)) / (h * h);
  const double phi = est.mean.theta + h;
  const double c = std::cos(phi), sn = std::sin(phi);

  EkfEstimate out = est;
  out.mean = Pose2D(est.mean.x + d * s * c, est.mean.y + d * s * sn, est.mean.theta + odom.dtheta);

  Mat3 f = Mat3::Identity();
  f(0, 2) = -d * s * sn;
  f(1, 2) = d * s * c;
  Eigen::Matrix<double, 3, 2> g;
  g << s * c, 0.5 * d * (ds * c - s * sn),
       s * sn, 0.5 * d * (ds * sn + s * c),
       0.0, 1.0;
  const bool moving = odom.dv != 0.0 || odom.dtheta != 0.0;
  const double sd = noise.odom_distance_fraction * std::abs(d);
  const double sth = moving ? noise.odom_dtheta_std : 0.0;
  const Eigen::Matrix2d q = Eigen::Vector2d(sd * sd, sth * sth).asDiagonal();
  out.covariance = symmetrize(f * est.covariance * f.transpose() + g * q * g.transpose());
  return out;
}

EkfEstimate ekf_update_yaw(const EkfEstimate& est, double imu_yaw_rate, double dt, double r) {
  EkfEstimate out = est;
  out.imu_heading = normalize_angle(est.imu_heading + imu_yaw_rate * dt);
  if (!std::isfinite(r)) return out;
  const Eigen::RowVector3d hrow(0.0, 0.0, 1.0);
  const double innovation = normalize_angle(out.imu_heading - est.mean.theta);
  const double sv = est.covariance(2, 2) + r;
  if (!(sv > 0.0)) return out;
  const Eigen::Vector3d k = est.covariance.col(2) / sv;
  out.mean = Pose2D(est.mean.x + k[0] * innovation, est.mean.y + k[1] * innovation,
                    est.mean.theta + k[2] * innovation);
  const Mat3 ikh = Mat3::Identity() - k * hrow;
  out.covariance = symmetrize(ikh * est.covariance * ikh.transpose() + r * k * k.transpose());
  return out;
}

EkfEstimate ekf_update_yaw(const EkfEstimate& est, double imu_yaw_rate, double dt, const NoiseConfig& noise) {
  return ekf_update_yaw(est, imu_yaw_rate, dt, noise.ekf_yaw_variance);
}

LidarScan simulate_lidar(const Scene& scene, const Pose2D& pose, double t, const RobotModel& robot,
                         const NoiseConfig& noise, Rng* rng) {
  LidarScan scan;
  scan.timestamp = t;
  scan.ranges.assign(LidarScan::kBeams, LidarScan::kNoReturn);
  const Vec3 origin(pose.x, pose.y, robot.lidar_height);
  for (int i = 0; i < LidarScan::kBeams; ++i) {
    const double a = pose.theta + scan.bearing(i);
    const Vec3 dir(std::cos(a), std::sin(a), 0.0);
    const auto hit = raycast(scene, origin, dir, scan.max_range, t);
    if (!hit) continue;
    double range = hit->distance;
    if (rng && noise.lidar_range_std > 0.0)
      range += std::normal_distribution<double>(0.0, noise.lidar_range_std)(*rng);
    if (range <= 0.0 || range > scan.max_range) continue;
    scan.ranges[i] = range;
  }
  return scan;
}

// ---------------------------------------------------------------------------
// Occupancy grid

OccupancyGrid::OccupancyGrid(double resolution, const Pose2D& origin, int width, int height, double inflation_radius)
    : resolution_(resolution), origin_(origin), width_(width), height_(height), inflation_radius_(inflation_radius),
      log_odds_(static_cast<std::size_t>(width) * height, 0.0) {
  if (!(resolution > 0.0) || width <= 0 || height <= 0)
    throw Error(ErrorCode::Validation, "grid needs positive resolution and size");
  if (!(inflation_radius >= 0.0)) throw Error(ErrorCode::Validation, "inflation radius must be >= 0");
}

OccupancyGrid OccupancyGrid::covering(const FloorBounds& floor, double resolution, double inflation_radius) {
  const Vec2 size = floor.max - floor.min;
  return OccupancyGrid(resolution, Pose2D(floor.min.x(), floor.min.y(), 0.0),
                       static_cast<int>(std::ceil(size.x() / resolution - 1e-9)),
                       static_cast<int>(std::ceil(size.y() / resolution - 1e-9)), inflation_radius);
}

void OccupancyGrid::set_inflation_radius(double r) {
  inflation_radius_ = r;
  invalidate();
}

Cell OccupancyGrid::world_to_cell(const Vec2& p) const {
  const Vec2 local = origin_.inverse().transform(p);
  return {static_cast<int>(std::floor(local.y() / resolution_)), static_cast<int>(std::floor(local.x() / resolution_))};
}

Vec2 OccupancyGrid::cell_center(const Cell& c) const {
  return origin_.transform(Vec2((c.col + 0.5) * resolution_, (c.row + 0.5) * resolution_));
}

void OccupancyGrid::set_log_odds(const Cell& c, double value) {
  log_odds_[index(c)] = std::clamp(value, -kClamp, kClamp);
  invalidate();
}

void OccupancyGrid::add_log_odds(const Cell& c, double delta) {
  auto& l = log_odds_[index(c)];
  l = std::clamp(l + delta, -kClamp, kClamp);
  invalidate();
}

double OccupancyGrid::probability(const Cell& c) const {
  return 1.0 - 1.0 / (1.0 + std::exp(log_odds_[index(c)]));
}

CellState OccupancyGrid::state(const Cell& c) const {
  const double p = probability(c);
  if (p > kOccupiedProbability) return CellState::Occupied;
  if (p < kFreeProbability) return CellState::Free;
  return CellState::Unknown;
}

void OccupancyGrid::stamp_disc(const Vec2& center, double radius) {
  const Cell lo = world_to_cell(center - Vec2(radius, radius));
  const Cell hi = world_to_cell(center + Vec2(radius, radius));
  for (int r = std::min(lo.row, hi.row) - 1; r <= std::max(lo.row, hi.row) + 1; ++r)
    for (int c = std::min(lo.col, hi.col) - 1; c <= std::max(lo.col, hi.col) + 1; ++c) {
      const Cell cell{r, c};
      if (in_bounds(cell) && (cell_center(cell) - center).norm() <= radius) log_odds_[index(cell)] = kClamp;
    }
  invalidate();
}

void OccupancyGrid::invalidate() {
  if (layers_->ready || layers_.use_count() > 1) layers_ = std::make_shared<Layers>();
  ++version_;
}

std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& seeds, int width, int height) {
  constexpr double kInf = 1e20;
  std::vector<double> g(seeds.size());
  // Exact 1D lower-envelope transform applied along columns then rows.
  auto transform_1d = [](const std::vector<double>& f, std::vector<double>& d) {
    const int n = static_cast<int>(f.size());
    std::vector<int> v(n);
    std::vector<double> z(n + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
      double s;
      while (true) {
        s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
        if (s <= z[k] && k > 0) {
          --k;
          continue;
        }
        break;
      }
      if (s <= z[k]) {  // k == 0: replace the only parabola
        v[0] = q;
        z[0] = -kInf;
        z[1] = kInf;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
      while (z[k + 1] < q) ++k;
      d[q] = double(q - v[k]) * (q - v[k]) + f[v[k]];
    }
  };
  for (std::size_t i = 0; i < seeds.size(); ++i) g[i] = seeds[i] ? 0.0 : kInf;
  std::vector<double> f, d;
  f.resize(height);
  d.resize(height);
  for (int c = 0; c < width; ++c) {
    for (int r = 0; r < height; ++r) f[r] = g[static_cast<std::size_t>(r) * width + c];
    transform_1d(f, d);
    for (int r = 0; r < height; ++r) g[static_cast<std::size_t>(r) * width + c] = d[r];
  }
  f.resize(width);
  d.resize(width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) f[c] = g[static_cast<std::size_t>(r) * width + c];
    transform_1d(f, d);
    for (int c = 0; c < width; ++c) g[static_cast<std::size_t>(r) * width + c] = d[c] >= kInf / 2 ? kInf : d[c];
  }
  return g;
}

const OccupancyGrid::Layers& OccupancyGrid::layers() const {
  auto layers = layers_;
  std::call_once(layers->once, [&] {
    const std::size_t n = log_odds_.size();
    std::vector<std::uint8_t> occ(n), freecells(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double p = 1.0 - 1.0 / (1.0 + std::exp(log_odds_[i]));
      occ[i] = p > kOccupiedProbability;
      freecells[i] = !occ[i];
    }
    const auto d_occ = squared_distance_transform(occ, width_, height_);
    const auto d_free = squared_distance_transform(freecells, width_, height_);
    layers->dist_to_occupied.resize(n);
    layers->dist_to_free.resize(n);
    layers->lethal.resize(n);
    const double r_cells2 = (inflation_radius_ / resolution_) * (inflation_radius_ / resolution_);
    for (std::size_t i = 0; i < n; ++i) {
      layers->dist_to_occupied[i] = d_occ[i] >= 1e19 ? std::numeric_limits<double>::infinity() : std::sqrt(d_occ[i]) * resolution_;
      layers->dist_to_free[i] = d_free[i] >= 1e19 ? std::numeric_limits<double>::infinity() : std::sqrt(d_free[i]) * resolution_;
      layers->lethal[i] = d_occ[i] <= r_cells2 * (1.0 + 1e-12);
    }
    layers->ready = true;
  });
  return *layers;
}

bool OccupancyGrid::lethal(const Cell& c) const {
  if (!in_bounds(c)) return true;
  return layers().lethal[index(c)] != 0;
}

bool OccupancyGrid::lethal_at(const Vec2& p) const { return lethal(world_to_cell(p)); }

double OccupancyGrid::obstacle_distance(const Cell& c) const { return layers().dist_to_occupied[index(c)]; }

double OccupancyGrid::signed_distance(const Vec2& p) const {
  const auto& l = layers();
  const Vec2 local = origin_.inverse().transform(p) / resolution_ - Vec2(0.5, 0.5);
  const double fx = std::floor(local.x()), fy = std::floor(local.y());
  const double tx = local.x() - fx, ty = local.y() - fy;
  auto sample = [&](int r, int c) {
    r = std::clamp(r, 0, height_ - 1);
    c = std::clamp(c, 0, width_ - 1);
    const std::size_t i = static_cast<std::size_t>(r) * width_ + c;
    const double pos = std::min(l.dist_to_occupied[i], 1e6);
    const double neg = std::min(l.dist_to_free[i], 1e6);
    return pos > 0.0 ? pos : -neg;
  };
  const int c0 = static_cast<int>(fx), r0 = static_cast<int>(fy);
  const double v00 = sample(r0, c0), v01 = sample(r0, c0 + 1), v10 = sample(r0 + 1, c0), v11 = sample(r0 + 1, c0 + 1);
  return (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
}

std::vector<Cell> OccupancyGrid::occupied_cells() const {
  std::vector<Cell> out;
  for (int r = 0; r < height_; ++r)
    for (int c = 0; c < width_; ++c)
      if (occupied({r, c})) out.push_back({r, c});
  return out;
}

std::vector<Cell> trace_cells(const Cell& a, const Cell& b) {
  std::vector<Cell> out;
  int x0 = a.col, y0 = a.row;
  const int x1 = b.col, y1 = b.row;
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    out.push_back({y0, x0});
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
  return out;
}

OccupancyGrid update_map(const OccupancyGrid& grid, const LidarScan& scan, const Pose2D& est_pose, double pose_time) {
  if (std::abs(scan.timestamp - pose_time) > 0.02 + 1e-9)
    throw Error(ErrorCode::Validation, "scan and pose timestamps differ by more than one tick");
  OccupancyGrid out = grid;
  const Cell origin = out.world_to_cell(est_pose.position());
  std::set<Cell> hits, misses;
  for (std::size_t i = 0; i < scan.ranges.size(); ++i) {
    const double range = scan.ranges[i];
    const bool hit = std::isfinite(range);
    const double len = hit ? range : scan.max_range;
    const double a = est_pose.theta + scan.bearing(i);
    const Vec2 end = est_pose.position() + len * Vec2(std::cos(a), std::sin(a));
    const Cell end_cell = out.world_to_cell(end);
    const auto cells = trace_cells(origin, end_cell);
    for (std::size_t k = 0; k + 1 < cells.size(); ++k)
      if (out.in_bounds(cells[k])) misses.insert(cells[k]);
    if (hit) {
      if (out.in_bounds(end_cell)) hits.insert(end_cell);
    } else if (out.in_bounds(end_cell)) {
      misses.insert(end_cell);
    }
  }
  for (const auto& c : misses)
    if (!hits.count(c)) out.add_log_odds(c, OccupancyGrid::kMissLogOdds);
  for (const auto& c : hits) out.add_log_odds(c, OccupancyGrid::kHitLogOdds);
  return out;
}

BaseSimulator::BaseSimulator(const Scenario& scenario, std::uint64_t seed)
    : scenario_(&scenario), rng_(seed) {
  reset(scenario.start);
}

void BaseSimulator::reset(const Pose2D& pose) {
  state_ = BaseState{pose, 0.0, 0.0};
  est_ = EkfEstimate::at(pose);
  dead_reckoning_ = pose;
}

void BaseSimulator::stop() {
  state_.v = 0.0;
  state_.omega = 0.0;
}

void BaseSimulator::tick(const VelocityCommand& cmd) {
  state_ = step_base(state_, cmd, kTick, scenario_->robot);
  t_ += kTick;
  const auto odom = read_odometry(state_, kTick, scenario_->noise, rng_);
  const auto imu = read_imu(state_, kTick, scenario_->noise, rng_);
  est_ = ekf_update_yaw(ekf_predict(est_, odom, scenario_->noise), imu.yaw_rate, kTick, scenario_->noise);
  dead_reckoning_ = integrate_arc(dead_reckoning_, odom.dv, odom.dtheta, 1.0);
}

LidarScan BaseSimulator::scan() {
  return simulate_lidar(scenario_->scene, state_.truth, t_, scenario_->robot, scenario_->noise, &rng_);
}

nlohmann::json telemetry_frame(double t, const Pose2D& truth, const EkfEstimate& est, double v, double omega,
                               const LidarScan& scan, int downsample) {
  nlohmann::json ranges = nlohmann::json::array();
  for (std::size_t i = 0; i < scan.ranges.size(); i += std::max(1, downsample)) {
    if (std::isfinite(scan.ranges[i])) ranges.push_back(scan.ranges[i]);
    else ranges.push_back(nullptr);
  }
  return {{"t", t},
          {"truth_pose", to_json(truth)},
          {"est_pose", to_json(est.mean)},
          {"cov_diag", {est.covariance(0, 0), est.covariance(1, 1), est.covariance(2, 2)}},
          {"v", v},
          {"omega", omega},
          {"scan_downsampled", ranges}};
}

namespace {

double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

void rasterize_polygon(OccupancyGrid& grid, const Polygon& poly) {
  if (poly.empty()) return;
  Vec2 lo = poly.front(), hi = poly.front();
  for (const auto& v : poly) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const double half_diag = 0.5 * std::sqrt(2.0) * grid.resolution();
  const Cell a = grid.world_to_cell(lo - Vec2::Constant(half_diag));
  const Cell b = grid.world_to_cell(hi + Vec2::Constant(half_diag));
  for (int r = std::max(0, std::min(a.row, b.row)); r <= std::min(grid.height() - 1, std::max(a.row, b.row)); ++r)
    for (int c = std::max(0, std::min(a.col, b.col)); c <= std::min(grid.width() - 1, std::max(a.col, b.col)); ++c) {
      const Vec2 p = grid.cell_center({r, c});
      bool hit = poly.size() >= 3 && point_in_polygon(poly, p);
      for (std::size_t i = 0; !hit && i < poly.size(); ++i)
        hit = point_segment_distance(p, poly[i], poly[(i + 1) % poly.size()]) <= half_diag;
      if (hit) grid.set_log_odds({r, c}, OccupancyGrid::kClamp);
    }
}

}  // namespace

OccupancyGrid rasterize_scene(const Scene& scene, double resolution, double inflation_radius, double max_height) {
  OccupancyGrid grid = OccupancyGrid::covering(scene.floor_bounds, resolution, inflation_radius);
  for (int r = 0; r < grid.height(); ++r)
    for (int c = 0; c < grid.width(); ++c) grid.set_log_odds({r, c}, -OccupancyGrid::kClamp);
  for (const auto& poly : scene.static_obstacles) rasterize_polygon(grid, poly);
  const auto& mesh = scene.machine_mesh;
  for (const auto& tri : mesh.triangles) {
    const Vec3& a = mesh.vertices[tri[0]];
    const Vec3& b = mesh.vertices[tri[1]];
    const Vec3& c = mesh.vertices[tri[2]];
    // Skip what sits above the base and flat features lying on the floor.
    if (std::min({a.z(), b.z(), c.z()}) >= max_height || std::max({a.z(), b.z(), c.z()}) <= 0.02) continue;
    rasterize_polygon(grid, {a.head<2>(), b.head<2>(), c.head<2>()});
  }
  return grid;
}

}  // namespace mtend
