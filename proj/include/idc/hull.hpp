#pragma once

// Convex hull around the payload and the UAVs, obstacle models and
// closest-point queries.
//
// The hull is kept as its vertex set together with the facet planes
// n'x <= d found by enumerating supporting planes through vertex triples.
// Closest points are projections onto {x : N x <= d}, solved by the QP
// module with an identity Hessian.

#include <algorithm>
#include <cmath>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/SVD>

#include "idc/dynamics.hpp"
#include "idc/qp.hpp"

namespace idc {

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.5;
};

/// Vertical pole of infinite extent along z.
struct CylinderZ {
  Vec2 axis_xy = Vec2::Zero();
  double radius = 0.5;
};

struct StaticMotion {};

/// x(t) = mean + amplitude sin(w t + phase).
struct HarmonicOscillator {
  Vec3 mean = Vec3::Zero();
  Vec3 amplitude = Vec3::Zero();
  double angular_frequency = 0.0;
  double phase = 0.0;
};

struct Obstacle {
  std::variant<Sphere, CylinderZ> shape;
  double margin = 0.0;
  std::variant<StaticMotion, HarmonicOscillator> motion;

  bool planar() const { return std::holds_alternative<CylinderZ>(shape); }

  double radius() const {
    return std::visit([](const auto& s) { return s.radius; }, shape);
  }

  double effective_radius() const { return radius() + margin; }

  void validate() const {
    if (!(radius() > 0.0)) throw InvalidArgument("Obstacle: radius must be positive");
    if (!(margin >= 0.0)) throw InvalidArgument("Obstacle: margin must be nonnegative");
  }
};

struct ObstacleState {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 acceleration = Vec3::Zero();
};

/// Obstacle position and its analytic derivatives at time t. A static
/// cylinder reports its axis at z = 0.
inline ObstacleState obstacle_state(const Obstacle& obstacle, double t) {
  ObstacleState s;
  if (const auto* h = std::get_if<HarmonicOscillator>(&obstacle.motion)) {
    const double w = h->angular_frequency;
    const double a = w * t + h->phase;
    s.position = h->mean + h->amplitude * std::sin(a);
    s.velocity = h->amplitude * (w * std::cos(a));
    s.acceleration = h->amplitude * (-w * w * std::sin(a));
    return s;
  }
  if (const auto* sp = std::get_if<Sphere>(&obstacle.shape)) {
    s.position = sp->center;
  } else {
    const auto& c = std::get<CylinderZ>(obstacle.shape);
    s.position = Vec3(c.axis_xy.x(), c.axis_xy.y(), 0.0);
  }
  return s;
}

struct Facet {
  Vec3 normal;  // unit, outward
  double offset;
};

class ConvexHull {
 public:
  ConvexHull() = default;

  /// Throws DegenerateHull when the points do not span three dimensions.
  explicit ConvexHull(std::vector<Vec3> points) : vertices_(std::move(points)) {
    if (vertices_.size() < 4) throw DegenerateHull("ConvexHull: need at least 4 points");
    const Vec3 lo = vertex_min();
    const Vec3 hi = vertex_max();
    scale_ = std::max(1.0, (hi - lo).norm());
    const double tol = 1e-9 * scale_;
    check_spans_3d(tol);
    const auto n = vertices_.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        for (std::size_t k = j + 1; k < n; ++k) {
          Vec3 nrm = (vertices_[j] - vertices_[i]).cross(vertices_[k] - vertices_[i]);
          const double len = nrm.norm();
          if (len < tol * scale_) continue;
          nrm /= len;
          double d = nrm.dot(vertices_[i]);
          double above = -kBig;
          double below = kBig;
          for (const auto& v : vertices_) {
            const double s = nrm.dot(v) - d;
            above = std::max(above, s);
            below = std::min(below, s);
          }
          if (above > tol && below < -tol) continue;
          if (above > tol) {
            nrm = -nrm;
            d = -d;
          }
          add_facet(nrm, d);
        }
  }

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Facet>& facets() const { return facets_; }

  /// max_f (n_f'p - d_f): zero on the boundary, negative inside, and a lower
  /// bound on the Euclidean distance outside.
  double signed_distance(const Vec3& p) const {
    double s = -kBig;
    for (const auto& f : facets_) s = std::max(s, f.normal.dot(p) - f.offset);
    return s;
  }

  bool contains(const Vec3& p, double tol = 1e-9) const { return signed_distance(p) <= tol * scale_; }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& v : vertices_) c += v;
    return c / static_cast<double>(vertices_.size());
  }

 private:
  static constexpr double kBig = 1e300;

  Vec3 vertex_min() const {
    Vec3 m = vertices_.front();
    for (const auto& v : vertices_) m = m.cwiseMin(v);
    return m;
  }
  Vec3 vertex_max() const {
    Vec3 m = vertices_.front();
    for (const auto& v : vertices_) m = m.cwiseMax(v);
    return m;
  }

  void check_spans_3d(double tol) const {
    const Vec3& a = vertices_.front();
    auto farthest = [&](auto dist) {
      double best = -1.0;
      Vec3 arg = a;
      for (const auto& v : vertices_) {
        const double d = dist(v);
        if (d > best) {
          best = d;
          arg = v;
        }
      }
      return std::make_pair(arg, best);
    };
    const auto [b, dab] = farthest([&](const Vec3& v) { return (v - a).norm(); });
    if (dab < tol) throw DegenerateHull("ConvexHull: points coincide");
    const Vec3 u = (b - a) / dab;
    const auto [c, dline] = farthest([&](const Vec3& v) { return ((v - a) - u * u.dot(v - a)).norm(); });
    if (dline < tol) throw DegenerateHull("ConvexHull: points are collinear");
    const Vec3 nrm = u.cross(c - a).normalized();
    const auto [e, dplane] = farthest([&](const Vec3& v) { return std::abs(nrm.dot(v - a)); });
    (void)e;
    if (dplane < tol) throw DegenerateHull("ConvexHull: points are coplanar");
  }

  void add_facet(const Vec3& nrm, double d) {
    for (const auto& f : facets_)
      if ((f.normal - nrm).cwiseAbs().maxCoeff() < 1e-9 && std::abs(f.offset - d) < 1e-9 * scale_) return;
    facets_.push_back({nrm, d});
  }

  std::vector<Vec3> vertices_;
  std::vector<Facet> facets_;
  double scale_ = 1.0;
};

/// Payload box corners placed by (r0, R0) plus every UAV position expanded
/// by an axis-aligned octahedron of circumradius `inflation`.
inline ConvexHull build_hull(const SystemParams& params, const SystemState& state, const Vec3& box_half_extents,
                             double inflation) {
  if (!(inflation >= 0.0)) throw InvalidArgument("build_hull: inflation must be nonnegative");
  if (!(box_half_extents.minCoeff() >= 0.0)) throw InvalidArgument("build_hull: box half-extents must be nonnegative");
  const Mat3 R0 = euler_to_rotation(state.theta0());
  const Vec3 r0 = state.r0();
  std::vector<Vec3> pts;
  for (int sx : {-1, 1})
    for (int sy : {-1, 1})
      for (int sz : {-1, 1})
        pts.push_back(r0 + R0 * box_half_extents.cwiseProduct(Vec3(sx, sy, sz)));
  for (const auto& r : uav_positions(params, state)) {
    if (inflation == 0.0) {
      pts.push_back(r);
      continue;
    }
    for (int k = 0; k < 3; ++k) {
      pts.push_back(r + inflation * Vec3::Unit(k));
      pts.push_back(r - inflation * Vec3::Unit(k));
    }
  }
  return ConvexHull(std::move(pts));
}

struct ClosestPoint {
  Vec3 point;
  double distance;
  Mat3 normal_projector = Mat3::Identity();  // onto the span of the active facet normals
};

/// Orthogonal projector onto the span of the given rows.
inline Mat3 span_projector(const std::vector<Vec3>& normals) {
  if (normals.empty()) return Mat3::Zero();
  Eigen::Matrix<double, 3, Eigen::Dynamic> N(3, static_cast<Eigen::Index>(normals.size()));
  for (std::size_t k = 0; k < normals.size(); ++k) N.col(static_cast<Eigen::Index>(k)) = normals[k];
  Eigen::JacobiSVD<Eigen::Matrix<double, 3, Eigen::Dynamic>> svd(N, Eigen::ComputeThinU);
  Mat3 P = Mat3::Zero();
  const double tol = 1e-9 * std::max(1.0, svd.singularValues()[0]);
  for (Eigen::Index k = 0; k < svd.singularValues().size(); ++k)
    if (svd.singularValues()[k] > tol) P += svd.matrixU().col(k) * svd.matrixU().col(k).transpose();
  return P;
}

/// Euclidean projection of p onto the hull.
inline ClosestPoint closest_point(const ConvexHull& hull, const Vec3& p) {
  const auto& facets = hull.facets();
  if (facets.empty()) throw DegenerateHull("closest_point: hull has no facets");
  if (hull.signed_distance(p) <= 0.0) return {p, 0.0, Mat3::Zero()};
  QpProblem qp;
  qp.H = MatX::Identity(3, 3);
  qp.g = -p;
  qp.A_ineq = MatX(static_cast<Eigen::Index>(facets.size()), 3);
  qp.b_ineq = VecX(static_cast<Eigen::Index>(facets.size()));
  for (std::size_t f = 0; f < facets.size(); ++f) {
    qp.A_ineq.row(static_cast<Eigen::Index>(f)) = facets[f].normal.transpose();
    qp.b_ineq[static_cast<Eigen::Index>(f)] = facets[f].offset;
  }
  QpSolver solver;
  const auto sol = solver.solve(qp);
  const Vec3 c = sol.z;
  std::vector<Vec3> active;
  for (int f : sol.active_set) active.push_back(facets[static_cast<std::size_t>(f)].normal);
  return {c, (c - p).norm(), span_projector(active)};
}

/// Counter-clockwise convex hull of points in the plane (monotone chain).
inline std::vector<Vec2> planar_hull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Vec2> h(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], p) <= 0.0) --k;
    h[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 2], h[k - 1], pts[i]) <= 0.0) --k;
    h[k++] = pts[i];
  }
  h.resize(k > 1 ? k - 1 : k);
  return h;
}

/// Closest point of the hull's xy footprint to a vertical axis. The returned
/// 3D point carries height `z`.
inline ClosestPoint closest_point_xy(const ConvexHull& hull, const Vec2& axis_xy, double z) {
  std::vector<Vec2> proj;
  proj.reserve(hull.vertices().size());
  for (const auto& v : hull.vertices()) proj.emplace_back(v.x(), v.y());
  const auto poly = planar_hull(std::move(proj));
  if (poly.size() < 3) throw DegenerateHull("closest_point_xy: footprint is degenerate");
  const auto n = static_cast<Eigen::Index>(poly.size());
  QpProblem qp;
  qp.H = MatX::Identity(2, 2);
  qp.g = -axis_xy;
  qp.A_ineq = MatX(n, 2);
  qp.b_ineq = VecX(n);
  bool inside = true;
  for (Eigen::Index e = 0; e < n; ++e) {
    const Vec2& a = poly[static_cast<std::size_t>(e)];
    const Vec2& b = poly[static_cast<std::size_t>((e + 1) % n)];
    const Vec2 nrm = Vec2(b.y() - a.y(), a.x() - b.x()).normalized();
    qp.A_ineq.row(e) = nrm.transpose();
    qp.b_ineq[e] = nrm.dot(a);
    if (nrm.dot(axis_xy) > qp.b_ineq[e]) inside = false;
  }
  if (inside) return {Vec3(axis_xy.x(), axis_xy.y(), z), 0.0, Mat3::Zero()};
  QpSolver solver;
  const auto sol = solver.solve(qp);
  const Vec2 c = sol.z;
  std::vector<Vec3> active;
  for (int e : sol.active_set) active.emplace_back(qp.A_ineq(e, 0), qp.A_ineq(e, 1), 0.0);
  return {Vec3(c.x(), c.y(), z), (c - axis_xy).norm(), span_projector(active)};
}

}  // namespace idc
