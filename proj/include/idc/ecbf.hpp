#pragma once

// Exponential control barrier functions of relative degree two and the
// minimal-deviation safety filter.
//
// For an obstacle at x_o with effective radius R_o and the hull point c
// closest to it, h = |c - x_o|^2 - R_o^2. Enforcing h'' >= -k1 h - k2 h'
// with the payload acceleration a0 + M_u du substituted for c'' gives one
// linear row in du per obstacle.

#include <cmath>
#include <optional>
#include <vector>

#include "idc/hull.hpp"
#include "idc/linearize.hpp"
#include "idc/qp.hpp"

namespace idc {

struct EcbfConfig {
  double pole1 = -1.5;
  double pole2 = -1.5;
  MatX Q_obs;  // m x m diagonal weight
  VecX u_lb;   // absolute input bounds
  VecX u_ub;
  double sensing_range = 15.0;
  double slack_weight = 1e6;
  bool use_obstacle_acceleration = false;
  bool sliding_contact = false;  // drop relative velocity along the active hull face

  /// K = [k1, k2] with s^2 + k2 s + k1 = (s - pole1)(s - pole2).
  Vec2 gains() const { return Vec2(pole1 * pole2, -(pole1 + pole2)); }

  /// Q_obs = I, thrust in [0, 2.5 F_e], torques in [-1, 1] N m.
  static EcbfConfig defaults(const LinearModel& model) {
    EcbfConfig c;
    const int m = model.n_inputs();
    c.Q_obs = MatX::Identity(m, m);
    c.u_lb.resize(m);
    c.u_ub.resize(m);
    for (int i = 0; i < model.n_uavs(); ++i) {
      c.u_lb.segment<4>(4 * i) << 0.0, -1.0, -1.0, -1.0;
      c.u_ub.segment<4>(4 * i) << 2.5 * model.u_e.thrust(i), 1.0, 1.0, 1.0;
    }
    return c;
  }

  void validate(int n_inputs) const {
    if (!(pole1 < 0.0 && pole2 < 0.0)) throw InvalidArgument("EcbfConfig: poles must be strictly negative");
    if (Q_obs.rows() != n_inputs || Q_obs.cols() != n_inputs)
      throw InvalidArgument("EcbfConfig: Q_obs must be m x m");
    if (!(Q_obs.diagonal().minCoeff() > 0.0) ||
        (Q_obs - MatX(Q_obs.diagonal().asDiagonal())).cwiseAbs().maxCoeff() != 0.0)
      throw InvalidArgument("EcbfConfig: Q_obs must be diagonal positive definite");
    if (u_lb.size() != n_inputs || u_ub.size() != n_inputs)
      throw InvalidArgument("EcbfConfig: input bounds must have m entries");
    if (!(sensing_range > 0.0)) throw InvalidArgument("EcbfConfig: sensing range must be positive");
    if (!(slack_weight > 0.0)) throw InvalidArgument("EcbfConfig: slack weight must be positive");
  }
};

inline Vec3 planar_part(const Vec3& v) { return Vec3(v.x(), v.y(), 0.0); }

/// h = |c - x_o|^2 - R_o^2, over x and y only when planar.
inline double barrier_value(const Vec3& c, const Vec3& obstacle_position, double R_o, bool planar) {
  if (!(R_o > 0.0)) throw InvalidArgument("barrier_value: radius must be positive");
  const Vec3 d = planar ? planar_part(c - obstacle_position) : Vec3(c - obstacle_position);
  return d.squaredNorm() - R_o * R_o;
}

struct BarrierDerivatives {
  double h = 0.0;
  double h_dot = 0.0;
  Vec3 accel_coeff = Vec3::Zero();  // h'' = accel_coeff . c'' + accel_const
  double accel_const = 0.0;
};

/// `normal_projector` projects the relative velocity w before the 2 |w|^2
/// term. Identity treats c as a material point; the projector onto the active
/// facet normals accounts for c sliding along the hull surface.
inline BarrierDerivatives barrier_derivatives(const Vec3& c, const Vec3& c_dot, const ObstacleState& obstacle,
                                              double R_o, bool planar,
                                              const Mat3& normal_projector = Mat3::Identity()) {
  auto flat = [planar](const Vec3& v) { return planar ? planar_part(v) : v; };
  const Vec3 d = flat(c - obstacle.position);
  const Vec3 w = flat(c_dot - obstacle.velocity);
  BarrierDerivatives b;
  b.h = barrier_value(c, obstacle.position, R_o, planar);
  b.h_dot = 2.0 * d.dot(w);
  b.accel_coeff = 2.0 * d;
  b.accel_const = -2.0 * d.dot(flat(obstacle.acceleration)) + 2.0 * (normal_projector * w).squaredNorm();
  return b;
}

struct PayloadAccelMap {
  Vec3 a0 = Vec3::Zero();
  MatX M_u;  // 3 x m
};

/// Payload acceleration c'' ~ a0 + M_u du from the v0' rows of the
/// continuous-time linearization (payload and inertial frames taken equal).
inline PayloadAccelMap payload_accel_map(const LinearModel& model, const VecX& dx) {
  if (dx.size() != model.n_states()) throw InvalidArgument("payload_accel_map: state deviation has wrong size");
  PayloadAccelMap map;
  const int r = SystemState::v0_offset();
  map.a0 = model.A_c.middleRows<3>(r) * dx;
  map.M_u = model.B_c.middleRows<3>(r);
  return map;
}

struct BarrierDiagnostics {
  int obstacle = 0;  // index into the obstacle list
  double h = 0.0;
  double h_dot = 0.0;
  Vec3 closest = Vec3::Zero();
  bool active = false;
};

struct BarrierConstraintSet {
  MatX A_obs;  // one row per obstacle in range
  VecX B_obs;
  std::vector<BarrierDiagnostics> rows;
};

/// Rows -(a . M_u) du <= a . a0 + const + k1 h + k2 h' for every obstacle
/// within the sensing range of the payload, with a = 2 (c - x_o) and the hull
/// moving at the payload velocity R0 v0.
inline BarrierConstraintSet build_barrier_constraints(const ConvexHull& hull, const std::vector<Obstacle>& obstacles,
                                                      double t, const SystemState& state, const LinearModel& model,
                                                      const VecX& dx, const EcbfConfig& config) {
  const Vec2 K = config.gains();
  const auto map = payload_accel_map(model, dx);
  const Vec3 c_dot = euler_to_rotation(state.theta0()) * state.v0();
  const Vec3 r0 = state.r0();
  BarrierConstraintSet set;
  std::vector<VecX> rows;
  std::vector<double> rhs;
  for (std::size_t k = 0; k < obstacles.size(); ++k) {
    const Obstacle& ob = obstacles[k];
    ObstacleState os = obstacle_state(ob, t);
    if (!config.use_obstacle_acceleration) os.acceleration.setZero();
    const Vec3 rel = os.position - r0;
    const double range = ob.planar() ? planar_part(rel).norm() : rel.norm();
    if (range > config.sensing_range) continue;
    const ClosestPoint cp = ob.planar() ? closest_point_xy(hull, os.position.head<2>(), r0.z())
                                        : closest_point(hull, os.position);
    const Vec3& c = cp.point;
    const auto b = barrier_derivatives(c, c_dot, os, ob.effective_radius(), ob.planar(),
                                       config.sliding_contact ? cp.normal_projector : Mat3::Identity());
    rows.push_back(-(b.accel_coeff.transpose() * map.M_u).transpose());
    rhs.push_back(b.accel_coeff.dot(map.a0) + b.accel_const + K[0] * b.h + K[1] * b.h_dot);
    set.rows.push_back({static_cast<int>(k), b.h, b.h_dot, c, false});
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  set.A_obs = MatX(n, model.n_inputs());
  set.B_obs = VecX(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    set.A_obs.row(r) = rows[static_cast<std::size_t>(r)].transpose();
    set.B_obs[r] = rhs[static_cast<std::size_t>(r)];
  }
  return set;
}

struct FilterResult {
  VecX du;
  bool relaxed = false;  // barrier rows softened by the slack fallback
  double slack = 0.0;
  int iterations = 0;
};

/// argmin 1/2 |du - du_bar|^2_Qobs subject to the barrier rows and the input
/// bounds du in [u_lb - u_e, u_ub - u_e].
class SafetyFilter {
 public:
  SafetyFilter(EcbfConfig config, VecX u_e) : config_(std::move(config)), u_e_(std::move(u_e)) {
    config_.validate(static_cast<int>(u_e_.size()));
  }

  const EcbfConfig& config() const { return config_; }

  /// Marks the barrier rows active at the returned input.
  FilterResult apply(const VecX& du_bar, BarrierConstraintSet& set) {
    const auto m = u_e_.size();
    if (du_bar.size() != m) throw InvalidArgument("SafetyFilter: input has wrong size");
    if (set.A_obs.cols() != m && set.A_obs.rows() > 0) throw InvalidArgument("SafetyFilter: A_obs has wrong width");
    const VecX lo = config_.u_lb - u_e_;
    const VecX hi = config_.u_ub - u_e_;
    FilterResult r;
    const VecX s_bar = set.A_obs * du_bar - set.B_obs;
    const bool passive = (du_bar.array() <= hi.array()).all() && (du_bar.array() >= lo.array()).all() &&
                         (set.A_obs.rows() == 0 || s_bar.maxCoeff() < -1e-9);
    if (passive) {
      r.du = du_bar;
      return r;
    }
    std::vector<std::pair<Eigen::Index, double>> bounds;  // signed input rows
    for (Eigen::Index k = 0; k < m; ++k) {
      if (std::isfinite(hi[k])) bounds.emplace_back(k, hi[k]);
      if (std::isfinite(lo[k])) bounds.emplace_back(-(k + 1), -lo[k]);
    }
    const auto nb = static_cast<Eigen::Index>(bounds.size());
    const auto no = set.A_obs.rows();
    QpProblem qp;
    qp.H = config_.Q_obs;
    qp.g = -(config_.Q_obs * du_bar);
    qp.A_ineq = MatX::Zero(no + nb, m);
    qp.b_ineq = VecX(no + nb);
    qp.A_ineq.topRows(no) = set.A_obs;
    qp.b_ineq.head(no) = set.B_obs;
    for (Eigen::Index k = 0; k < nb; ++k) {
      const auto [code, bound] = bounds[static_cast<std::size_t>(k)];
      qp.A_ineq(no + k, code >= 0 ? code : -code - 1) = code >= 0 ? 1.0 : -1.0;
      qp.b_ineq[no + k] = bound;
    }
    try {
      const auto sol = solver_.solve(qp);
      r.du = sol.z;
      r.iterations = sol.iterations;
    } catch (const QpInfeasible&) {
      // One shared slack s >= 0 on the barrier rows.
      QpProblem soft;
      soft.H = MatX::Zero(m + 1, m + 1);
      soft.H.topLeftCorner(m, m) = config_.Q_obs;
      soft.H(m, m) = 2.0 * config_.slack_weight;
      soft.g = VecX::Zero(m + 1);
      soft.g.head(m) = qp.g;
      soft.A_ineq = MatX::Zero(no + nb + 1, m + 1);
      soft.A_ineq.topLeftCorner(no + nb, m) = qp.A_ineq;
      soft.A_ineq.block(0, m, no, 1).setConstant(-1.0);
      soft.A_ineq(no + nb, m) = -1.0;
      soft.b_ineq = VecX::Zero(no + nb + 1);
      soft.b_ineq.head(no + nb) = qp.b_ineq;
      const auto sol = relaxed_solver_.solve(soft);
      r.du = sol.z.head(m);
      r.slack = std::max(0.0, sol.z[m]);
      r.relaxed = true;
      r.iterations = sol.iterations;
    }
    const VecX s = set.A_obs * r.du - set.B_obs;
    for (Eigen::Index k = 0; k < no; ++k)
      set.rows[static_cast<std::size_t>(k)].active = s[k] >= -1e-6 * (1.0 + std::abs(set.B_obs[k]));
    return r;
  }

 private:
  EcbfConfig config_;
  VecX u_e_;
  QpSolver solver_;
  QpSolver relaxed_solver_;
};

}  // namespace idc
