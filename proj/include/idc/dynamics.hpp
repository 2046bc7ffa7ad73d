#pragma once

// Rigid payload carried by N multirotors through rigid massless links.
//
// Frames are NED (z down, gravity along +k). The payload pose is (r0, R0),
// v0 and omega0 are expressed in the payload frame, q_i is the unit link
// direction in the payload frame pointing from UAV i toward the payload, and
// Omega_i is the inertial angular velocity of link i resolved in the payload
// frame. Thrust acts along -b3 of each UAV: F_i = -thrust_i * R_i * e3.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "idc/common.hpp"

namespace idc {

struct UavParams {
  double mass = 0.7;
  Mat3 inertia = Mat3::Identity() * 0.01;
  Vec3 attachment = Vec3::Zero();  // p_i, payload frame
  double link_length = 3.2;
};

struct SystemParams {
  double payload_mass = 3.1;
  Mat3 payload_inertia = Vec3(0.29, 0.29, 0.55).asDiagonal();
  std::vector<UavParams> uavs;
  double gravity = 9.81;

  int n_uavs() const { return static_cast<int>(uavs.size()); }

  double total_mass() const {
    double m = payload_mass;
    for (const auto& u : uavs) m += u.mass;
    return m;
  }

  /// Throws InvalidArgument unless masses and link lengths are positive,
  /// inertias are SPD and there are at least three UAVs.
  void validate() const {
    if (n_uavs() < 3) throw InvalidArgument("SystemParams: need at least 3 UAVs");
    if (!(payload_mass > 0.0)) throw InvalidArgument("SystemParams: payload mass must be positive");
    if (!(gravity > 0.0)) throw InvalidArgument("SystemParams: gravity must be positive");
    auto check_spd = [](const Mat3& J, const char* what) {
      if ((J - J.transpose()).cwiseAbs().maxCoeff() > 1e-12)
        throw InvalidArgument(std::string("SystemParams: ") + what + " inertia not symmetric");
      Eigen::SelfAdjointEigenSolver<Mat3> es(J);
      if (!(es.eigenvalues().minCoeff() > 0.0))
        throw InvalidArgument(std::string("SystemParams: ") + what + " inertia not positive definite");
    };
    check_spd(payload_inertia, "payload");
    for (const auto& u : uavs) {
      if (!(u.mass > 0.0)) throw InvalidArgument("SystemParams: UAV mass must be positive");
      if (!(u.link_length > 0.0)) throw InvalidArgument("SystemParams: link length must be positive");
      check_spd(u.inertia, "UAV");
    }
  }

  /// Reference four-UAV configuration (3.1 kg payload, 0.7 kg UAVs, 3.2 m links).
  static SystemParams reference() {
    SystemParams p;
    const Vec3 corners[4] = {{0.5, 0.5, -0.25}, {0.5, -0.5, -0.25}, {-0.5, -0.5, -0.25}, {-0.5, 0.5, -0.25}};
    for (const auto& c : corners) {
      UavParams u;
      u.attachment = c;
      p.uavs.push_back(u);
    }
    return p;
  }

  /// n UAVs attached on a regular polygon of circumradius `radius` at height
  /// `z_attach`, otherwise reference masses and inertias.
  static SystemParams symmetric(int n, double radius = 0.5 * std::sqrt(2.0), double z_attach = -0.25) {
    SystemParams p;
    for (int i = 0; i < n; ++i) {
      const double a = kPi / 4.0 - 2.0 * kPi * i / n;
      UavParams u;
      u.attachment = Vec3(radius * std::cos(a), radius * std::sin(a), z_attach);
      p.uavs.push_back(u);
    }
    return p;
  }
};

struct StateTag {};
struct DerivativeTag {};

/// Flat 12 + 16N vector with named views:
/// [r0 v0 Theta0 omega0 | q_i Omega_i Theta_i omega_i aux_i for each UAV].
/// The four aux_i entries per UAV are reserved and have zero dynamics.
template <class Tag>
class BasicState {
 public:
  static constexpr int kPayloadDim = 12;
  static constexpr int kUavDim = 16;

  static constexpr int dimension(int n_uavs) { return kPayloadDim + kUavDim * n_uavs; }

  static constexpr int r0_offset() { return 0; }
  static constexpr int v0_offset() { return 3; }
  static constexpr int theta0_offset() { return 6; }
  static constexpr int omega0_offset() { return 9; }
  static constexpr int link_dir_offset(int i) { return kPayloadDim + kUavDim * i; }
  static constexpr int link_rate_offset(int i) { return link_dir_offset(i) + 3; }
  static constexpr int uav_theta_offset(int i) { return link_dir_offset(i) + 6; }
  static constexpr int uav_omega_offset(int i) { return link_dir_offset(i) + 9; }

  explicit BasicState(int n_uavs = 4) : n_uavs_(n_uavs), x_(VecX::Zero(dimension(n_uavs))) {}

  BasicState(int n_uavs, VecX x) : n_uavs_(n_uavs), x_(std::move(x)) {
    if (x_.size() != dimension(n_uavs))
      throw InvalidArgument("state vector has size " + std::to_string(x_.size()) + ", expected " +
                            std::to_string(dimension(n_uavs)));
  }

  int n_uavs() const { return n_uavs_; }
  int size() const { return static_cast<int>(x_.size()); }

  const VecX& vector() const { return x_; }
  VecX& vector() { return x_; }

  auto r0() { return x_.template segment<3>(r0_offset()); }
  auto r0() const { return x_.template segment<3>(r0_offset()); }
  auto v0() { return x_.template segment<3>(v0_offset()); }
  auto v0() const { return x_.template segment<3>(v0_offset()); }
  auto theta0() { return x_.template segment<3>(theta0_offset()); }
  auto theta0() const { return x_.template segment<3>(theta0_offset()); }
  auto omega0() { return x_.template segment<3>(omega0_offset()); }
  auto omega0() const { return x_.template segment<3>(omega0_offset()); }

  auto link_dir(int i) { return x_.template segment<3>(link_dir_offset(i)); }
  auto link_dir(int i) const { return x_.template segment<3>(link_dir_offset(i)); }
  auto link_rate(int i) { return x_.template segment<3>(link_rate_offset(i)); }
  auto link_rate(int i) const { return x_.template segment<3>(link_rate_offset(i)); }
  auto uav_theta(int i) { return x_.template segment<3>(uav_theta_offset(i)); }
  auto uav_theta(int i) const { return x_.template segment<3>(uav_theta_offset(i)); }
  auto uav_omega(int i) { return x_.template segment<3>(uav_omega_offset(i)); }
  auto uav_omega(int i) const { return x_.template segment<3>(uav_omega_offset(i)); }

 private:
  int n_uavs_;
  VecX x_;
};

using SystemState = BasicState<StateTag>;
using StateDerivative = BasicState<DerivativeTag>;

/// Per-UAV [thrust, torque_x, torque_y, torque_z], 4N entries.
class ControlInput {
 public:
  static constexpr int dimension(int n_uavs) { return 4 * n_uavs; }

  explicit ControlInput(int n_uavs = 4) : n_uavs_(n_uavs), u_(VecX::Zero(dimension(n_uavs))) {}

  ControlInput(int n_uavs, VecX u) : n_uavs_(n_uavs), u_(std::move(u)) {
    if (u_.size() != dimension(n_uavs))
      throw InvalidArgument("input vector has size " + std::to_string(u_.size()) + ", expected " +
                            std::to_string(dimension(n_uavs)));
  }

  int n_uavs() const { return n_uavs_; }
  const VecX& vector() const { return u_; }
  VecX& vector() { return u_; }

  double& thrust(int i) { return u_[4 * i]; }
  double thrust(int i) const { return u_[4 * i]; }
  auto torque(int i) { return u_.segment<3>(4 * i + 1); }
  auto torque(int i) const { return u_.segment<3>(4 * i + 1); }

 private:
  int n_uavs_;
  VecX u_;
};

inline Mat3 hat(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return s;
}

/// ZYX Euler angles [roll, pitch, yaw] to the body-to-inertial rotation
/// Rz(yaw) * Ry(pitch) * Rx(roll).
inline Mat3 euler_to_rotation(const Vec3& theta) {
  return (Eigen::AngleAxisd(theta.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(theta.y(), Vec3::UnitY()) *
          Eigen::AngleAxisd(theta.x(), Vec3::UnitX()))
      .toRotationMatrix();
}

inline constexpr double kGimbalGuard = kPi / 2.0 - 0.01;

/// Euler angle rates for body angular velocity `omega` at attitude `theta`.
inline Vec3 euler_rates_from_body(const Vec3& theta, const Vec3& omega) {
  const double phi = theta.x();
  const double th = theta.y();
  if (!(std::abs(th) < kGimbalGuard))
    throw GimbalLockProximity("pitch " + std::to_string(th) + " rad is too close to +-pi/2");
  const double sp = std::sin(phi), cp = std::cos(phi);
  const double ct = std::cos(th), tt = std::tan(th);
  Mat3 e;
  e << 1.0, sp * tt, cp * tt,
       0.0, cp, -sp,
       0.0, sp / ct, cp / ct;
  return e * omega;
}

/// r_i = r0 + R0 (p_i - l_i q_i).
inline std::vector<Vec3> uav_positions(const SystemParams& params, const SystemState& state) {
  const Mat3 R0 = euler_to_rotation(state.theta0());
  std::vector<Vec3> out;
  out.reserve(params.uavs.size());
  for (int i = 0; i < params.n_uavs(); ++i) {
    const auto& u = params.uavs[i];
    out.emplace_back(state.r0() + R0 * (u.attachment - u.link_length * state.link_dir(i)));
  }
  return out;
}

/// Inertial UAV velocities, r_i' = R0 v0 + R0 (omega0 x p_i - l_i Omega_i x q_i).
inline std::vector<Vec3> uav_velocities(const SystemParams& params, const SystemState& state) {
  const Mat3 R0 = euler_to_rotation(state.theta0());
  std::vector<Vec3> out;
  out.reserve(params.uavs.size());
  const Vec3 w0 = state.omega0();
  for (int i = 0; i < params.n_uavs(); ++i) {
    const auto& u = params.uavs[i];
    const Vec3 q = state.link_dir(i);
    const Vec3 W = state.link_rate(i);
    out.emplace_back(R0 * (Vec3(state.v0()) + w0.cross(u.attachment) - u.link_length * W.cross(q)));
  }
  return out;
}

struct Energies {
  double kinetic = 0.0;
  double potential = 0.0;
  double total() const { return kinetic + potential; }
};

inline Energies energies(const SystemParams& params, const SystemState& state) {
  Energies e;
  const Vec3 k = Vec3::UnitZ();
  const Vec3 w0 = state.omega0();
  e.kinetic = 0.5 * params.payload_mass * state.v0().squaredNorm() + 0.5 * w0.dot(params.payload_inertia * w0);
  e.potential = -params.payload_mass * params.gravity * k.dot(state.r0());
  const auto pos = uav_positions(params, state);
  const auto vel = uav_velocities(params, state);
  for (int i = 0; i < params.n_uavs(); ++i) {
    const auto& u = params.uavs[i];
    const Vec3 wi = state.uav_omega(i);
    e.kinetic += 0.5 * u.mass * vel[i].squaredNorm() + 0.5 * wi.dot(u.inertia * wi);
    e.potential -= u.mass * params.gravity * k.dot(pos[i]);
  }
  return e;
}

/// Generalized mass matrix P of the velocity block (v0, omega0, Omega_1..N),
/// size (6+3N)^2. Symmetric, and positive definite for non-degenerate links.
inline MatX assemble_mass_matrix(const SystemParams& params, const SystemState& state) {
  const int n = params.n_uavs();
  MatX P = MatX::Zero(6 + 3 * n, 6 + 3 * n);
  Mat3 sum_mp = Mat3::Zero();
  Mat3 jbar = params.payload_inertia;
  for (int i = 0; i < n; ++i) {
    const auto& u = params.uavs[i];
    const Mat3 ph = hat(u.attachment);
    const Mat3 qh = hat(state.link_dir(i));
    const double ml = u.mass * u.link_length;
    sum_mp += u.mass * ph;
    jbar -= u.mass * ph * ph;
    const int c = 6 + 3 * i;
    P.block<3, 3>(0, c) = ml * qh;
    P.block<3, 3>(3, c) = ml * ph * qh;
    P.block<3, 3>(c, 0) = -ml * qh;
    P.block<3, 3>(c, 3) = ml * qh * ph;
    P.block<3, 3>(c, c) = ml * u.link_length * Mat3::Identity();
  }
  P.block<3, 3>(0, 0) = params.total_mass() * Mat3::Identity();
  P.block<3, 3>(0, 3) = -sum_mp;
  P.block<3, 3>(3, 0) = sum_mp;
  P.block<3, 3>(3, 3) = jbar;
  return P;
}

/// Inertial thrust vector of UAV i, F_i = -thrust * R_i e3.
inline Vec3 thrust_vector(const SystemState& state, const ControlInput& u, int i) {
  return -u.thrust(i) * euler_to_rotation(state.uav_theta(i)).col(2);
}

/// Right-hand side Q with P * (v0', omega0', Omega_i') = Q.
inline VecX assemble_forcing(const SystemParams& params, const SystemState& state, const ControlInput& u) {
  const int n = params.n_uavs();
  const double g = params.gravity;
  const Vec3 k = Vec3::UnitZ();
  const Mat3 R0 = euler_to_rotation(state.theta0());
  const Mat3 R0t = R0.transpose();
  const Vec3 v0 = state.v0();
  const Vec3 w0 = state.omega0();
  const Mat3 wh = hat(w0);
  const Mat3 wh2 = wh * wh;

  Mat3 jbar = params.payload_inertia;
  for (const auto& ui : params.uavs) jbar -= ui.mass * hat(ui.attachment) * hat(ui.attachment);

  VecX Q = VecX::Zero(6 + 3 * n);
  Vec3 qv = -params.total_mass() * wh * v0 + params.total_mass() * g * R0t * k;
  Vec3 qw = -wh * jbar * w0;
  for (int i = 0; i < n; ++i) {
    const auto& ui = params.uavs[i];
    const double m = ui.mass;
    const double l = ui.link_length;
    const Vec3& p = ui.attachment;
    const Mat3 ph = hat(p);
    const Vec3 q = state.link_dir(i);
    const Mat3 qh = hat(q);
    const Vec3 W = state.link_rate(i);
    const double w2 = W.squaredNorm();
    const Vec3 F = thrust_vector(state, u, i);
    const Vec3 load = R0t * (F + m * g * k);

    qv += -m * (wh2 * p + l * w2 * q + l * qh * wh * W) + R0t * F;
    qw += -m * (ph * wh * v0 + l * ph * qh * wh * W + l * w2 * ph * q) + ph * load;
    Q.segment<3>(6 + 3 * i) = m * l * (qh * wh2 * p - l * wh * W + qh * wh * v0) - l * qh * load;
  }
  Q.segment<3>(0) = qv;
  Q.segment<3>(3) = qw;
  return Q;
}

inline StateDerivative dynamics(const SystemParams& params, const SystemState& state, const ControlInput& u) {
  const int n = params.n_uavs();
  StateDerivative d(n);
  const Mat3 R0 = euler_to_rotation(state.theta0());
  const Vec3 w0 = state.omega0();

  d.r0() = R0 * state.v0();
  d.theta0() = euler_rates_from_body(state.theta0(), w0);
  for (int i = 0; i < n; ++i) {
    d.link_dir(i) = (Vec3(state.link_rate(i)) - w0).cross(Vec3(state.link_dir(i)));
    d.uav_theta(i) = euler_rates_from_body(state.uav_theta(i), state.uav_omega(i));
    const Mat3& J = params.uavs[i].inertia;
    const Vec3 wi = state.uav_omega(i);
    d.uav_omega(i) = J.ldlt().solve(Vec3(u.torque(i)) - wi.cross(J * wi));
  }

  const MatX P = assemble_mass_matrix(params, state);
  const Eigen::PartialPivLU<MatX> lu(P);
  const auto pivots = lu.matrixLU().diagonal().cwiseAbs();
  if (!(pivots.minCoeff() > 1e-12 * pivots.maxCoeff()) || !(lu.rcond() > 1e-13))
    throw SingularMassMatrix("mass matrix is singular");
  const VecX xb = lu.solve(assemble_forcing(params, state, u));
  d.v0() = xb.segment<3>(0);
  d.omega0() = xb.segment<3>(3);
  for (int i = 0; i < n; ++i) d.link_rate(i) = xb.segment<3>(6 + 3 * i);
  return d;
}

struct Equilibrium {
  SystemState state;
  ControlInput input;
};

/// Hover with vertical links, level attitudes and thrust (m_i + m0/N) g each.
/// Exact when the payload centre of mass lies under the centroid of the
/// attachment points.
inline Equilibrium equilibrium(const SystemParams& params, const Vec3& r0) {
  const int n = params.n_uavs();
  Equilibrium eq{SystemState(n), ControlInput(n)};
  eq.state.r0() = r0;
  for (int i = 0; i < n; ++i) {
    eq.state.link_dir(i) = Vec3::UnitZ();
    eq.input.thrust(i) = (params.uavs[i].mass + params.payload_mass / n) * params.gravity;
  }
  return eq;
}

/// Renormalizes each link direction and removes the component of the link
/// rate along it.
inline void project_link_constraints(SystemState& state) {
  for (int i = 0; i < state.n_uavs(); ++i) {
    Vec3 q = state.link_dir(i);
    q.normalize();
    Vec3 W = state.link_rate(i);
    W -= q.dot(W) * q;
    state.link_dir(i) = q;
    state.link_rate(i) = W;
  }
}

inline constexpr double kMaxPlantStep = 0.02;

/// One classical RK4 step followed by link-constraint projection.
inline SystemState step_rk4(const SystemParams& params, const SystemState& state, const ControlInput& u, double dt) {
  if (!(dt > 0.0 && dt <= kMaxPlantStep)) throw InvalidArgument("step_rk4: dt must lie in (0, 0.02]");
  const int n = state.n_uavs();
  auto f = [&](const VecX& x) { return dynamics(params, SystemState(n, x), u).vector(); };
  const VecX& x = state.vector();
  const VecX k1 = f(x);
  const VecX k2 = f(x + 0.5 * dt * k1);
  const VecX k3 = f(x + 0.5 * dt * k2);
  const VecX k4 = f(x + dt * k3);
  SystemState next(n, x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
  project_link_constraints(next);
  return next;
}

}  // namespace idc
