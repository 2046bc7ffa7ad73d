#pragma once

// Scenarios, the closed loop (plant at plant_dt, MPC plus safety filter at
// control_dt), metrics, ablation sweeps and log files.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "idc/ecbf.hpp"
#include "idc/hull.hpp"
#include "idc/linearize.hpp"
#include "idc/mpc.hpp"

namespace idc {

struct FigureEight {
  double amp_x = 6.0;
  double amp_y = 6.0;
  double omega = 0.5;
  double z = -5.0;
};

struct Waypoints {
  std::vector<std::pair<double, Vec3>> points;  // (t, position), increasing t
};

using Reference = std::variant<FigureEight, Waypoints>;

/// Desired payload position. The figure-eight holds z from t = 0; waypoints
/// are interpolated linearly and held outside their time span.
inline Vec3 reference_position(const Reference& ref, double t) {
  if (const auto* f = std::get_if<FigureEight>(&ref)) {
    const double s = std::sin(f->omega * t);
    const double c = std::cos(f->omega * t);
    return Vec3(f->amp_x * s, -f->amp_y * s * c, f->z);
  }
  const auto& pts = std::get<Waypoints>(ref).points;
  if (pts.empty()) throw InvalidArgument("reference_position: no waypoints");
  if (t <= pts.front().first) return pts.front().second;
  for (std::size_t k = 1; k < pts.size(); ++k)
    if (t <= pts[k].first) {
      const double a = (t - pts[k - 1].first) / (pts[k].first - pts[k - 1].first);
      return (1.0 - a) * pts[k - 1].second + a * pts[k].second;
    }
  return pts.back().second;
}

/// Output reference for one instant: the payload position, with every other
/// output at its equilibrium value (level attitude, vertical links).
inline VecX reference_output(const LinearModel& model, const Vec3& position) {
  VecX y = model.C * model.x_e.vector();
  const char* axes[3] = {"r0_x", "r0_y", "r0_z"};
  for (std::size_t r = 0; r < model.output_names.size(); ++r)
    for (int k = 0; k < 3; ++k)
      if (model.output_names[r] == axes[k]) y[static_cast<Eigen::Index>(r)] = position[k];
  return y;
}

/// Columns y'(t + j dt), j = 0 .. horizon - 1.
inline MatX reference_window(const LinearModel& model, const Reference& ref, double t, int horizon, double dt) {
  MatX W(model.n_outputs(), horizon);
  for (int j = 0; j < horizon; ++j) W.col(j) = reference_output(model, reference_position(ref, t + j * dt));
  return W;
}

struct NoiseConfig {
  double sigma_v = 0.0;  // m/s on v0
  double sigma_w = 0.0;  // rad/s on omega0
  std::uint64_t seed = 1;
};

struct MpcOverrides {
  std::optional<int> horizon;
  std::optional<double> position_weight;
  std::optional<double> attitude_weight;
  std::optional<double> yaw_weight;
  std::optional<double> link_weight;
  std::optional<double> input_weight;
  std::optional<double> attitude_bound_deg;
  std::optional<double> uav_tilt_bound_deg;
  std::optional<double> thrust_max_factor;
  std::optional<double> torque_max;
};

struct EcbfOverrides {
  std::optional<Vec2> poles;
  std::optional<double> q_obs;
  std::optional<double> sensing_range;
  std::optional<bool> use_obstacle_acceleration;
  std::optional<bool> sliding_contact;
};

struct Scenario {
  std::string name = "scenario";
  SystemParams params = SystemParams::reference();
  Vec3 payload_box = Vec3(0.5, 0.5, 0.25);
  double inflation = 0.35;
  Reference reference = FigureEight{};
  std::vector<Obstacle> obstacles;
  double duration = 40.0;
  double control_dt = 0.05;
  double plant_dt = 1e-3;
  Vec3 initial_position = Vec3::Zero();
  MpcOverrides mpc;
  EcbfOverrides ecbf;
  NoiseConfig noise;
  std::optional<double> controller_model_mass;  // payload mass assumed by the controller
  double metrics_after = 5.0;                   // transient excluded from tracking metrics

  int plant_substeps() const { return static_cast<int>(std::llround(control_dt / plant_dt)); }
  int control_steps() const { return static_cast<int>(std::llround(duration / control_dt)); }

  void validate() const {
    params.validate();
    if (!(duration >= 0.0) || !std::isfinite(duration)) throw InvalidArgument("Scenario: duration must be >= 0");
    if (!(plant_dt > 0.0 && plant_dt <= kMaxPlantStep)) throw InvalidArgument("Scenario: plant_dt must lie in (0, 0.02]");
    if (!(control_dt >= plant_dt)) throw InvalidArgument("Scenario: control_dt must be at least plant_dt");
    if (std::abs(plant_substeps() * plant_dt - control_dt) > 1e-9 * control_dt)
      throw InvalidArgument("Scenario: control_dt must be an integer multiple of plant_dt");
    if ((payload_box.array() < 0.0).any()) throw InvalidArgument("Scenario: payload box half-extents must be >= 0");
    if (!(inflation >= 0.0)) throw InvalidArgument("Scenario: inflation must be >= 0");
    if (!(noise.sigma_v >= 0.0 && noise.sigma_w >= 0.0)) throw InvalidArgument("Scenario: noise sigma must be >= 0");
    if (controller_model_mass && !(*controller_model_mass > 0.0))
      throw InvalidArgument("Scenario: controller model mass must be positive");
    if (const auto* w = std::get_if<Waypoints>(&reference)) {
      if (w->points.empty()) throw InvalidArgument("Scenario: waypoint list is empty");
      for (std::size_t k = 1; k < w->points.size(); ++k)
        if (!(w->points[k].first > w->points[k - 1].first))
          throw InvalidArgument("Scenario: waypoint times must increase");
    }
    for (const auto& o : obstacles) o.validate();
    if (mpc.horizon && *mpc.horizon < 1) throw InvalidArgument("Scenario: MPC horizon must be >= 1");
    if (ecbf.poles && !((*ecbf.poles)[0] < 0.0 && (*ecbf.poles)[1] < 0.0))
      throw InvalidArgument("Scenario: ECBF poles must be strictly negative");
    if (ecbf.q_obs && !(*ecbf.q_obs > 0.0)) throw InvalidArgument("Scenario: q_obs must be positive");
    if (ecbf.sensing_range && !(*ecbf.sensing_range > 0.0))
      throw InvalidArgument("Scenario: sensing range must be positive");
  }
};

/// Parameters of the model the controller is designed on.
inline SystemParams controller_params(const Scenario& s) {
  SystemParams p = s.params;
  if (s.controller_model_mass) p.payload_mass = *s.controller_model_mass;
  return p;
}

inline MpcConfig mpc_config(const Scenario& s, const LinearModel& model) {
  MpcConfig c = MpcConfig::defaults(model);
  const auto& o = s.mpc;
  if (o.horizon) c.horizon = *o.horizon;
  for (std::size_t k = 0; k < model.output_names.size(); ++k) {
    const std::string& name = model.output_names[k];
    const std::string base = name.substr(0, name.rfind('_'));
    const bool yaw = name.ends_with("_yaw");
    const auto e = static_cast<Eigen::Index>(k);
    if (base == "r0" && o.position_weight) c.Q(e, e) = *o.position_weight;
    if (base == "theta0" && !yaw && o.attitude_weight) c.Q(e, e) = *o.attitude_weight;
    if (base == "theta0" && yaw && o.yaw_weight) c.Q(e, e) = *o.yaw_weight;
    if (base[0] == 'q' && !name.ends_with("_z") && o.link_weight) c.Q(e, e) = *o.link_weight;
  }
  if (o.input_weight) c.R = *o.input_weight * MatX::Identity(model.n_inputs(), model.n_inputs());
  if (o.attitude_bound_deg) {
    const double a = deg2rad(*o.attitude_bound_deg);
    c.x_lb.head<3>().setConstant(-a);
    c.x_ub.head<3>().setConstant(a);
  }
  if (o.uav_tilt_bound_deg) {
    c.soft_lb.setConstant(-deg2rad(*o.uav_tilt_bound_deg));
    c.soft_ub.setConstant(deg2rad(*o.uav_tilt_bound_deg));
  }
  for (int i = 0; i < model.n_uavs(); ++i) {
    if (o.thrust_max_factor) c.u_ub[4 * i] = *o.thrust_max_factor * model.u_e.thrust(i);
    if (o.torque_max) {
      c.u_lb.segment<3>(4 * i + 1).setConstant(-*o.torque_max);
      c.u_ub.segment<3>(4 * i + 1).setConstant(*o.torque_max);
    }
  }
  return c;
}

inline EcbfConfig ecbf_config(const Scenario& s, const LinearModel& model, const MpcConfig& mpc) {
  EcbfConfig c = EcbfConfig::defaults(model);
  c.u_lb = mpc.u_lb;
  c.u_ub = mpc.u_ub;
  const auto& o = s.ecbf;
  if (o.poles) {
    c.pole1 = (*o.poles)[0];
    c.pole2 = (*o.poles)[1];
  }
  if (o.q_obs) c.Q_obs = *o.q_obs * MatX::Identity(model.n_inputs(), model.n_inputs());
  if (o.sensing_range) c.sensing_range = *o.sensing_range;
  if (o.use_obstacle_acceleration) c.use_obstacle_acceleration = *o.use_obstacle_acceleration;
  if (o.sliding_contact) c.sliding_contact = *o.sliding_contact;
  return c;
}

enum class RunStatus { completed, infeasible, unstable };

inline const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::infeasible: return "infeasible";
    case RunStatus::unstable: return "unstable";
  }
  return "?";
}

struct StepRecord {
  double t = 0.0;
  VecX state;             // true plant state at t
  Vec3 reference;         // desired payload position at t
  VecX u_bar;             // MPC input u_e + du_bar
  VecX u;                 // applied input u_e + du*
  std::vector<double> h;  // true barrier value per obstacle at t
  std::vector<double> h_dot;
  std::vector<bool> active;
  int mpc_iterations = 0;
  int filter_iterations = 0;
  double mpc_slack = 0.0;
  bool relaxed = false;
  double solve_ms = 0.0;
};

struct Metrics {
  double rms_position_error = 0.0;  // m, t >= metrics_after
  double max_position_error = 0.0;  // m, t >= metrics_after
  double max_abs_roll = 0.0;        // deg, whole run at plant resolution
  double max_abs_pitch = 0.0;
  double max_abs_yaw = 0.0;
  double max_tilt_after = 0.0;      // deg, max |roll|, |pitch| for t >= metrics_after
  std::vector<double> min_h;        // m^2 per obstacle, plant resolution
  std::vector<double> min_distance; // m, hull to obstacle center
  std::vector<double> min_h_time;
  std::vector<Vec3> deviation_at_min_h;  // r0 - reference at the closest approach
  double control_effort = 0.0;      // sum |u|_2 control_dt
  double mean_solve_ms = 0.0;
  double p99_solve_ms = 0.0;
  double max_solve_ms = 0.0;
  double max_filter_deviation = 0.0;  // max |du* - du_bar|_inf
  int soft_steps = 0;                 // steps with positive MPC slack
  int relaxed_steps = 0;              // steps where the filter relaxed the barrier rows
  int steps = 0;
  bool unstable = false;
  bool infeasible = false;
};

struct TrajectoryLog {
  std::vector<std::string> state_names;
  std::vector<std::string> input_names;
  int n_obstacles = 0;
  double control_dt = 0.05;
  std::vector<StepRecord> steps;
  Metrics metrics;
  RunStatus status = RunStatus::completed;
  std::string message;
};

namespace detail {

inline double hull_distance(const ConvexHull& hull, const Obstacle& ob, const Vec3& obstacle_pos, double z) {
  return ob.planar() ? closest_point_xy(hull, obstacle_pos.head<2>(), z).distance
                     : closest_point(hull, obstacle_pos).distance;
}

/// Upper bound on the distance from r0 to any hull vertex.
inline double hull_reach(const SystemParams& params, const SystemState& x, const Vec3& box, double inflation) {
  double reach = box.norm();
  for (const auto& r : uav_positions(params, x)) reach = std::max(reach, (r - x.r0()).norm() + inflation);
  return reach;
}

inline bool attitudes_ok(const SystemState& x, double limit) {
  if (!x.vector().allFinite()) return false;
  if (x.theta0().cwiseAbs().maxCoeff() > limit) return false;
  for (int i = 0; i < x.n_uavs(); ++i)
    if (x.uav_theta(i).cwiseAbs().maxCoeff() > limit) return false;
  return true;
}

inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()))) - 1;
  return v[std::min(k, v.size() - 1)];
}

}  // namespace detail

inline constexpr double kUnstableAttitude = deg2rad(30.0);

/// Runs the scenario. Tracking infeasibility or an attitude above 30 deg ends
/// the run early; the partial log carries the status.
inline TrajectoryLog run_closed_loop(const Scenario& scenario) {
  scenario.validate();
  const SystemParams& plant = scenario.params;
  const int n_uavs = plant.n_uavs();
  const auto model = linearize_model(controller_params(scenario), reference_position(scenario.reference, 0.0),
                                     scenario.control_dt);
  const MpcConfig mcfg = mpc_config(scenario, model);
  MpcController mpc(model, mcfg);
  SafetyFilter filter(ecbf_config(scenario, model, mcfg), model.u_e.vector());
  const EcbfConfig& ecfg = filter.config();
  const auto& obstacles = scenario.obstacles;
  const auto n_obs = obstacles.size();

  TrajectoryLog log;
  log.state_names = state_names(n_uavs);
  log.input_names = input_names(n_uavs);
  log.n_obstacles = static_cast<int>(n_obs);
  log.control_dt = scenario.control_dt;
  Metrics& M = log.metrics;
  M.min_h.assign(n_obs, std::numeric_limits<double>::infinity());
  M.min_distance.assign(n_obs, std::numeric_limits<double>::infinity());
  M.min_h_time.assign(n_obs, 0.0);
  M.deviation_at_min_h.assign(n_obs, Vec3::Zero());

  std::mt19937_64 rng(scenario.noise.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  SystemState x = equilibrium(plant, scenario.initial_position).state;
  const int steps = scenario.control_steps();
  const int sub = scenario.plant_substeps();
  std::vector<double> solve_ms;
  double se = 0.0;
  int ne = 0;

  // Exact h only when the bounding sphere could lower the running minimum.
  auto track_min_h = [&](const SystemState& s, double t, const ConvexHull* hull) {
    std::optional<ConvexHull> local;
    const double reach = detail::hull_reach(plant, s, scenario.payload_box, scenario.inflation);
    for (std::size_t o = 0; o < n_obs; ++o) {
      const Obstacle& ob = obstacles[o];
      const Vec3 p = obstacle_state(ob, t).position;
      const Vec3 rel = p - s.r0();
      const double lower = std::max(0.0, (ob.planar() ? planar_part(rel).norm() : rel.norm()) - reach);
      const double R = ob.effective_radius();
      if (lower * lower - R * R >= M.min_h[o]) continue;
      if (!hull && !local) local = build_hull(plant, s, scenario.payload_box, scenario.inflation);
      const double d = detail::hull_distance(hull ? *hull : *local, ob, p, s.r0().z());
      if (d * d - R * R < M.min_h[o]) {
        M.min_h[o] = d * d - R * R;
        M.min_distance[o] = d;
        M.min_h_time[o] = t;
        M.deviation_at_min_h[o] = s.r0() - reference_position(scenario.reference, t);
      }
    }
  };
  auto track_attitude = [&](const SystemState& s, double t) {
    const Vec3 a = s.theta0().cwiseAbs() * (180.0 / kPi);
    M.max_abs_roll = std::max(M.max_abs_roll, a[0]);
    M.max_abs_pitch = std::max(M.max_abs_pitch, a[1]);
    M.max_abs_yaw = std::max(M.max_abs_yaw, a[2]);
    if (t >= scenario.metrics_after - 1e-12) M.max_tilt_after = std::max({M.max_tilt_after, a[0], a[1]});
  };
  if (steps > 0) track_attitude(x, 0.0);

  for (int k = 0; k < steps; ++k) {
    const double t = k * scenario.control_dt;
    StepRecord rec;
    rec.t = t;
    rec.state = x.vector();
    rec.reference = reference_position(scenario.reference, t);
    if (t >= scenario.metrics_after - 1e-12) {
      const double e = (x.r0() - rec.reference).norm();
      se += e * e;
      ++ne;
      M.max_position_error = std::max(M.max_position_error, e);
    }

    SystemState measured = x;
    if (scenario.noise.sigma_v > 0.0)
      for (int j = 0; j < 3; ++j) measured.v0()[j] += scenario.noise.sigma_v * unit(rng);
    if (scenario.noise.sigma_w > 0.0)
      for (int j = 0; j < 3; ++j) measured.omega0()[j] += scenario.noise.sigma_w * unit(rng);
    const VecX dx = measured.vector() - model.x_e.vector();

    const auto t0 = std::chrono::steady_clock::now();
    MpcResult r;
    try {
      r = mpc.solve_tracking(dx, reference_window(model, scenario.reference, t, mcfg.horizon, scenario.control_dt));
    } catch (const QpInfeasible& e) {
      log.status = RunStatus::infeasible;
      log.message = "tracking QP infeasible at t = " + std::to_string(t) + ": " + e.what();
      break;
    }
    const ConvexHull hull = build_hull(plant, measured, scenario.payload_box, scenario.inflation);
    auto set = build_barrier_constraints(hull, obstacles, t, measured, model, dx, ecfg);
    const FilterResult f = filter.apply(r.du, set);
    rec.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    rec.u_bar = r.u;
    rec.u = model.u_e.vector() + f.du;
    rec.mpc_iterations = r.qp.iterations;
    rec.filter_iterations = f.iterations;
    rec.mpc_slack = r.slack;
    rec.relaxed = f.relaxed;
    rec.h.assign(n_obs, 0.0);
    rec.h_dot.assign(n_obs, std::numeric_limits<double>::quiet_NaN());
    rec.active.assign(n_obs, false);
    for (std::size_t o = 0; o < n_obs; ++o) {
      const Vec3 p = obstacle_state(obstacles[o], t).position;
      const double d = detail::hull_distance(hull, obstacles[o], p, x.r0().z());
      rec.h[o] = d * d - std::pow(obstacles[o].effective_radius(), 2);
    }
    for (const auto& row : set.rows) {
      rec.h_dot[static_cast<std::size_t>(row.obstacle)] = row.h_dot;
      rec.active[static_cast<std::size_t>(row.obstacle)] = row.active;
    }
    track_min_h(x, t, &hull);
    solve_ms.push_back(rec.solve_ms);
    M.control_effort += rec.u.norm() * scenario.control_dt;
    M.max_filter_deviation = std::max(M.max_filter_deviation, (f.du - r.du).cwiseAbs().maxCoeff());
    M.soft_steps += r.slack > 1e-9 ? 1 : 0;
    M.relaxed_steps += f.relaxed ? 1 : 0;
    log.steps.push_back(std::move(rec));

    const ControlInput u(n_uavs, log.steps.back().u);
    bool ok = true;
    for (int s = 1; s <= sub && ok; ++s) {
      try {
        x = step_rk4(plant, x, u, scenario.plant_dt);
      } catch (const GimbalLockProximity&) {
        ok = false;
        break;
      }
      ok = detail::attitudes_ok(x, kUnstableAttitude);
      if (!ok) break;
      const double ts = t + s * scenario.plant_dt;
      track_attitude(x, ts);
      if (s < sub) track_min_h(x, ts, nullptr);
    }
    if (!ok) {
      log.status = RunStatus::unstable;
      log.message = "attitude above 30 deg or non-finite state after t = " + std::to_string(t);
      break;
    }
  }

  M.steps = static_cast<int>(log.steps.size());
  M.rms_position_error = ne > 0 ? std::sqrt(se / ne) : 0.0;
  if (!solve_ms.empty()) {
    double sum = 0.0;
    for (double v : solve_ms) sum += v;
    M.mean_solve_ms = sum / static_cast<double>(solve_ms.size());
    M.p99_solve_ms = detail::percentile(solve_ms, 0.99);
    M.max_solve_ms = *std::max_element(solve_ms.begin(), solve_ms.end());
  }
  M.unstable = log.status == RunStatus::unstable;
  M.infeasible = log.status == RunStatus::infeasible;
  return log;
}

// ---------------------------------------------------------------- ablation

enum class SweepKind { noise, mass, margin };

inline SweepKind parse_sweep(const std::string& s) {
  if (s == "noise") return SweepKind::noise;
  if (s == "mass") return SweepKind::mass;
  if (s == "margin") return SweepKind::margin;
  throw InvalidArgument("unknown sweep '" + s + "' (expected noise, mass or margin)");
}

inline const char* to_string(SweepKind k) {
  switch (k) {
    case SweepKind::noise: return "noise";
    case SweepKind::mass: return "mass";
    case SweepKind::margin: return "margin";
  }
  return "?";
}

/// Scenario for one sweep point: noise sigma on v0 and omega0 (seed offset by
/// the point index), plant payload mass factor with the controller kept at
/// the base mass, or the safety margin of every obstacle.
inline Scenario sweep_scenario(const Scenario& base, SweepKind kind, double value, std::size_t index) {
  Scenario s = base;
  switch (kind) {
    case SweepKind::noise:
      if (!(value >= 0.0)) throw InvalidArgument("noise sweep: sigma must be >= 0");
      s.noise.sigma_v = value;
      s.noise.sigma_w = value;
      s.noise.seed = base.noise.seed + index;
      break;
    case SweepKind::mass:
      if (!(value > 0.0)) throw InvalidArgument("mass sweep: factor must be positive");
      s.controller_model_mass = base.controller_model_mass.value_or(base.params.payload_mass);
      s.params.payload_mass = base.params.payload_mass * value;
      break;
    case SweepKind::margin:
      if (!(value >= 0.0)) throw InvalidArgument("margin sweep: margin must be >= 0");
      for (auto& o : s.obstacles) o.margin = value;
      break;
  }
  return s;
}

struct AblationRow {
  double value = 0.0;
  RunStatus status = RunStatus::completed;
  Metrics metrics;
};

inline std::vector<AblationRow> run_ablation(const Scenario& base, SweepKind kind, const std::vector<double>& values) {
  if (values.empty()) throw InvalidArgument("run_ablation: no sweep values");
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < values.size(); ++k) {
    const auto log = run_closed_loop(sweep_scenario(base, kind, values[k], k));
    rows.push_back({values[k], log.status, log.metrics});
  }
  return rows;
}

// ---------------------------------------------------------------- scenario files

namespace detail {

using nlohmann::json;

inline Vec3 vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw InvalidArgument(std::string(what) + ": expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw InvalidArgument(std::string(what) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw InvalidArgument(std::string(what) + ": unknown key '" + key + "'");
  }
}

inline Mat3 inertia(const json& j, const char* what) {
  if (j.is_array() && j.size() == 3 && j[0].is_number()) return vec3(j, what).asDiagonal();
  if (j.is_array() && j.size() == 3) {
    Mat3 J;
    for (int r = 0; r < 3; ++r) J.row(r) = vec3(j[r], what).transpose();
    return J;
  }
  throw InvalidArgument(std::string(what) + ": expected a diagonal 3-vector or a 3x3 matrix");
}

inline SystemParams params_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() != "reference") throw InvalidArgument("params: unknown preset '" + j.get<std::string>() + "'");
    return SystemParams::reference();
  }
  check_keys(j, {"payload_mass", "payload_inertia", "gravity", "uavs"}, "params");
  SystemParams p = SystemParams::reference();
  if (j.contains("payload_mass")) p.payload_mass = j["payload_mass"].get<double>();
  if (j.contains("payload_inertia")) p.payload_inertia = inertia(j["payload_inertia"], "params.payload_inertia");
  if (j.contains("gravity")) p.gravity = j["gravity"].get<double>();
  if (j.contains("uavs")) {
    p.uavs.clear();
    for (const auto& u : j["uavs"]) {
      check_keys(u, {"mass", "inertia", "attachment", "link_length"}, "params.uavs[]");
      UavParams q;
      if (u.contains("mass")) q.mass = u["mass"].get<double>();
      if (u.contains("inertia")) q.inertia = inertia(u["inertia"], "params.uavs[].inertia");
      q.attachment = vec3(u.at("attachment"), "params.uavs[].attachment");
      if (u.contains("link_length")) q.link_length = u["link_length"].get<double>();
      p.uavs.push_back(q);
    }
  }
  return p;
}

inline Obstacle obstacle_from_json(const json& j) {
  check_keys(j, {"shape", "center", "axis", "radius", "margin", "motion"}, "obstacles[]");
  Obstacle o;
  const std::string shape = j.at("shape").get<std::string>();
  const double radius = j.at("radius").get<double>();
  if (shape == "sphere") {
    o.shape = Sphere{j.contains("center") ? vec3(j["center"], "obstacle center") : Vec3::Zero(), radius};
  } else if (shape == "cylinder") {
    const auto& a = j.at("axis");
    if (!a.is_array() || a.size() != 2) throw InvalidArgument("obstacle axis: expected a 2-vector");
    o.shape = CylinderZ{Vec2(a[0].get<double>(), a[1].get<double>()), radius};
  } else {
    throw InvalidArgument("obstacle shape must be 'sphere' or 'cylinder'");
  }
  o.margin = j.value("margin", 0.0);
  if (j.contains("motion")) {
    const auto& m = j["motion"];
    check_keys(m, {"type", "mean", "amplitude", "omega", "phase"}, "obstacle motion");
    const std::string type = m.at("type").get<std::string>();
    if (type == "harmonic") {
      o.motion = HarmonicOscillator{vec3(m.at("mean"), "motion mean"), vec3(m.at("amplitude"), "motion amplitude"),
                                    m.at("omega").get<double>(), m.value("phase", 0.0)};
    } else if (type != "static") {
      throw InvalidArgument("obstacle motion type must be 'static' or 'harmonic'");
    }
  }
  return o;
}

}  // namespace detail

/// Builds a scenario from a parsed `schema: 1` document. Missing keys keep
/// their defaults; unknown keys are rejected.
inline Scenario scenario_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::vec3;
  check_keys(j, {"schema", "name", "params", "payload_box", "inflation", "reference", "obstacles", "duration",
                 "control_dt", "plant_dt", "initial_position", "mpc", "ecbf", "noise", "controller_model_mass",
                 "metrics_after"},
             "scenario");
  if (!j.contains("schema") || j["schema"] != 1) throw InvalidArgument("scenario: expected 'schema': 1");
  Scenario s;
  try {
    s.name = j.value("name", s.name);
    if (j.contains("params")) s.params = detail::params_from_json(j["params"]);
    if (j.contains("payload_box")) s.payload_box = vec3(j["payload_box"], "payload_box");
    s.inflation = j.value("inflation", s.inflation);
    if (j.contains("reference")) {
      const auto& r = j["reference"];
      const std::string type = r.at("type").get<std::string>();
      if (type == "figure_eight") {
        check_keys(r, {"type", "amp_x", "amp_y", "omega", "z"}, "reference");
        FigureEight f;
        f.amp_x = r.value("amp_x", f.amp_x);
        f.amp_y = r.value("amp_y", f.amp_y);
        f.omega = r.value("omega", f.omega);
        f.z = r.value("z", f.z);
        s.reference = f;
      } else if (type == "waypoints") {
        check_keys(r, {"type", "points"}, "reference");
        Waypoints w;
        for (const auto& p : r.at("points")) {
          check_keys(p, {"t", "position"}, "reference.points[]");
          w.points.emplace_back(p.at("t").get<double>(), vec3(p.at("position"), "waypoint position"));
        }
        s.reference = w;
      } else {
        throw InvalidArgument("reference type must be 'figure_eight' or 'waypoints'");
      }
    }
    if (j.contains("obstacles"))
      for (const auto& o : j["obstacles"]) s.obstacles.push_back(detail::obstacle_from_json(o));
    s.duration = j.value("duration", s.duration);
    s.control_dt = j.value("control_dt", s.control_dt);
    s.plant_dt = j.value("plant_dt", s.plant_dt);
    if (j.contains("initial_position")) s.initial_position = vec3(j["initial_position"], "initial_position");
    if (j.contains("mpc")) {
      const auto& m = j["mpc"];
      check_keys(m, {"horizon", "position_weight", "attitude_weight", "yaw_weight", "link_weight", "input_weight",
                     "attitude_bound_deg", "uav_tilt_bound_deg", "thrust_max_factor", "torque_max"},
                 "mpc");
      auto opt = [&m](const char* key, std::optional<double>& out) {
        if (m.contains(key)) out = m[key].get<double>();
      };
      if (m.contains("horizon")) s.mpc.horizon = m["horizon"].get<int>();
      opt("position_weight", s.mpc.position_weight);
      opt("attitude_weight", s.mpc.attitude_weight);
      opt("yaw_weight", s.mpc.yaw_weight);
      opt("link_weight", s.mpc.link_weight);
      opt("input_weight", s.mpc.input_weight);
      opt("attitude_bound_deg", s.mpc.attitude_bound_deg);
      opt("uav_tilt_bound_deg", s.mpc.uav_tilt_bound_deg);
      opt("thrust_max_factor", s.mpc.thrust_max_factor);
      opt("torque_max", s.mpc.torque_max);
    }
    if (j.contains("ecbf")) {
      const auto& e = j["ecbf"];
      check_keys(e, {"poles", "q_obs", "sensing_range", "use_obstacle_acceleration", "sliding_contact"}, "ecbf");
      if (e.contains("poles")) {
        const auto& p = e["poles"];
        if (!p.is_array() || p.size() != 2) throw InvalidArgument("ecbf.poles: expected two numbers");
        s.ecbf.poles = Vec2(p[0].get<double>(), p[1].get<double>());
      }
      if (e.contains("q_obs")) s.ecbf.q_obs = e["q_obs"].get<double>();
      if (e.contains("sensing_range")) s.ecbf.sensing_range = e["sensing_range"].get<double>();
      if (e.contains("use_obstacle_acceleration"))
        s.ecbf.use_obstacle_acceleration = e["use_obstacle_acceleration"].get<bool>();
      if (e.contains("sliding_contact")) s.ecbf.sliding_contact = e["sliding_contact"].get<bool>();
    }
    if (j.contains("noise")) {
      const auto& n = j["noise"];
      check_keys(n, {"sigma_v", "sigma_w", "seed"}, "noise");
      s.noise.sigma_v = n.value("sigma_v", 0.0);
      s.noise.sigma_w = n.value("sigma_w", 0.0);
      s.noise.seed = n.value("seed", std::uint64_t{1});
    }
    if (j.contains("controller_model_mass") && !j["controller_model_mass"].is_null())
      s.controller_model_mass = j["controller_model_mass"].get<double>();
    s.metrics_after = j.value("metrics_after", s.metrics_after);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("scenario: ") + e.what());
  }
  s.validate();
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scenario file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("scenario " + path.string() + ": " + e.what());
  }
  return scenario_from_json(j);
}

// ---------------------------------------------------------------- logs

inline std::vector<std::string> csv_header(const TrajectoryLog& log) {
  std::vector<std::string> h{"t"};
  h.insert(h.end(), log.state_names.begin(), log.state_names.end());
  h.insert(h.end(), log.input_names.begin(), log.input_names.end());
  for (int o = 0; o < log.n_obstacles; ++o) h.push_back("h" + std::to_string(o));
  h.push_back("solve_ms");
  return h;
}

/// Flat key=value pairs of the run summary.
inline std::vector<std::pair<std::string, std::string>> metrics_pairs(const TrajectoryLog& log) {
  const Metrics& m = log.metrics;
  std::vector<std::pair<std::string, std::string>> kv;
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  };
  kv.emplace_back("status", to_string(log.status));
  kv.emplace_back("steps", std::to_string(m.steps));
  kv.emplace_back("rms_position_error", num(m.rms_position_error));
  kv.emplace_back("max_position_error", num(m.max_position_error));
  kv.emplace_back("max_abs_roll", num(m.max_abs_roll));
  kv.emplace_back("max_abs_pitch", num(m.max_abs_pitch));
  kv.emplace_back("max_abs_yaw", num(m.max_abs_yaw));
  kv.emplace_back("max_tilt_after", num(m.max_tilt_after));
  for (std::size_t o = 0; o < m.min_h.size(); ++o) {
    kv.emplace_back("min_h_" + std::to_string(o), num(m.min_h[o]));
    kv.emplace_back("min_distance_" + std::to_string(o), num(m.min_distance[o]));
    kv.emplace_back("min_h_time_" + std::to_string(o), num(m.min_h_time[o]));
  }
  kv.emplace_back("control_effort", num(m.control_effort));
  kv.emplace_back("mean_solve_ms", num(m.mean_solve_ms));
  kv.emplace_back("p99_solve_ms", num(m.p99_solve_ms));
  kv.emplace_back("max_solve_ms", num(m.max_solve_ms));
  kv.emplace_back("max_filter_deviation", num(m.max_filter_deviation));
  kv.emplace_back("soft_steps", std::to_string(m.soft_steps));
  kv.emplace_back("relaxed_steps", std::to_string(m.relaxed_steps));
  kv.emplace_back("unstable", m.unstable ? "1" : "0");
  kv.emplace_back("infeasible", m.infeasible ? "1" : "0");
  if (!log.message.empty()) kv.emplace_back("message", log.message);
  return kv;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << std::setprecision(17);
  return out;
}

inline void check_written(std::ofstream& out, const std::filesystem::path& p) {
  out.flush();
  if (!out) throw IoError("write failed for " + p.string());
}

}  // namespace detail

/// Writes trajectory.csv, metrics.txt and the plot-data files tracking.dat,
/// attitude.dat and barrier.dat into `dir`.
inline void write_log(const TrajectoryLog& log, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const auto csv_path = dir / "trajectory.csv";
  auto csv = detail::open_out(csv_path);
  const auto header = csv_header(log);
  for (std::size_t k = 0; k < header.size(); ++k) csv << (k ? "," : "") << header[k];
  csv << "\n";
  for (const auto& r : log.steps) {
    csv << r.t;
    for (Eigen::Index k = 0; k < r.state.size(); ++k) csv << "," << r.state[k];
    for (Eigen::Index k = 0; k < r.u.size(); ++k) csv << "," << r.u[k];
    for (double h : r.h) csv << "," << h;
    csv << "," << r.solve_ms << "\n";
  }
  detail::check_written(csv, csv_path);

  const auto metrics_path = dir / "metrics.txt";
  auto metrics = detail::open_out(metrics_path);
  for (const auto& [k, v] : metrics_pairs(log)) metrics << k << "=" << v << "\n";
  detail::check_written(metrics, metrics_path);

  const int th = SystemState::theta0_offset();
  const auto tracking_path = dir / "tracking.dat";
  auto tracking = detail::open_out(tracking_path);
  tracking << "# t x y z x_ref y_ref z_ref\n";
  for (const auto& r : log.steps)
    tracking << r.t << " " << r.state[0] << " " << r.state[1] << " " << r.state[2] << " " << r.reference.x() << " "
             << r.reference.y() << " " << r.reference.z() << "\n";
  detail::check_written(tracking, tracking_path);

  const auto attitude_path = dir / "attitude.dat";
  auto attitude = detail::open_out(attitude_path);
  attitude << "# t roll_deg pitch_deg yaw_deg\n";
  for (const auto& r : log.steps)
    attitude << r.t << " " << rad2deg(r.state[th]) << " " << rad2deg(r.state[th + 1]) << " "
             << rad2deg(r.state[th + 2]) << "\n";
  detail::check_written(attitude, attitude_path);

  const auto barrier_path = dir / "barrier.dat";
  auto barrier = detail::open_out(barrier_path);
  barrier << "# t";
  for (int o = 0; o < log.n_obstacles; ++o) barrier << " h" << o;
  barrier << "\n";
  for (const auto& r : log.steps) {
    barrier << r.t;
    for (double h : r.h) barrier << " " << h;
    barrier << "\n";
  }
  detail::check_written(barrier, barrier_path);
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + " is empty");
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ',');) t.header.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) {
      char* end = nullptr;
      row.push_back(std::strtod(cell.c_str(), &end));
      if (end == cell.c_str()) throw IoError(path.string() + ": bad number '" + cell + "'");
    }
    if (row.size() != t.header.size()) throw IoError(path.string() + ": row width differs from header");
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline void write_ablation(const std::vector<AblationRow>& rows, SweepKind kind, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  std::size_t n_obs = rows.empty() ? 0 : rows.front().metrics.min_h.size();
  out << to_string(kind)
      << ",status,rms_position_error,max_abs_roll,max_abs_pitch,max_abs_yaw,max_tilt_after,control_effort,"
         "mean_solve_ms,p99_solve_ms";
  for (std::size_t o = 0; o < n_obs; ++o) out << ",min_h_" << o << ",min_distance_" << o;
  out << "\n";
  for (const auto& r : rows) {
    const Metrics& m = r.metrics;
    out << r.value << "," << to_string(r.status) << "," << m.rms_position_error << "," << m.max_abs_roll << ","
        << m.max_abs_pitch << "," << m.max_abs_yaw << "," << m.max_tilt_after << "," << m.control_effort << ","
        << m.mean_solve_ms << "," << m.p99_solve_ms;
    for (std::size_t o = 0; o < n_obs; ++o) out << "," << m.min_h[o] << "," << m.min_distance[o];
    out << "\n";
  }
  detail::check_written(out, path);
}

}  // namespace idc
