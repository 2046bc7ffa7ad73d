#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "idc/dynamics.hpp"

namespace idc {

/// Discrete model dx[k+1] = A dx[k] + B du[k], dy[k] = C dx[k] about the
/// equilibrium (x_e, u_e). The continuous Jacobians are kept alongside.
struct LinearModel {
  MatX A;
  MatX B;
  MatX C;
  MatX A_c;
  MatX B_c;
  SystemState x_e{4};
  ControlInput u_e{4};
  double dt = 0.05;
  std::vector<std::string> output_names;

  int n_states() const { return static_cast<int>(A.rows()); }
  int n_inputs() const { return static_cast<int>(B.cols()); }
  int n_outputs() const { return static_cast<int>(C.rows()); }
  int n_uavs() const { return x_e.n_uavs(); }
};

/// Component names of the state vector in storage order.
inline std::vector<std::string> state_names(int n_uavs) {
  std::vector<std::string> names;
  const char* xyz[3] = {"x", "y", "z"};
  const char* rpy[3] = {"roll", "pitch", "yaw"};
  auto push3 = [&](const std::string& base, const char* const* sfx) {
    for (int k = 0; k < 3; ++k) names.push_back(base + "_" + sfx[k]);
  };
  push3("r0", xyz);
  push3("v0", xyz);
  push3("theta0", rpy);
  push3("omega0", xyz);
  for (int i = 1; i <= n_uavs; ++i) {
    const std::string s = std::to_string(i);
    push3("q" + s, xyz);
    push3("Omega" + s, xyz);
    push3("theta" + s, rpy);
    push3("omega" + s, xyz);
    for (int k = 0; k < 4; ++k) names.push_back("aux" + s + "_" + std::to_string(k));
  }
  return names;
}

inline std::vector<std::string> input_names(int n_uavs) {
  std::vector<std::string> names;
  for (int i = 1; i <= n_uavs; ++i) {
    const std::string s = std::to_string(i);
    names.push_back("thrust" + s);
    names.push_back("tau" + s + "_x");
    names.push_back("tau" + s + "_y");
    names.push_back("tau" + s + "_z");
  }
  return names;
}

/// Expands a selection of state names into component indices. Accepts single
/// components ("r0_z", "q2_x"), three-vector groups ("r0", "theta0", "q3") and
/// "all".
inline std::vector<int> resolve_state_selection(const std::vector<std::string>& selection, int n_uavs) {
  const auto names = state_names(n_uavs);
  std::vector<int> idx;
  for (const auto& s : selection) {
    if (s == "all") {
      for (int k = 0; k < static_cast<int>(names.size()); ++k) idx.push_back(k);
      continue;
    }
    bool found = false;
    for (int k = 0; k < static_cast<int>(names.size()); ++k) {
      if (names[k] == s) {
        idx.push_back(k);
        found = true;
        break;
      }
    }
    if (found) continue;
    for (int k = 0; k < static_cast<int>(names.size()); ++k) {
      if (names[k].substr(0, names[k].rfind('_')) == s) {
        idx.push_back(k);
        found = true;
      }
    }
    if (!found) throw UnknownStateName("unknown state name '" + s + "'");
  }
  return idx;
}

/// Tracked output: payload position, payload attitude and every link direction.
inline std::vector<std::string> default_output_selection(int n_uavs) {
  std::vector<std::string> sel{"r0", "theta0"};
  for (int i = 1; i <= n_uavs; ++i) sel.push_back("q" + std::to_string(i));
  return sel;
}

inline MatX output_matrix(const std::vector<std::string>& selection, int n_uavs) {
  const auto idx = resolve_state_selection(selection, n_uavs);
  MatX C = MatX::Zero(static_cast<Eigen::Index>(idx.size()), SystemState::dimension(n_uavs));
  for (std::size_t r = 0; r < idx.size(); ++r) C(static_cast<Eigen::Index>(r), idx[r]) = 1.0;
  return C;
}

struct Jacobians {
  MatX A_c;
  MatX B_c;
};

inline constexpr double kStateStep = 1e-6;
inline constexpr double kThrustStep = 1e-4;
inline constexpr double kTorqueStep = 1e-6;
// Central differences of P^-1 Q carry roundoff near 1e-9; entries below this
// are exact zeros of the true Jacobian.
inline constexpr double kJacobianFlush = 1e-8;

/// Central finite-difference Jacobians of the nonlinear dynamics at an
/// equilibrium (residual must be below 1e-7).
inline Jacobians jacobians(const SystemParams& params, const SystemState& x_e, const ControlInput& u_e) {
  const int n = params.n_uavs();
  const double residual = dynamics(params, x_e, u_e).vector().cwiseAbs().maxCoeff();
  if (!(residual < 1e-7))
    throw NonEquilibriumPoint("linearization point has residual " + std::to_string(residual));
  const int nx = SystemState::dimension(n);
  const int nu = ControlInput::dimension(n);
  Jacobians J{MatX(nx, nx), MatX(nx, nu)};
  for (int j = 0; j < nx; ++j) {
    SystemState xp = x_e, xm = x_e;
    xp.vector()[j] += kStateStep;
    xm.vector()[j] -= kStateStep;
    J.A_c.col(j) = (dynamics(params, xp, u_e).vector() - dynamics(params, xm, u_e).vector()) / (2.0 * kStateStep);
  }
  for (int j = 0; j < nu; ++j) {
    const double h = (j % 4 == 0) ? kThrustStep : kTorqueStep;
    ControlInput up = u_e, um = u_e;
    up.vector()[j] += h;
    um.vector()[j] -= h;
    J.B_c.col(j) = (dynamics(params, x_e, up).vector() - dynamics(params, x_e, um).vector()) / (2.0 * h);
  }
  J.A_c = J.A_c.unaryExpr([](double v) { return std::abs(v) < kJacobianFlush ? 0.0 : v; });
  J.B_c = J.B_c.unaryExpr([](double v) { return std::abs(v) < kJacobianFlush ? 0.0 : v; });
  return J;
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
inline MatX expm(const MatX& M) {
  const double norm = M.cwiseAbs().rowwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const MatX S = M / std::ldexp(1.0, squarings);
  MatX result = MatX::Identity(M.rows(), M.cols());
  MatX term = result;
  for (int k = 1; k < 40; ++k) {
    term = term * S / static_cast<double>(k);
    result += term;
    if (term.cwiseAbs().maxCoeff() <= 1e-17 * result.cwiseAbs().maxCoeff()) break;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

struct DiscreteMatrices {
  MatX A;
  MatX B;
};

/// Zero-order-hold discretization via the augmented exponential
/// exp([[A_c, B_c], [0, 0]] dt) = [[A, B], [0, I]].
inline DiscreteMatrices discretize(const MatX& A_c, const MatX& B_c, double dt) {
  if (!(dt > 0.0)) throw InvalidArgument("discretize: dt must be positive");
  const Eigen::Index n = A_c.rows();
  const Eigen::Index m = B_c.cols();
  MatX M = MatX::Zero(n + m, n + m);
  M.topLeftCorner(n, n) = A_c * dt;
  M.topRightCorner(n, m) = B_c * dt;
  const MatX E = expm(M);
  return {E.topLeftCorner(n, n), E.topRightCorner(n, m)};
}

/// Linear model about the hover equilibrium at `r0`.
inline LinearModel linearize_model(const SystemParams& params, const Vec3& r0, double dt,
                                   const std::vector<std::string>& output_selection = {}) {
  const int n = params.n_uavs();
  const auto eq = equilibrium(params, r0);
  const auto jac = jacobians(params, eq.state, eq.input);
  const auto d = discretize(jac.A_c, jac.B_c, dt);
  const auto sel = output_selection.empty() ? default_output_selection(n) : output_selection;
  LinearModel model;
  model.A = d.A;
  model.B = d.B;
  model.A_c = jac.A_c;
  model.B_c = jac.B_c;
  model.C = output_matrix(sel, n);
  model.x_e = eq.state;
  model.u_e = eq.input;
  model.dt = dt;
  const auto names = state_names(n);
  for (int idx : resolve_state_selection(sel, n)) model.output_names.push_back(names[idx]);
  return model;
}

}  // namespace idc
