#pragma once

// Condensed linear MPC about the hover equilibrium.
//
// Predicted deviations over the horizon are X = F dx + H dU with
// F = [I; A; ...; A^(Np-1)] and H block lower triangular with zero diagonal
// blocks. The terminal state dx[Np] = A^Np dx + G dU carries the DARE weight.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "idc/linearize.hpp"
#include "idc/qp.hpp"

namespace idc {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct MpcConfig {
  int horizon = 20;
  MatX Q;    // p x p output weight
  MatX R;    // m x m input weight
  MatX Q_f;  // n x n terminal weight; empty means solve the DARE
  VecX W;    // n diagonal stage weight on the state deviation
  std::vector<std::string> constrained_states;  // rows of c_z, hard
  VecX x_lb;  // absolute bounds on c_z x, +-inf for none
  VecX x_ub;
  std::vector<std::string> soft_states;  // relaxed by one shared slack
  VecX soft_lb;
  VecX soft_ub;
  double slack_weight = 1e6;
  VecX u_lb;  // absolute input bounds
  VecX u_ub;

  /// Output weights: payload position 30, payload roll/pitch 100, yaw 1000,
  /// link direction x/y 1 and z 0 (the z entry of a unit link is not
  /// controllable to first order). State weights: link rate x/y 30, UAV
  /// roll/pitch 1, UAV yaw 100, UAV body rates 0.01. R = 0.1 I; thrust in
  /// [0, 2.5 F_e], torques in [-1, 1] N m; payload attitude within 5 deg and
  /// payload z <= 0 (hard); UAV roll/pitch within 20 deg (soft).
  static MpcConfig defaults(const LinearModel& model) {
    MpcConfig c;
    const int p = model.n_outputs();
    const int m = model.n_inputs();
    const int N = model.n_uavs();
    VecX q(p);
    for (int k = 0; k < p; ++k) {
      const std::string& name = model.output_names[static_cast<std::size_t>(k)];
      const std::string base = name.substr(0, name.rfind('_'));
      const std::string comp = name.substr(name.rfind('_') + 1);
      if (base == "r0") q[k] = 30.0;
      else if (base == "theta0") q[k] = comp == "yaw" ? 1000.0 : 100.0;
      else if (base[0] == 'q') q[k] = comp == "z" ? 0.0 : 1.0;
      else q[k] = 1.0;
    }
    c.Q = q.asDiagonal();
    c.R = 0.1 * MatX::Identity(m, m);
    c.W = VecX::Zero(model.n_states());
    for (int i = 0; i < N; ++i) {
      c.W.segment<2>(SystemState::link_rate_offset(i)).setConstant(30.0);
      c.W.segment<3>(SystemState::uav_theta_offset(i)) << 1.0, 1.0, 100.0;
      c.W.segment<3>(SystemState::uav_omega_offset(i)).setConstant(0.01);
    }
    c.u_lb.resize(m);
    c.u_ub.resize(m);
    for (int i = 0; i < N; ++i) {
      c.u_lb.segment<4>(4 * i) << 0.0, -1.0, -1.0, -1.0;
      c.u_ub.segment<4>(4 * i) << 2.5 * model.u_e.thrust(i), 1.0, 1.0, 1.0;
    }
    const double a = deg2rad(5.0);
    c.constrained_states = {"theta0_roll", "theta0_pitch", "theta0_yaw", "r0_z"};
    c.x_lb = VecX(4);
    c.x_ub = VecX(4);
    c.x_lb << -a, -a, -a, -kInf;
    c.x_ub << a, a, a, 0.0;
    const double b = deg2rad(20.0);
    for (int i = 1; i <= N; ++i)
      for (const char* comp : {"_roll", "_pitch"}) c.soft_states.push_back("theta" + std::to_string(i) + comp);
    c.soft_lb = VecX::Constant(2 * N, -b);
    c.soft_ub = VecX::Constant(2 * N, b);
    return c;
  }

  void validate(const LinearModel& model) const {
    const int p = model.n_outputs();
    const int m = model.n_inputs();
    const int n = model.n_states();
    if (horizon < 1) throw InvalidArgument("MpcConfig: horizon must be at least 1");
    if (Q.rows() != p || Q.cols() != p) throw InvalidArgument("MpcConfig: Q must be p x p");
    if (R.rows() != m || R.cols() != m) throw InvalidArgument("MpcConfig: R must be m x m");
    if (Q_f.size() != 0 && (Q_f.rows() != n || Q_f.cols() != n))
      throw InvalidArgument("MpcConfig: Q_f must be n x n");
    if (W.size() != 0 && (W.size() != n || W.minCoeff() < 0.0))
      throw InvalidArgument("MpcConfig: W must be a nonnegative n-vector");
    const Eigen::SelfAdjointEigenSolver<MatX> eq(0.5 * (Q + Q.transpose()));
    if (eq.eigenvalues().minCoeff() < -1e-12) throw InvalidArgument("MpcConfig: Q must be PSD");
    const Eigen::SelfAdjointEigenSolver<MatX> er(0.5 * (R + R.transpose()));
    if (!(er.eigenvalues().minCoeff() > 0.0)) throw InvalidArgument("MpcConfig: R must be PD");
    if (u_lb.size() != m || u_ub.size() != m) throw InvalidArgument("MpcConfig: input bounds must have m entries");
    for (int k = 0; k < m; ++k)
      if (!(u_lb[k] < model.u_e.vector()[k] && model.u_e.vector()[k] < u_ub[k]))
        throw InvalidArgument("MpcConfig: equilibrium input must lie strictly inside the bounds");
    const auto ns = static_cast<Eigen::Index>(constrained_states.size());
    if (x_lb.size() != ns || x_ub.size() != ns)
      throw InvalidArgument("MpcConfig: state bounds must match constrained_states");
    const auto nsoft = static_cast<Eigen::Index>(soft_states.size());
    if (soft_lb.size() != nsoft || soft_ub.size() != nsoft)
      throw InvalidArgument("MpcConfig: soft bounds must match soft_states");
    if (nsoft > 0 && !(slack_weight > 0.0)) throw InvalidArgument("MpcConfig: slack weight must be positive");
  }
};

/// Fixed-point iteration P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q from P = Q.
inline MatX solve_dare(const MatX& A, const MatX& B, const MatX& Q, const MatX& R, int max_iterations = 10000,
                       double tolerance = 1e-10, int* iterations = nullptr) {
  MatX P = 0.5 * (Q + Q.transpose());
  const MatX At = A.transpose();
  for (int k = 1; k <= max_iterations; ++k) {
    const MatX PA = P * A;
    const MatX PB = P * B;
    const MatX S = R + B.transpose() * PB;
    const MatX K = S.ldlt().solve(PB.transpose() * A);
    MatX next = At * PA - (At * PB) * K + Q;
    next = 0.5 * (next + next.transpose()).eval();
    const double change = (next - P).cwiseAbs().maxCoeff();
    P = std::move(next);
    if (!std::isfinite(change)) break;
    if (change < tolerance) {
      if (iterations) *iterations = k;
      return P;
    }
  }
  throw NoConvergence("DARE fixed-point iteration did not converge");
}

inline double dare_residual(const MatX& A, const MatX& B, const MatX& Q, const MatX& R, const MatX& P) {
  const MatX PB = P * B;
  const MatX rhs = A.transpose() * P * A -
                   A.transpose() * PB * (R + B.transpose() * PB).ldlt().solve(PB.transpose() * A) + Q;
  return (P - rhs).cwiseAbs().maxCoeff();
}

struct Prediction {
  MatX F;         // (n Np) x n, states at steps 0..Np-1
  MatX H;         // (n Np) x (m Np)
  MatX A_pow;     // A^Np
  MatX G;         // n x (m Np), terminal state response to dU
};

inline Prediction build_prediction(const MatX& A, const MatX& B, int horizon) {
  if (horizon < 1) throw InvalidArgument("build_prediction: horizon must be at least 1");
  const Eigen::Index n = A.rows();
  const Eigen::Index m = B.cols();
  Prediction p;
  p.F = MatX::Zero(n * horizon, n);
  p.H = MatX::Zero(n * horizon, m * horizon);
  p.G = MatX::Zero(n, m * horizon);
  MatX Ak = MatX::Identity(n, n);
  // AkB[j] = A^j B
  std::vector<MatX> AkB;
  for (int t = 0; t < horizon; ++t) {
    p.F.middleRows(n * t, n) = Ak;
    AkB.push_back(Ak * B);
    Ak = (A * Ak).eval();
  }
  p.A_pow = Ak;
  for (int t = 1; t < horizon; ++t)
    for (int j = 0; j < t; ++j) p.H.block(n * t, m * j, n, m) = AkB[static_cast<std::size_t>(t - 1 - j)];
  for (int j = 0; j < horizon; ++j) p.G.middleCols(m * j, m) = AkB[static_cast<std::size_t>(horizon - 1 - j)];
  return p;
}

struct StackedConstraints {
  MatX M_U;
  VecX dU_b;
  MatX M_x;  // hard rows first, then soft rows
  VecX dZ_b;
  MatX F;
  MatX H;
  /// Input-space form [M_U; M_x H] dU <= [dU_b; dZ_b - M_x F dx]. State rows
  /// that do not depend on dU (the current step) are left out.
  MatX A_ineq;
  MatX state_rows_F;  // rows of M_x F kept in A_ineq
  VecX state_rows_b;
  Eigen::Index soft_rows = 0;  // trailing rows of A_ineq that take the slack

  VecX rhs(const VecX& dx) const {
    VecX b(A_ineq.rows());
    b << dU_b, state_rows_b - state_rows_F * dx;
    return b;
  }
};

inline StackedConstraints build_constraints(const MpcConfig& config, const LinearModel& model,
                                            const Prediction& pred) {
  const int Np = config.horizon;
  const int n = model.n_states();
  const int m = model.n_inputs();
  StackedConstraints s;
  s.F = pred.F;
  s.H = pred.H;

  // (signed index, bound): index k >= 0 is an upper bound, -(k+1) a lower one.
  using Row = std::pair<int, double>;
  std::vector<Row> u_rows;
  for (int k = 0; k < m; ++k) {
    const double ue = model.u_e.vector()[k];
    if (std::isfinite(config.u_ub[k])) u_rows.emplace_back(k, config.u_ub[k] - ue);
    if (std::isfinite(config.u_lb[k])) u_rows.emplace_back(-(k + 1), -(config.u_lb[k] - ue));
  }
  auto state_rows = [&](const std::vector<std::string>& names, const VecX& lb, const VecX& ub) {
    const auto idx = resolve_state_selection(names, model.n_uavs());
    if (idx.size() != names.size())
      throw InvalidArgument("build_constraints: constrained states must name single components");
    std::vector<Row> rows;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto e = static_cast<Eigen::Index>(r);
      const double xe = model.x_e.vector()[idx[r]];
      if (std::isfinite(ub[e])) rows.emplace_back(idx[r], ub[e] - xe);
      if (std::isfinite(lb[e])) rows.emplace_back(-(idx[r] + 1), -(lb[e] - xe));
    }
    return rows;
  };
  const auto hard = state_rows(config.constrained_states, config.x_lb, config.x_ub);
  const auto soft = state_rows(config.soft_states, config.soft_lb, config.soft_ub);

  // One block of rows per step for each group, groups stacked.
  auto stack = [Np](const std::vector<Row>& rows, int width, MatX& M, VecX& b, Eigen::Index row0) {
    const auto nr = static_cast<Eigen::Index>(rows.size());
    for (int t = 0; t < Np; ++t)
      for (Eigen::Index r = 0; r < nr; ++r) {
        const auto [code, bound] = rows[static_cast<std::size_t>(r)];
        const int k = code >= 0 ? code : -code - 1;
        M(row0 + nr * t + r, width * t + k) = code >= 0 ? 1.0 : -1.0;
        b[row0 + nr * t + r] = bound;
      }
  };
  const auto nu_rows = static_cast<Eigen::Index>(u_rows.size());
  s.M_U = MatX::Zero(nu_rows * Np, m * Np);
  s.dU_b = VecX(nu_rows * Np);
  stack(u_rows, m, s.M_U, s.dU_b, 0);
  const auto nh = static_cast<Eigen::Index>(hard.size()) * Np;
  const auto ns = static_cast<Eigen::Index>(soft.size()) * Np;
  s.M_x = MatX::Zero(nh + ns, n * Np);
  s.dZ_b = VecX(nh + ns);
  stack(hard, n, s.M_x, s.dZ_b, 0);
  stack(soft, n, s.M_x, s.dZ_b, nh);

  const MatX MxH = s.M_x * s.H;
  const MatX MxF = s.M_x * s.F;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < MxH.rows(); ++r)
    if (MxH.row(r).cwiseAbs().maxCoeff() > 0.0) {
      keep.push_back(r);
      if (r >= nh) ++s.soft_rows;
    }
  const auto nk = static_cast<Eigen::Index>(keep.size());
  s.A_ineq = MatX(s.M_U.rows() + nk, m * Np);
  s.A_ineq.topRows(s.M_U.rows()) = s.M_U;
  s.state_rows_F = MatX(nk, n);
  s.state_rows_b = VecX(nk);
  for (Eigen::Index r = 0; r < nk; ++r) {
    s.A_ineq.row(s.M_U.rows() + r) = MxH.row(keep[static_cast<std::size_t>(r)]);
    s.state_rows_F.row(r) = MxF.row(keep[static_cast<std::size_t>(r)]);
    s.state_rows_b[r] = s.dZ_b[keep[static_cast<std::size_t>(r)]];
  }
  return s;
}

/// Quadratic cost J(dU) = 1/2 dU' H_qp dU + g' dU + const, with g affine in
/// (dx, dY') where dY' = Y' - C x_e is the stacked reference deviation.
struct CostMatrices {
  MatX H_qp;
  MatX K_x;     // g = K_x dx + K_y dY' + K_t dx_ref_terminal
  MatX K_y;
  MatX K_t;
};

inline CostMatrices build_cost_matrices(const LinearModel& model, const MpcConfig& config, const Prediction& pred,
                                        const MatX& Q_f) {
  const int Np = config.horizon;
  const int n = model.n_states();
  const int m = model.n_inputs();
  const int p = model.n_outputs();
  // CbH and CbF, one output block per step.
  MatX CH(p * Np, m * Np), CF(p * Np, n);
  MatX QCH(p * Np, m * Np);
  for (int t = 0; t < Np; ++t) {
    CH.middleRows(p * t, p) = model.C * pred.H.middleRows(n * t, n);
    CF.middleRows(p * t, p) = model.C * pred.F.middleRows(n * t, n);
    QCH.middleRows(p * t, p) = config.Q * CH.middleRows(p * t, p);
  }
  CostMatrices c;
  const MatX QfG = Q_f * pred.G;
  MatX Rb = MatX::Zero(m * Np, m * Np);
  for (int t = 0; t < Np; ++t) Rb.block(m * t, m * t, m, m) = config.R;
  c.H_qp = 2.0 * (CH.transpose() * QCH + Rb + pred.G.transpose() * QfG);
  c.K_x = 2.0 * (QCH.transpose() * CF + QfG.transpose() * pred.A_pow);
  if (config.W.size() != 0) {
    for (int t = 1; t < Np; ++t) {
      const auto Ht = pred.H.middleRows(n * t, n);
      const MatX WH = config.W.asDiagonal() * Ht;
      c.H_qp += 2.0 * Ht.transpose() * WH;
      c.K_x += 2.0 * WH.transpose() * pred.F.middleRows(n * t, n);
    }
  }
  c.H_qp = 0.5 * (c.H_qp + c.H_qp.transpose()).eval();
  c.K_y = -2.0 * QCH.transpose();
  c.K_t = -2.0 * QfG.transpose();
  return c;
}

/// Stacks a p x Np reference window (absolute outputs) into dY'.
inline VecX reference_deviation(const LinearModel& model, const MatX& window) {
  const VecX ye = model.C * model.x_e.vector();
  VecX dY(window.size());
  for (Eigen::Index t = 0; t < window.cols(); ++t) dY.segment(window.rows() * t, window.rows()) = window.col(t) - ye;
  return dY;
}

/// State deviation the terminal weight pulls toward, one step past the
/// window: the output reference extrapolated linearly from the last two
/// columns and lifted to the state, with the payload velocity set to the
/// reference velocity.
inline VecX terminal_state_reference(const LinearModel& model, const MatX& window) {
  const int p = model.n_outputs();
  const VecX ye = model.C * model.x_e.vector();
  const Eigen::Index last = window.cols() - 1;
  VecX y_end = window.col(last);
  VecX rate = VecX::Zero(p);
  if (window.cols() >= 3) {
    // Quadratic through the last three columns.
    const VecX d1 = window.col(last) - window.col(last - 1);
    const VecX d2 = d1 - (window.col(last - 1) - window.col(last - 2));
    y_end += d1 + d2;
    rate = (d1 + 1.5 * d2) / model.dt;
  } else if (window.cols() == 2) {
    rate = (window.col(last) - window.col(last - 1)) / model.dt;
    y_end += model.dt * rate;
  }
  const MatX C_pinv = model.C.transpose() * (model.C * model.C.transpose()).ldlt().solve(MatX::Identity(p, p));
  VecX x = C_pinv * (y_end - ye);
  const char* axes[3] = {"r0_x", "r0_y", "r0_z"};
  for (int k = 0; k < 3; ++k) {
    const auto it = std::find(model.output_names.begin(), model.output_names.end(), axes[k]);
    if (it != model.output_names.end())
      x[SystemState::v0_offset() + k] = rate[static_cast<Eigen::Index>(it - model.output_names.begin())];
  }
  return x;
}

/// Unconstrained quadratic of the tracking cost for a given state deviation
/// and reference window.
inline QpProblem build_cost(const LinearModel& model, const MpcConfig& config, const Prediction& pred,
                           const MatX& Q_f, const VecX& dx, const MatX& window) {
  const int p = model.n_outputs();
  if (window.rows() != p || window.cols() != config.horizon)
    throw InvalidArgument("build_cost: reference window must be p x horizon");
  const auto c = build_cost_matrices(model, config, pred, Q_f);
  QpProblem qp;
  qp.H = c.H_qp;
  qp.g = c.K_x * dx + c.K_y * reference_deviation(model, window) + c.K_t * terminal_state_reference(model, window);
  qp.A_ineq = MatX(0, c.H_qp.rows());
  qp.b_ineq = VecX(0);
  return qp;
}

/// Value of the tracking cost evaluated by direct simulation of the linear
/// model; used to check the condensed form.
inline double tracking_cost(const LinearModel& model, const MpcConfig& config, const MatX& Q_f, const VecX& dx,
                            const MatX& window, const VecX& dU) {
  const int m = model.n_inputs();
  const VecX ye = model.C * model.x_e.vector();
  VecX x = dx;
  double J = 0.0;
  for (int t = 0; t < config.horizon; ++t) {
    const VecX e = ye + model.C * x - window.col(t);
    J += e.dot(config.Q * e);
    if (config.W.size() != 0) J += x.dot(config.W.asDiagonal() * x);
    const VecX du = dU.segment(m * t, m);
    J += du.dot(config.R * du);
    x = model.A * x + model.B * du;
  }
  const VecX eN = x - terminal_state_reference(model, window);
  return J + eN.dot(Q_f * eN);
}

struct MpcResult {
  VecX dU;  // full horizon
  VecX du;  // first move
  VecX u;   // u_e + du
  QpSolution qp;
  double slack = 0.0;  // largest soft-bound violation allowed by the plan
};

class MpcController {
 public:
  MpcController(LinearModel model, MpcConfig config) : model_(std::move(model)), config_(std::move(config)) {
    config_.validate(model_);
    if (config_.Q_f.size() == 0) {
      MatX Qs = model_.C.transpose() * config_.Q * model_.C;
      if (config_.W.size() != 0) Qs.diagonal() += config_.W;
      config_.Q_f = solve_dare(model_.A, model_.B, Qs, config_.R, 10000, 1e-10, &dare_iterations_);
    }
    pred_ = build_prediction(model_.A, model_.B, config_.horizon);
    cons_ = build_constraints(config_, model_, pred_);
    cost_ = build_cost_matrices(model_, config_, pred_, config_.Q_f);
    // Soft rows share one slack s >= 0 appended to dU with cost w s^2.
    const Eigen::Index nz = cost_.H_qp.rows();
    const Eigen::Index nc = cons_.A_ineq.rows();
    if (cons_.soft_rows == 0) {
      qp_.H = cost_.H_qp;
      qp_.A_ineq = cons_.A_ineq;
    } else {
      qp_.H = MatX::Zero(nz + 1, nz + 1);
      qp_.H.topLeftCorner(nz, nz) = cost_.H_qp;
      qp_.H(nz, nz) = 2.0 * config_.slack_weight;
      qp_.A_ineq = MatX::Zero(nc + 1, nz + 1);
      qp_.A_ineq.topLeftCorner(nc, nz) = cons_.A_ineq;
      qp_.A_ineq.block(nc - cons_.soft_rows, nz, cons_.soft_rows, 1).setConstant(-1.0);
      qp_.A_ineq(nc, nz) = -1.0;
    }
    qp_.g = VecX::Zero(qp_.H.rows());
    qp_.b_ineq = VecX::Zero(qp_.A_ineq.rows());
  }

  const LinearModel& model() const { return model_; }
  const MpcConfig& config() const { return config_; }
  const Prediction& prediction() const { return pred_; }
  const StackedConstraints& constraints() const { return cons_; }
  const CostMatrices& cost() const { return cost_; }
  int dare_iterations() const { return dare_iterations_; }

  /// Solves the condensed tracking QP for state deviation dx and a p x Np
  /// window of absolute output references. Throws QpInfeasible when the hard
  /// bounds cannot be met.
  MpcResult solve_tracking(const VecX& dx, const MatX& window) {
    const int m = model_.n_inputs();
    if (window.rows() != model_.n_outputs() || window.cols() != config_.horizon)
      throw InvalidArgument("solve_tracking: reference window must be p x horizon");
    if (dx.size() != model_.n_states()) throw InvalidArgument("solve_tracking: state deviation has wrong size");
    const Eigen::Index nz = cost_.H_qp.rows();
    const Eigen::Index nc = cons_.A_ineq.rows();
    qp_.g.head(nz) = cost_.K_x * dx + cost_.K_y * reference_deviation(model_, window) +
                     cost_.K_t * terminal_state_reference(model_, window);
    qp_.b_ineq.head(nc) = cons_.rhs(dx);
    std::optional<VecX> warm;
    if (last_.size() == qp_.g.size()) {
      VecX shifted = last_;
      shifted.segment(0, nz - m) = last_.segment(m, nz - m);
      warm = shifted;
    }
    MpcResult r;
    r.qp = solver_.solve(qp_, warm);
    last_ = r.qp.z;
    r.dU = r.qp.z.head(nz);
    if (cons_.soft_rows > 0) r.slack = std::max(0.0, r.qp.z[nz]);
    r.du = r.dU.head(m);
    r.u = model_.u_e.vector() + r.du;
    return r;
  }

  void reset() { last_.resize(0); }

 private:
  LinearModel model_;
  MpcConfig config_;
  Prediction pred_;
  StackedConstraints cons_;
  CostMatrices cost_;
  QpProblem qp_;
  QpSolver solver_;
  VecX last_;
  int dare_iterations_ = 0;
};

}  // namespace idc
