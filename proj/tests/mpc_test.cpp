#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "idc/mpc.hpp"

namespace idc {
namespace {

class MpcFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    model_ = new LinearModel(linearize_model(SystemParams::reference(), Vec3(0, 0, -5), 0.05));
    controller_ = new MpcController(*model_, MpcConfig::defaults(*model_));
  }
  static void TearDownTestSuite() {
    delete controller_;
    delete model_;
  }

  static MatX hover_window(int horizon) {
    const VecX ye = model_->C * model_->x_e.vector();
    return ye.replicate(1, horizon);
  }

  static VecX random_vector(std::mt19937& rng, Eigen::Index n, double scale) {
    std::normal_distribution<double> N(0.0, scale);
    VecX v(n);
    for (Eigen::Index k = 0; k < n; ++k) v[k] = N(rng);
    return v;
  }

  // Small deviation that keeps the links unit length to first order.
  static VecX random_deviation(std::mt19937& rng, double scale) {
    VecX dx = random_vector(rng, model_->n_states(), scale);
    for (int i = 0; i < model_->n_uavs(); ++i) {
      dx[SystemState::link_dir_offset(i) + 2] = 0.0;
      dx[SystemState::link_rate_offset(i) + 2] = 0.0;
      dx.segment<4>(SystemState::uav_omega_offset(i) + 3).setZero();
    }
    return dx;
  }

  static LinearModel* model_;
  static MpcController* controller_;
};

LinearModel* MpcFixture::model_ = nullptr;
MpcController* MpcFixture::controller_ = nullptr;

double scalar_dare_oracle(double a, double b, double q, double r) {
  // Bisection on f(p) = a^2 p - a^2 b^2 p^2 / (r + b^2 p) + q - p.
  auto f = [&](double p) { return a * a * p - a * a * b * b * p * p / (r + b * b * p) + q - p; };
  double lo = q;
  double hi = 1e6;
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

TEST(Dare, ZeroDynamicsGivesStageWeight) {
  std::mt19937 rng(1);
  std::normal_distribution<double> N(0.0, 1.0);
  MatX B(3, 2), L(3, 3);
  for (int k = 0; k < 6; ++k) B(k) = N(rng);
  for (int k = 0; k < 9; ++k) L(k) = N(rng);
  const MatX Q = L * L.transpose();
  const MatX P = solve_dare(MatX::Zero(3, 3), B, Q, MatX::Identity(2, 2));
  EXPECT_LT((P - Q).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Dare, ScalarMatchesRootFinding) {
  MatX A(1, 1), B(1, 1), Q(1, 1), R(1, 1);
  A << 0.5;
  B << 1.0;
  Q << 1.0;
  R << 1.0;
  const MatX P = solve_dare(A, B, Q, R);
  EXPECT_NEAR(P(0, 0), scalar_dare_oracle(0.5, 1.0, 1.0, 1.0), 1e-9);
  A << 2.0;
  EXPECT_NEAR(solve_dare(A, B, Q, R)(0, 0), scalar_dare_oracle(2.0, 1.0, 1.0, 1.0), 1e-9);
}

TEST(Dare, UncontrollableUnstableModeThrows) {
  MatX A(1, 1), B(1, 1), Q(1, 1), R(1, 1);
  A << 1.5;
  B << 0.0;
  Q << 1.0;
  R << 1.0;
  EXPECT_THROW(solve_dare(A, B, Q, R), NoConvergence);
}

TEST_F(MpcFixture, DareResidualOnFullModel) {
  const auto& cfg = controller_->config();
  MatX Qs = model_->C.transpose() * cfg.Q * model_->C;
  Qs.diagonal() += cfg.W;
  EXPECT_GT(controller_->dare_iterations(), 0);
  EXPECT_LE(controller_->dare_iterations(), 10000);
  EXPECT_LT(dare_residual(model_->A, model_->B, Qs, cfg.R, cfg.Q_f), 1e-8);
  EXPECT_LT((cfg.Q_f - cfg.Q_f.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::SelfAdjointEigenSolver<MatX> es(cfg.Q_f);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-9);
}

TEST(Prediction, HorizonOne) {
  std::mt19937 rng(2);
  std::normal_distribution<double> N(0.0, 1.0);
  MatX A(3, 3), B(3, 2);
  for (int k = 0; k < 9; ++k) A(k) = N(rng);
  for (int k = 0; k < 6; ++k) B(k) = N(rng);
  const auto p = build_prediction(A, B, 1);
  EXPECT_EQ(p.F, MatX(MatX::Identity(3, 3)));
  EXPECT_EQ(p.H, MatX(MatX::Zero(3, 2)));
  EXPECT_THROW(build_prediction(A, B, 0), InvalidArgument);
}

TEST(Prediction, ScalarHandRecursion) {
  MatX A(1, 1), B(1, 1);
  A << 2.0;
  B << 1.0;
  const auto p = build_prediction(A, B, 3);
  MatX F(3, 1), H(3, 3);
  F << 1, 2, 4;
  H << 0, 0, 0, 1, 0, 0, 2, 1, 0;
  EXPECT_EQ(p.F, F);
  EXPECT_EQ(p.H, H);
}

TEST_F(MpcFixture, PredictionMatchesSimulation) {
  const int Np = 6;
  const auto pred = build_prediction(model_->A, model_->B, Np);
  const int n = model_->n_states();
  const int m = model_->n_inputs();
  std::mt19937 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const VecX dx = random_vector(rng, n, 0.1);
    const VecX dU = random_vector(rng, m * Np, 0.5);
    const VecX X = pred.F * dx + pred.H * dU;
    VecX x = dx;
    for (int t = 0; t < Np; ++t) {
      EXPECT_LT((X.segment(n * t, n) - x).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + x.cwiseAbs().maxCoeff()));
      x = model_->A * x + model_->B * dU.segment(m * t, m);
    }
    EXPECT_LT((pred.A_pow * dx + pred.G * dU - x).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + x.cwiseAbs().maxCoeff()));
  }
}

TEST_F(MpcFixture, PredictionIsCausal) {
  const int Np = 5;
  const auto pred = build_prediction(model_->A, model_->B, Np);
  const int n = model_->n_states();
  const int m = model_->n_inputs();
  std::mt19937 rng(4);
  const VecX dx = random_vector(rng, n, 0.1);
  const VecX dU = random_vector(rng, m * Np, 0.5);
  const VecX X = pred.F * dx + pred.H * dU;
  for (int j = 0; j < Np; ++j) {
    VecX dU2 = dU;
    dU2.segment(m * j, m) += random_vector(rng, m, 1.0);
    const VecX X2 = pred.F * dx + pred.H * dU2;
    EXPECT_EQ(X2.head(n * (j + 1)), X.head(n * (j + 1))) << "step " << j;
    if (j + 1 < Np) {
      EXPECT_GT((X2.segment(n * (j + 1), n) - X.segment(n * (j + 1), n)).cwiseAbs().maxCoeff(), 0.0);
    }
  }
}

TEST_F(MpcFixture, ConstraintsAllInfiniteAreEmpty) {
  auto cfg = MpcConfig::defaults(*model_);
  cfg.horizon = 4;
  cfg.u_lb.setConstant(-kInf);
  cfg.u_ub.setConstant(kInf);
  cfg.x_lb.setConstant(-kInf);
  cfg.x_ub.setConstant(kInf);
  cfg.soft_lb.setConstant(-kInf);
  cfg.soft_ub.setConstant(kInf);
  const auto pred = build_prediction(model_->A, model_->B, cfg.horizon);
  const auto s = build_constraints(cfg, *model_, pred);
  EXPECT_EQ(s.A_ineq.rows(), 0);
  EXPECT_EQ(s.M_U.rows(), 0);
  EXPECT_EQ(s.M_x.rows(), 0);
}

TEST_F(MpcFixture, ConstraintPayloadAltitude) {
  auto cfg = MpcConfig::defaults(*model_);
  cfg.horizon = 3;
  cfg.constrained_states = {"r0_z"};
  cfg.x_lb = VecX::Constant(1, -kInf);
  cfg.x_ub = VecX::Constant(1, 0.0);
  cfg.soft_states.clear();
  cfg.soft_lb.resize(0);
  cfg.soft_ub.resize(0);
  const auto pred = build_prediction(model_->A, model_->B, cfg.horizon);
  const auto s = build_constraints(cfg, *model_, pred);
  ASSERT_EQ(s.M_x.rows(), 3);
  for (int t = 0; t < 3; ++t) {
    EXPECT_EQ(s.M_x(t, model_->n_states() * t + SystemState::r0_offset() + 2), 1.0);
    EXPECT_EQ(s.M_x.row(t).cwiseAbs().sum(), 1.0);
    EXPECT_EQ(s.dZ_b[t], 0.0 - (-5.0));
  }
  // Step 0 does not depend on the inputs and is left out of the QP rows.
  EXPECT_EQ(s.A_ineq.rows(), s.M_U.rows() + 2);
  EXPECT_EQ(s.M_U.rows(), 3 * 2 * model_->n_inputs());
}

TEST_F(MpcFixture, ConstraintAttitudeSixRowsPerStep) {
  auto cfg = MpcConfig::defaults(*model_);
  cfg.horizon = 4;
  cfg.constrained_states = {"theta0_roll", "theta0_pitch", "theta0_yaw"};
  const double a = deg2rad(5.0);
  cfg.x_lb = VecX::Constant(3, -a);
  cfg.x_ub = VecX::Constant(3, a);
  cfg.soft_states.clear();
  cfg.soft_lb.resize(0);
  cfg.soft_ub.resize(0);
  const auto pred = build_prediction(model_->A, model_->B, cfg.horizon);
  const auto s = build_constraints(cfg, *model_, pred);
  EXPECT_EQ(s.M_x.rows(), 6 * 4);
  for (int t = 0; t < 4; ++t) {
    const auto blk = s.M_x.block(6 * t, model_->n_states() * t + SystemState::theta0_offset(), 6, 3);
    EXPECT_EQ(blk.cwiseAbs().sum(), 6.0);
    EXPECT_EQ(blk.sum(), 0.0);
    for (int r = 0; r < 6; ++r) EXPECT_NEAR(s.dZ_b[6 * t + r], a, 1e-15);
  }
}

TEST_F(MpcFixture, CostVanishesAtEquilibrium) {
  const auto& cfg = controller_->config();
  const auto qp = build_cost(*model_, cfg, controller_->prediction(), cfg.Q_f, VecX::Zero(model_->n_states()),
                             hover_window(cfg.horizon));
  EXPECT_LT(qp.g.cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(MpcFixture, CostGradientMatchesFiniteDifferences) {
  const auto& cfg = controller_->config();
  std::mt19937 rng(5);
  const VecX dx = random_deviation(rng, 0.05);
  MatX window = hover_window(cfg.horizon);
  for (int t = 0; t < cfg.horizon; ++t) window.col(t).head<3>() += Vec3(0.1 * t, -0.05 * t, -0.5);
  const auto qp = build_cost(*model_, cfg, controller_->prediction(), cfg.Q_f, dx, window);
  for (int trial = 0; trial < 10; ++trial) {
    const VecX dU = random_vector(rng, qp.g.size(), 0.5);
    const VecX grad = qp.H * dU + qp.g;
    const double h = 1e-2;  // exact for a quadratic up to rounding
    double worst = 0.0;
    for (Eigen::Index k = 0; k < dU.size(); ++k) {
      VecX up = dU, dn = dU;
      up[k] += h;
      dn[k] -= h;
      const double fd = (tracking_cost(*model_, cfg, cfg.Q_f, dx, window, up) -
                         tracking_cost(*model_, cfg, cfg.Q_f, dx, window, dn)) / (2 * h);
      worst = std::max(worst, std::abs(fd - grad[k]) / std::max(1.0, std::abs(grad[k])));
    }
    EXPECT_LT(worst, 1e-6) << "trial " << trial;
    // The quadratic model reproduces cost differences exactly.
    const double dJ = tracking_cost(*model_, cfg, cfg.Q_f, dx, window, dU) -
                      tracking_cost(*model_, cfg, cfg.Q_f, dx, window, VecX::Zero(dU.size()));
    EXPECT_NEAR(dJ, qp.objective(dU), 1e-8 * std::max(1.0, std::abs(dJ)));
  }
}

TEST_F(MpcFixture, CostHandExpansionHorizonTwo) {
  auto cfg = MpcConfig::defaults(*model_);
  cfg.horizon = 2;
  cfg.Q_f = controller_->config().Q_f;
  const auto pred = build_prediction(model_->A, model_->B, 2);
  const auto c = build_cost_matrices(*model_, cfg, pred, cfg.Q_f);
  const MatX& A = model_->A;
  const MatX& B = model_->B;
  const MatX CB = model_->C * B;
  const MatX W = cfg.W.asDiagonal();
  const MatX AB = A * B;
  const auto m = B.cols();
  // x1 = A x0 + B u0, x2 = A^2 x0 + A B u0 + B u1.
  MatX H = MatX::Zero(2 * m, 2 * m);
  H.topLeftCorner(m, m) = CB.transpose() * cfg.Q * CB + B.transpose() * W * B + cfg.R + AB.transpose() * cfg.Q_f * AB;
  H.topRightCorner(m, m) = AB.transpose() * cfg.Q_f * B;
  H.bottomLeftCorner(m, m) = B.transpose() * cfg.Q_f * AB;
  H.bottomRightCorner(m, m) = cfg.R + B.transpose() * cfg.Q_f * B;
  H *= 2.0;
  const double scale = H.cwiseAbs().maxCoeff();
  EXPECT_LT((c.H_qp - H).cwiseAbs().maxCoeff(), 1e-12 * scale);
  MatX Kx(2 * m, A.cols());
  Kx.topRows(m) = CB.transpose() * cfg.Q * model_->C * A + B.transpose() * W * A + AB.transpose() * cfg.Q_f * A * A;
  Kx.bottomRows(m) = B.transpose() * cfg.Q_f * A * A;
  Kx *= 2.0;
  EXPECT_LT((c.K_x - Kx).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, Kx.cwiseAbs().maxCoeff()));
}

TEST_F(MpcFixture, TerminalReferenceCarriesReferenceVelocity) {
  const int Np = 4;
  MatX window = hover_window(Np);
  for (int t = 0; t < Np; ++t) window.col(t).head<3>() += Vec3(0.1 * t, 0.0, -0.02 * t * t);
  const VecX xN = terminal_state_reference(*model_, window);
  // Position x advances 0.1 per step, z follows -0.02 t^2; evaluated at t = 4.
  EXPECT_NEAR(xN[SystemState::r0_offset()], 0.4, 1e-12);
  EXPECT_NEAR(xN[SystemState::r0_offset() + 2], -0.02 * 16, 1e-12);
  EXPECT_NEAR(xN[SystemState::v0_offset()], 0.1 / model_->dt, 1e-9);
  EXPECT_NEAR(xN[SystemState::v0_offset() + 2], -0.02 * 8 / model_->dt, 1e-9);
  EXPECT_EQ(xN[SystemState::v0_offset() + 1], 0.0);
  // A constant window gives a resting terminal state.
  const VecX x0 = terminal_state_reference(*model_, hover_window(Np));
  EXPECT_LT(x0.cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(MpcFixture, HoverIsFixedPoint) {
  controller_->reset();
  const auto r = controller_->solve_tracking(VecX::Zero(model_->n_states()), hover_window(20));
  EXPECT_LT((r.u - model_->u_e.vector()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(r.slack, 0.0);
}

TEST_F(MpcFixture, ClimbStepRaisesThrustsEqually) {
  controller_->reset();
  MatX window = hover_window(20);
  window.row(2).array() -= 1.0;  // 1 m up in NED
  const auto r = controller_->solve_tracking(VecX::Zero(model_->n_states()), window);
  const double d0 = r.du[0];
  EXPECT_GT(d0, 0.0);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(r.du[4 * i], d0, 1e-6 * std::abs(d0));
  for (int i = 0; i < 4; ++i) EXPECT_LT(r.du.segment<3>(4 * i + 1).cwiseAbs().maxCoeff(), 1e-6);
}

TEST_F(MpcFixture, HessianIsStrictlyConvex) {
  const Eigen::SelfAdjointEigenSolver<MatX> es(controller_->cost().H_qp);
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
}

TEST_F(MpcFixture, SolutionSatisfiesConstraints) {
  std::mt19937 rng(6);
  const auto& cons = controller_->constraints();
  for (int trial = 0; trial < 5; ++trial) {
    controller_->reset();
    const VecX dx = random_deviation(rng, 0.02);
    MatX window = hover_window(20);
    window.row(0).array() += 2.0;
    const auto r = controller_->solve_tracking(dx, window);
    const VecX s = cons.A_ineq * r.dU - cons.rhs(dx);
    const Eigen::Index nhard = s.size() - cons.soft_rows;
    EXPECT_LE(s.head(nhard).maxCoeff(), 1e-8);
    if (cons.soft_rows > 0) EXPECT_LE(s.tail(cons.soft_rows).maxCoeff(), r.slack + 1e-8);
  }
}

TEST_F(MpcFixture, ActiveAttitudeBoundIsMetExactly) {
  controller_->reset();
  VecX dx = VecX::Zero(model_->n_states());
  dx[SystemState::omega0_offset()] = 1.5;  // payload rolling
  const auto r = controller_->solve_tracking(dx, hover_window(20));
  const auto& pred = controller_->prediction();
  const int n = model_->n_states();
  const VecX X = pred.F * dx + pred.H * r.dU;
  double max_roll = 0.0;
  for (int t = 1; t < 20; ++t) max_roll = std::max(max_roll, std::abs(X[n * t + SystemState::theta0_offset()]));
  const auto& act = r.qp.active_set;
  const auto nu = controller_->constraints().M_U.rows();
  const auto nhard = controller_->constraints().A_ineq.rows() - controller_->constraints().soft_rows;
  const bool attitude_active = std::any_of(act.begin(), act.end(), [&](int i) { return i >= nu && i < nhard; });
  ASSERT_TRUE(attitude_active);
  EXPECT_NEAR(max_roll, deg2rad(5.0), 1e-8);
}

TEST_F(MpcFixture, InfeasibleHardBoundsThrow) {
  controller_->reset();
  VecX dx = VecX::Zero(model_->n_states());
  dx[SystemState::omega0_offset()] = 5.0;
  EXPECT_THROW(controller_->solve_tracking(dx, hover_window(20)), QpInfeasible);
}

TEST_F(MpcFixture, RecedingHorizonIsConsistent) {
  controller_->reset();
  std::mt19937 rng(7);
  const int m = model_->n_inputs();
  VecX dx = 0.2 * random_deviation(rng, 0.02);
  auto r = controller_->solve_tracking(dx, hover_window(20));
  for (int k = 0; k < 5; ++k) {
    dx = model_->A * dx + model_->B * r.du;
    const VecX tail = r.dU.segment(m, r.dU.size() - 2 * m);
    r = controller_->solve_tracking(dx, hover_window(20));
    EXPECT_LT((r.dU.head(tail.size()) - tail).cwiseAbs().maxCoeff(), 1e-3) << "step " << k;
  }
}

TEST_F(MpcFixture, ConfigValidation) {
  auto cfg = MpcConfig::defaults(*model_);
  cfg.horizon = 0;
  EXPECT_THROW(cfg.validate(*model_), InvalidArgument);
  cfg = MpcConfig::defaults(*model_);
  cfg.R(0, 0) = 0.0;
  EXPECT_THROW(cfg.validate(*model_), InvalidArgument);
  cfg = MpcConfig::defaults(*model_);
  cfg.u_ub[0] = model_->u_e.thrust(0);
  EXPECT_THROW(cfg.validate(*model_), InvalidArgument);
  cfg = MpcConfig::defaults(*model_);
  cfg.x_lb.resize(2);
  EXPECT_THROW(cfg.validate(*model_), InvalidArgument);
  cfg = MpcConfig::defaults(*model_);
  EXPECT_THROW(controller_->solve_tracking(VecX::Zero(3), hover_window(20)), InvalidArgument);
  EXPECT_THROW(controller_->solve_tracking(VecX::Zero(model_->n_states()), hover_window(5)), InvalidArgument);
}

}  // namespace
}  // namespace idc
