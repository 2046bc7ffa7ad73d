#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "idc/qp.hpp"
#include "qp_oracle.hpp"

namespace idc {
namespace {

QpProblem unconstrained(MatX H, VecX g) {
  QpProblem qp;
  qp.H = std::move(H);
  qp.g = std::move(g);
  qp.A_ineq = MatX(0, qp.H.rows());
  qp.b_ineq = VecX(0);
  return qp;
}

TEST(QpSolver, UnconstrainedStationaryPoint) {
  QpSolver solver;
  const auto sol = solver.solve(unconstrained(MatX::Identity(1, 1), VecX::Constant(1, -2.0)));
  EXPECT_NEAR(sol.z[0], 2.0, 1e-14);
  EXPECT_TRUE(sol.active_set.empty());
}

TEST(QpSolver, SingleActiveBound) {
  // (z - 1)^2 = z^2 - 2z + 1 -> H = 2, g = -2.
  QpProblem qp = unconstrained(MatX::Constant(1, 1, 2.0), VecX::Constant(1, -2.0));
  qp.A_ineq = MatX::Ones(1, 1);
  qp.b_ineq = VecX::Zero(1);
  QpSolver solver;
  const auto sol = solver.solve(qp);
  EXPECT_NEAR(sol.z[0], 0.0, 1e-14);
  ASSERT_EQ(sol.active_set.size(), 1u);
  EXPECT_EQ(sol.active_set[0], 0);
  EXPECT_NEAR(sol.multipliers[0], 2.0, 1e-12);
}

TEST(QpSolver, MatchesExhaustiveEnumeration) {
  std::mt19937 rng(2024);
  QpSolver solver;
  for (int trial = 0; trial < 200; ++trial) {
    const auto qp = testing::random_feasible_qp(rng, 1 + trial % 5, trial % 9);
    const auto sol = solver.solve(qp);
    const auto oracle = testing::enumerate_active_sets(qp);
    ASSERT_TRUE(oracle.found);
    EXPECT_NEAR(sol.objective, oracle.objective, 1e-6 * (1.0 + std::abs(oracle.objective))) << "trial " << trial;
    EXPECT_LT(sol.kkt_residual, 1e-8) << "trial " << trial;
    if (qp.n_constraints() > 0) EXPECT_LE((qp.A_ineq * sol.z - qp.b_ineq).maxCoeff(), 1e-8);
  }
}

TEST(QpSolver, WarmStartGivesSameSolution) {
  std::mt19937 rng(99);
  QpSolver solver;
  int cold_total = 0;
  int warm_total = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto qp = testing::random_feasible_qp(rng, 5, 8);
    const auto cold = solver.solve(qp);
    const auto warm = solver.solve(qp, cold.z);
    EXPECT_LT((cold.z - warm.z).cwiseAbs().maxCoeff(), 1e-8);
    cold_total += cold.iterations;
    warm_total += warm.iterations;
  }
  EXPECT_LE(warm_total, cold_total);
}

TEST(QpSolver, ObjectiveMonotoneAcrossIterations) {
  std::mt19937 rng(5);
  QpSolver solver;
  solver.set_record_trace(true);
  for (int trial = 0; trial < 50; ++trial) {
    const auto qp = testing::random_feasible_qp(rng, 5, 8);
    const auto sol = solver.solve(qp);
    const double unconstrained_obj = qp.objective(-qp.H.llt().solve(qp.g));
    double prev = unconstrained_obj;
    for (double f : sol.objective_trace) {
      EXPECT_GE(f, prev - 1e-10 * (1.0 + std::abs(prev)));
      prev = f;
    }
  }
}

TEST(QpSolver, ReportsInfeasible) {
  QpProblem qp = unconstrained(MatX::Identity(1, 1), VecX::Zero(1));
  qp.A_ineq = MatX(2, 1);
  qp.A_ineq << 1.0, -1.0;
  qp.b_ineq = VecX(2);
  qp.b_ineq << -1.0, -1.0;  // z <= -1 and z >= 1
  QpSolver solver;
  EXPECT_THROW(solver.solve(qp), QpInfeasible);
}

TEST(QpSolver, ReportsIllConditionedHessian) {
  MatX H = MatX::Zero(2, 2);
  H(0, 0) = 1.0;
  QpSolver solver;
  EXPECT_THROW(solver.solve(unconstrained(H, VecX::Zero(2))), QpIllConditioned);
}

TEST(QpSolver, DuplicateRowsAreHandled) {
  // min |z - (2,2)|^2 s.t. z1 + z2 <= 1 listed three times, plus z1 <= 0.2.
  QpProblem qp = unconstrained(2.0 * MatX::Identity(2, 2), VecX::Constant(2, -4.0));
  qp.A_ineq = MatX(4, 2);
  qp.A_ineq << 1, 1, 1, 1, 1, 1, 1, 0;
  qp.b_ineq = VecX(4);
  qp.b_ineq << 1, 1, 1, 0.2;
  QpSolver solver;
  const auto sol = solver.solve(qp);
  EXPECT_NEAR(sol.z[0], 0.2, 1e-12);
  EXPECT_NEAR(sol.z[1], 0.8, 1e-12);
  EXPECT_LT(sol.kkt_residual, 1e-8);
}

TEST(QpSolver, HalfspaceProjectionClosedForm) {
  std::mt19937 rng(8);
  std::normal_distribution<double> N(0.0, 1.0);
  QpSolver solver;
  for (int trial = 0; trial < 20; ++trial) {
    VecX y(4), a(4);
    for (int k = 0; k < 4; ++k) {
      y[k] = N(rng);
      a[k] = N(rng);
    }
    const double b = a.dot(y) - 1.0;  // y violates a'z <= b by 1
    QpProblem qp = unconstrained(MatX::Identity(4, 4), -y);
    qp.A_ineq = a.transpose();
    qp.b_ineq = VecX::Constant(1, b);
    const auto sol = solver.solve(qp);
    const VecX expected = y - a / a.squaredNorm();
    EXPECT_LT((sol.z - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(QpSolver, ReusesFactorizationAcrossHessians) {
  std::mt19937 rng(31);
  QpSolver solver;
  const auto a = testing::random_feasible_qp(rng, 3, 4);
  const auto b = testing::random_feasible_qp(rng, 4, 6);
  const auto sa1 = solver.solve(a);
  solver.solve(b);
  const auto sa2 = solver.solve(a);
  EXPECT_LT((sa1.z - sa2.z).cwiseAbs().maxCoeff(), 1e-14);
}

}  // namespace
}  // namespace idc
