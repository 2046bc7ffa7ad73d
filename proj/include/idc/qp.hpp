#pragma once

// Dense strictly convex QP
//
//   minimize 1/2 z'Hz + g'z  subject to  A z <= b
//
// solved with the Goldfarb-Idnani dual active-set method. The unconstrained
// minimizer is dual feasible, violated constraints are added one at a time
// and the primal objective never decreases along the way. The factorization
// of H is cached, so repeated solves with the same Hessian (the MPC case)
// only pay for the active-set iterations.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "idc/common.hpp"

namespace idc {

class QpInfeasible : public Error {
 public:
  using Error::Error;
};

class QpMaxIterations : public Error {
 public:
  using Error::Error;
};

class QpIllConditioned : public Error {
 public:
  using Error::Error;
};

struct QpProblem {
  MatX H;
  VecX g;
  MatX A_ineq;  // c x d, may have zero rows
  VecX b_ineq;

  int n_vars() const { return static_cast<int>(H.rows()); }
  int n_constraints() const { return static_cast<int>(A_ineq.rows()); }

  double objective(const VecX& z) const { return 0.5 * z.dot(H * z) + g.dot(z); }
};

struct QpSolution {
  VecX z;
  VecX multipliers;            // one per constraint, zero when inactive
  std::vector<int> active_set;  // ascending constraint indices
  int iterations = 0;
  double kkt_residual = 0.0;
  double objective = 0.0;
  std::vector<double> objective_trace;  // objective after each added constraint
};

/// Scaled KKT residual of (z, lambda): the largest of stationarity
/// ||Hz + g + A'lambda||_inf relative to max(1, ||g||_inf, ||Hz||_inf), primal
/// violation, dual sign violation and complementarity |lambda_i s_i|.
inline double kkt_residual(const QpProblem& qp, const VecX& z, const VecX& lambda) {
  const VecX Hz = qp.H * z;
  VecX grad = Hz + qp.g;
  if (qp.n_constraints() > 0) grad.noalias() += qp.A_ineq.transpose() * lambda;
  const double scale = std::max({1.0, qp.g.size() ? qp.g.cwiseAbs().maxCoeff() : 0.0,
                                 Hz.size() ? Hz.cwiseAbs().maxCoeff() : 0.0});
  double r = grad.size() ? grad.cwiseAbs().maxCoeff() / scale : 0.0;
  if (qp.n_constraints() > 0) {
    const VecX s = qp.A_ineq * z - qp.b_ineq;
    const VecX rs = (1.0 + qp.b_ineq.array().abs()).matrix();
    r = std::max(r, (s.array() / rs.array()).maxCoeff());
    r = std::max(r, (-lambda).maxCoeff() / scale);
    r = std::max(r, ((lambda.array() * s.array()).abs() / (scale * rs.array())).maxCoeff());
  }
  return std::max(r, 0.0);
}

class QpSolver {
 public:
  /// Record the objective after every added constraint in
  /// QpSolution::objective_trace (off by default; costs one H z per step).
  void set_record_trace(bool on) { record_trace_ = on; }

  /// Throws QpInfeasible, QpMaxIterations or QpIllConditioned.
  QpSolution solve(const QpProblem& qp, const std::optional<VecX>& warm_start = std::nullopt) {
    const int d = qp.n_vars();
    const int c = qp.n_constraints();
    if (qp.H.cols() != d || qp.g.size() != d || (c > 0 && qp.A_ineq.cols() != d) || qp.b_ineq.size() != c)
      throw InvalidArgument("QpProblem: inconsistent dimensions");
    factorize(qp.H);

    QpSolution sol;
    // Unconstrained minimizer z = -H^-1 g = -J J' g.
    VecX z = -(J0_ * (J0_.transpose() * qp.g));
    J_ = J0_;
    R_.setZero(d, d);
    active_.clear();
    u_.resize(0);

    // Rows are scaled to unit norm; multipliers are mapped back at the end.
    As_ = qp.A_ineq;
    const VecX row_norm = As_.rowwise().norm();
    bs_.resize(c);
    std::vector<char> is_active(static_cast<std::size_t>(c), 0);
    for (int i = 0; i < c; ++i) {
      if (row_norm[i] > 0.0) {
        As_.row(i) /= row_norm[i];
        bs_[i] = qp.b_ineq[i] / row_norm[i];
      } else {
        if (qp.b_ineq[i] < -1e-8) throw QpInfeasible("QP row " + std::to_string(i) + " is zero with negative bound");
        As_.row(i).setZero();
        bs_[i] = 0.0;
        is_active[i] = 1;  // never selected
      }
    }

    std::vector<int> warm;
    if (warm_start && warm_start->size() == d && c > 0) {
      const VecX s = qp.A_ineq * *warm_start - qp.b_ineq;
      for (int i = 0; i < c; ++i)
        if (row_norm[i] > 0.0 && std::abs(s[i]) <= 1e-9 * (1.0 + std::abs(qp.b_ineq[i]))) warm.push_back(i);
    }

    const long max_iter = 50L * (d + c);
    int iter = 0;
    VecX viol(c);

    while (true) {
      // Choose the most violated constraint (relative to its row norm), taking
      // rows active at the warm start first; ties go to the lowest index.
      if (c > 0) viol.noalias() = As_ * z - bs_;
      const double zmax = d > 0 ? z.cwiseAbs().maxCoeff() : 0.0;
      auto violated = [&](int i) {
        return !is_active[i] && viol[i] > 1e-12 * std::max({1.0, std::abs(bs_[i]), zmax});
      };
      int p = -1;
      double worst = 0.0;
      for (int i : warm) {
        if (violated(i) && viol[i] > worst) {
          worst = viol[i];
          p = i;
        }
      }
      for (int i = 0; i < c && p < 0; ++i) {
        if (violated(i) && viol[i] > worst) {
          worst = viol[i];
          p = i;
        }
      }
      if (p < 0) break;

      // Constraint p in >= form: n'z >= -b_p with n = -a_p.
      const VecX np = -As_.row(p).transpose();
      double u_new = 0.0;
      while (true) {
        if (++iter > max_iter) throw QpMaxIterations("QP iteration cap reached");
        const int q = static_cast<int>(active_.size());
        const VecX dvec = J_.transpose() * np;
        const VecX step = J_.rightCols(d - q) * dvec.tail(d - q);
        VecX r(q);
        if (q > 0)
          r = R_.topLeftCorner(q, q).triangularView<Eigen::Upper>().solve(dvec.head(q));

        // Partial step: largest dual step keeping active multipliers >= 0.
        double t1 = std::numeric_limits<double>::infinity();
        int drop = -1;
        for (int j = 0; j < q; ++j) {
          if (r[j] > 0.0) {
            const double tj = u_[j] / r[j];
            if (tj < t1 || (tj == t1 && u_[j] < u_[drop])) {
              t1 = tj;
              drop = j;
            }
          }
        }
        // Full step: makes constraint p active.
        double t2 = std::numeric_limits<double>::infinity();
        const double curvature = step.dot(np);
        const double slack = np.dot(z) + bs_[p];  // negative while violated
        if (curvature > 1e-13 * j_scale_ * np.squaredNorm()) {
          t2 = -slack / curvature;
        }
        const double t = std::min(t1, t2);
        if (!std::isfinite(t)) throw QpInfeasible("QP constraints are inconsistent (row " + std::to_string(p) + ")");

        if (!std::isfinite(t2)) {
          // Dual step only.
          for (int j = 0; j < q; ++j) u_[j] -= t * r[j];
          u_new += t;
          is_active[active_[drop]] = 0;
          delete_constraint(drop);
          continue;
        }

        z += t * step;
        for (int j = 0; j < q; ++j) u_[j] -= t * r[j];
        u_new += t;
        if (t == t2) {
          if (!add_constraint(dvec)) {
            throw QpInfeasible("QP constraint " + std::to_string(p) + " is linearly dependent on the active set");
          }
          active_.push_back(p);
          u_.conservativeResize(q + 1);
          u_[q] = u_new;
          is_active[p] = 1;
          if (record_trace_) sol.objective_trace.push_back(qp.objective(z));
          break;
        }
        is_active[active_[drop]] = 0;
        delete_constraint(drop);
      }
    }

    sol.z = z;
    sol.multipliers = VecX::Zero(c);
    for (std::size_t j = 0; j < active_.size(); ++j)
      sol.multipliers[active_[j]] = u_[static_cast<Eigen::Index>(j)] / row_norm[active_[j]];
    sol.active_set = active_;
    std::sort(sol.active_set.begin(), sol.active_set.end());
    sol.iterations = iter;
    sol.objective = qp.objective(z);
    sol.kkt_residual = kkt_residual(qp, z, sol.multipliers);
    return sol;
  }

 private:
  void factorize(const MatX& H) {
    if (H.rows() == H_cached_.rows() && H.cols() == H_cached_.cols() && H == H_cached_) return;
    if (H.rows() != H.cols()) throw InvalidArgument("QpProblem: Hessian must be square");
    const double asym = (H - H.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * std::max(1.0, H.cwiseAbs().maxCoeff()))
      throw InvalidArgument("QpProblem: Hessian not symmetric");
    const Eigen::LLT<MatX> llt(H);
    if (llt.info() != Eigen::Success) throw QpIllConditioned("QP Hessian is not positive definite");
    const MatX L = llt.matrixL();
    if (!(L.diagonal().minCoeff() > 1e-7 * L.diagonal().maxCoeff()))
      throw QpIllConditioned("QP Hessian is numerically singular");
    // J0 = L^-T
    J0_ = L.triangularView<Eigen::Lower>().solve(MatX::Identity(H.rows(), H.cols())).transpose();
    j_scale_ = J0_.colwise().squaredNorm().maxCoeff();
    H_cached_ = H;
  }

  // Rotates J so that J'n has zeros below position q, appends the new column
  // of R. Returns false when the constraint is dependent on the active set.
  bool add_constraint(VecX dvec) {
    const int d = static_cast<int>(J_.rows());
    const int q = static_cast<int>(active_.size());
    for (int j = d - 1; j > q; --j) {
      double cc = dvec[j - 1];
      double ss = dvec[j];
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      dvec[j] = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        dvec[j - 1] = -h;
      } else {
        dvec[j - 1] = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = 0; k < d; ++k) {
        const double a = J_(k, j - 1);
        const double b = J_(k, j);
        J_(k, j - 1) = a * cc + b * ss;
        J_(k, j) = xny * (a + J_(k, j - 1)) - b;
      }
    }
    R_.col(q).head(q + 1) = dvec.head(q + 1);
    return std::abs(dvec[q]) > 1e-10 * dvec.head(q + 1).norm();
  }

  void delete_constraint(int pos) {
    const int d = static_cast<int>(J_.rows());
    int q = static_cast<int>(active_.size());
    for (int i = pos; i < q - 1; ++i) {
      active_[i] = active_[i + 1];
      u_[i] = u_[i + 1];
      R_.col(i) = R_.col(i + 1);
    }
    active_.pop_back();
    u_.conservativeResize(q - 1);
    R_.col(q - 1).setZero();
    --q;
    for (int j = pos; j < q; ++j) {
      double cc = R_(j, j);
      double ss = R_(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      R_(j + 1, j) = 0.0;
      if (cc < 0.0) {
        R_(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        R_(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = j + 1; k < q; ++k) {
        const double a = R_(j, k);
        const double b = R_(j + 1, k);
        R_(j, k) = a * cc + b * ss;
        R_(j + 1, k) = xny * (a + R_(j, k)) - b;
      }
      for (int k = 0; k < d; ++k) {
        const double a = J_(k, j);
        const double b = J_(k, j + 1);
        J_(k, j) = a * cc + b * ss;
        J_(k, j + 1) = xny * (J_(k, j) + a) - b;
      }
    }
  }

  MatX H_cached_;
  MatX J0_;
  MatX J_;
  MatX R_;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> As_;
  VecX bs_;
  bool record_trace_ = false;
  double j_scale_ = 1.0;
  std::vector<int> active_;
  VecX u_;
};

}  // namespace idc
