#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

namespace coldloop {

enum class FitStatus {
  converged,
  max_iterations,
  parameter_at_bound,
  ill_conditioned,
  not_run
};

inline const char* to_string(FitStatus s) {
  switch (s) {
    case FitStatus::converged: return "converged";
    case FitStatus::max_iterations: return "max_iterations";
    case FitStatus::parameter_at_bound: return "parameter_at_bound";
    case FitStatus::ill_conditioned: return "ill_conditioned";
    default: return "not_run";
  }
}

struct LsqOptions {
  int max_iterations = 200;
  double step_tol = 1e-10;   // relative parameter step
  double grad_tol = 1e-8;    // infinity norm of J^T r
  double fd_step = 1e-6;     // relative finite-difference step
  double max_condition = 1e14;
};

struct LsqResult {
  Eigen::VectorXd params;
  Eigen::MatrixXd covariance;  // (J^T J)^{-1} of weighted residuals
  double chi2 = 0.0;
  double residual_rms = 0.0;
  FitStatus status = FitStatus::not_run;
  int iterations = 0;
  double condition = 0.0;
};

/// Residual function: weighted residuals r(p), sum r^2 minimized.
using ResidualFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

namespace detail {

inline Eigen::MatrixXd fd_jacobian(const ResidualFn& f, const Eigen::VectorXd& p,
                                   const Eigen::VectorXd& r0, double rel_step) {
  const auto n = static_cast<Eigen::Index>(p.size());
  Eigen::MatrixXd jac(r0.size(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = rel_step * std::max(std::abs(p[j]), 1e-30);
    Eigen::VectorXd pp = p;
    pp[j] += h;
    Eigen::VectorXd pm = p;
    pm[j] -= h;
    jac.col(j) = (f(pp) - f(pm)) / (2.0 * h);
  }
  return jac;
}

}  // namespace detail

/// Levenberg-Marquardt with box bounds (projected steps) and a
/// finite-difference Jacobian. Bounds may be +-inf.
inline LsqResult levenberg_marquardt(const ResidualFn& f, Eigen::VectorXd p,
                                     const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                                     const LsqOptions& opt = {}) {
  const auto n = static_cast<Eigen::Index>(p.size());
  if (lower.size() != n || upper.size() != n)
    throw std::invalid_argument("levenberg_marquardt: bound size mismatch");
  auto clamp = [&](Eigen::VectorXd v) {
    for (Eigen::Index i = 0; i < n; ++i) v[i] = std::min(std::max(v[i], lower[i]), upper[i]);
    return v;
  };
  p = clamp(p);

  LsqResult res;
  Eigen::VectorXd r = f(p);
  double cost = 0.5 * r.squaredNorm();
  double lambda = 1e-3;
  bool converged = false;

  Eigen::MatrixXd jac;
  bool jac_fresh = false;
  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    res.iterations = iter + 1;
    if (!jac_fresh) {
      jac = detail::fd_jacobian(f, p, r, opt.fd_step);
      jac_fresh = true;
    }
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd jtr = jac.transpose() * r;
    if (jtr.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      converged = true;
      break;
    }

    Eigen::MatrixXd damped = jtj;
    for (Eigen::Index i = 0; i < n; ++i)
      damped(i, i) += lambda * std::max(jtj(i, i), 1e-30);
    const Eigen::VectorXd step = damped.ldlt().solve(-jtr);
    const Eigen::VectorXd p_try = clamp(p + step);
    const Eigen::VectorXd actual = p_try - p;

    const Eigen::VectorXd r_try = f(p_try);
    const double cost_try = 0.5 * r_try.squaredNorm();
    if (cost_try < cost) {
      const double rel_step =
          actual.norm() / std::max(p.norm(), std::numeric_limits<double>::min());
      p = p_try;
      r = r_try;
      cost = cost_try;
      lambda = std::max(lambda / 3.0, 1e-12);
      jac_fresh = false;
      if (rel_step < opt.step_tol) {
        converged = true;
        break;
      }
    } else {
      lambda *= 4.0;
      if (lambda > 1e12) break;  // stuck
    }
  }

  if (!jac_fresh) jac = detail::fd_jacobian(f, p, r, opt.fd_step);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  res.condition = (smin > 0.0) ? smax / smin : std::numeric_limits<double>::infinity();

  res.params = p;
  res.chi2 = 2.0 * cost;
  res.residual_rms = std::sqrt(r.squaredNorm() / static_cast<double>(r.size()));

  // covariance via pseudo-inverse of J^T J, guarding tiny singular values
  Eigen::VectorXd inv2 = sv;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    const double s = sv(i);
    inv2(i) = (s > smax * 1e-12) ? 1.0 / (s * s) : 0.0;
  }
  res.covariance = svd.matrixV() * inv2.asDiagonal() * svd.matrixV().transpose();

  bool at_bound = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double span = std::max(std::abs(p[i]), 1.0);
    if ((std::isfinite(lower[i]) && p[i] - lower[i] < 1e-12 * span) ||
        (std::isfinite(upper[i]) && upper[i] - p[i] < 1e-12 * span))
      at_bound = true;
  }

  if (res.condition > opt.max_condition)
    res.status = FitStatus::ill_conditioned;
  else if (at_bound)
    res.status = FitStatus::parameter_at_bound;
  else if (converged)
    res.status = FitStatus::converged;
  else
    res.status = FitStatus::max_iterations;
  return res;
}

inline Eigen::VectorXd unbounded(Eigen::Index n, double sign) {
  return Eigen::VectorXd::Constant(n, sign * std::numeric_limits<double>::infinity());
}

}  // namespace coldloop
