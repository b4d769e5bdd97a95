#pragma once

// Powell hybrid (dogleg + Broyden) root finding, bounded Levenberg-Marquardt
// least squares, and the weighted RMS norm.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>

#include "thermoloop/core/errors.hpp"

namespace thermoloop::nonlinear {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Residual = std::function<Vec(const Vec&)>;

inline double wrms_norm(const Vec& v, const Vec& y_ref, double atol, double rtol) {
  require(v.size() == y_ref.size(), "wrms_norm: length mismatch");
  require(atol > 0.0 && rtol > 0.0, "wrms_norm: tolerances must be positive");
  if (v.size() == 0) return 0.0;
  const Vec w = (rtol * y_ref.array().abs() + atol).matrix();
  return std::sqrt((v.array() / w.array()).square().mean());
}

struct RootProblem {
  Residual residual;
  Vec guess;
  std::optional<Vec> lower;
  std::optional<Vec> upper;
  double tol = 1e-6;
  int max_evals = 200;
  double typical_scale = 1.0;  // floor for the FD perturbation magnitude
  const Mat* jacobian_hint = nullptr;  // optional warm-start Jacobian
};

struct SolveReport {
  Vec x;
  double residual_norm = std::numeric_limits<double>::infinity();  // infinity norm
  int evaluations = 0;
  int iterations = 0;
  bool converged = false;
  bool stationary = false;
  std::string method;
  Mat jacobian;  // last Jacobian approximation, reusable as a warm start
};

namespace detail {

inline Mat fd_jacobian(const Residual& r, const Vec& x, const Vec& fx, double typical, int& evals,
                       const std::optional<Vec>& lower = {}, const std::optional<Vec>& upper = {},
                       Eigen::Index m = -1) {
  const double sq = std::sqrt(std::numeric_limits<double>::epsilon());
  Mat J(m < 0 ? fx.size() : m, x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    double h = sq * std::max(std::abs(x(j)), typical);
    Vec xp = x;
    // Step backwards when a forward step would leave the box.
    if (upper && x(j) + h > (*upper)(j)) h = -h;
    if (lower && x(j) + h < (*lower)(j)) h = std::abs(h);
    xp(j) += h;
    Vec fp = r(xp);
    ++evals;
    J.col(j) = (fp - fx) / h;
  }
  return J;
}

inline double inf_norm(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

/// Dogleg step for min ||f + J p|| subject to ||p|| <= delta.
inline Vec dogleg(const Mat& J, const Vec& f, double delta, bool& singular) {
  Eigen::ColPivHouseholderQR<Mat> qr(J);
  singular = qr.rank() < J.cols();
  const Vec g = J.transpose() * f;  // gradient of 0.5||f+Jp||^2 at p=0
  Vec p_gn;
  if (!singular) {
    p_gn = -qr.solve(f);
    if (p_gn.allFinite() && p_gn.norm() <= delta) return p_gn;
  }
  const double gn = g.norm();
  if (gn == 0.0) return Vec::Zero(J.cols());
  const double Jg = (J * g).squaredNorm();
  const double t = Jg > 0.0 ? gn * gn / Jg : delta / gn;
  Vec p_sd = -t * g;
  if (singular || !p_gn.allFinite() || p_sd.norm() >= delta) return p_sd * std::min(1.0, delta / p_sd.norm());
  // Walk from the Cauchy point toward the Gauss-Newton point until the boundary.
  const Vec d = p_gn - p_sd;
  const double a = d.squaredNorm(), b = 2.0 * p_sd.dot(d), c = p_sd.squaredNorm() - delta * delta;
  const double tau = (-b + std::sqrt(std::max(b * b - 4 * a * c, 0.0))) / (2 * a);
  return p_sd + std::clamp(tau, 0.0, 1.0) * d;
}

}  // namespace detail

/// Square-system root finder. Converged iff ||r||_inf <= tol.
inline SolveReport powell_hybrid(const RootProblem& pb) {
  const Eigen::Index n = pb.guess.size();
  require(n >= 1, "powell_hybrid: empty unknown vector");
  SolveReport rep;
  rep.method = "powell_hybrid";
  Vec x = pb.guess;
  Vec f = pb.residual(x);
  rep.evaluations = 1;
  require(f.size() == n, "powell_hybrid: residual length must equal unknown count");
  if (!f.allFinite()) throw NumericalFailure("powell_hybrid: non-finite residual at initial guess");

  Vec best_x = x, best_f = f;
  auto finish = [&](bool conv) {
    rep.x = best_x;
    rep.residual_norm = detail::inf_norm(best_f);
    rep.converged = conv;
    return rep;
  };
  if (detail::inf_norm(f) <= pb.tol) {
    rep.jacobian = pb.jacobian_hint ? *pb.jacobian_hint : Mat();
    return finish(true);
  }

  Mat J;
  if (pb.jacobian_hint && pb.jacobian_hint->rows() == n && pb.jacobian_hint->cols() == n)
    J = *pb.jacobian_hint;
  else
    J = detail::fd_jacobian(pb.residual, x, f, pb.typical_scale, rep.evaluations);

  double delta = std::max(0.1 * x.norm(), 1.0);
  int fails = 0, reinits = 0;
  while (rep.evaluations < pb.max_evals) {
    ++rep.iterations;
    bool singular = false;
    Vec p = detail::dogleg(J, f, delta, singular);
    if (singular || !p.allFinite() || p.norm() == 0.0) {
      if (reinits >= 2) break;
      J = detail::fd_jacobian(pb.residual, x, f, pb.typical_scale, rep.evaluations);
      ++reinits;
      if (singular && detail::dogleg(J, f, delta, singular).norm() == 0.0) break;
      continue;
    }
    Vec x_new = x + p;
    Vec f_new = pb.residual(x_new);
    ++rep.evaluations;
    if (!f_new.allFinite()) {
      delta = 0.25 * p.norm();
      ++fails;
      continue;
    }
    const double pred = f.squaredNorm() - (f + J * p).squaredNorm();
    const double actual = f.squaredNorm() - f_new.squaredNorm();
    const double rho = pred > 0.0 ? actual / pred : -1.0;

    // Broyden rank-one update whether or not the step is taken.
    const Vec y = f_new - f;
    J += ((y - J * p) * p.transpose()) / p.squaredNorm();

    if (rho < 0.1) {
      delta = 0.5 * p.norm();
      ++fails;
    } else {
      fails = 0;
      if (rho > 0.75) delta = std::max(delta, 2.0 * p.norm());
    }
    if (actual > 0.0) {
      x = x_new;
      f = f_new;
      if (f.squaredNorm() < best_f.squaredNorm()) {
        best_x = x;
        best_f = f;
      }
      if (detail::inf_norm(f) <= pb.tol) {
        rep.jacobian = J;
        return finish(true);
      }
    }
    if (fails >= 3 || delta < 1e-14 * std::max(1.0, x.norm())) {
      if (reinits >= 3) break;
      J = detail::fd_jacobian(pb.residual, x, f, pb.typical_scale, rep.evaluations);
      ++reinits;
      fails = 0;
      delta = std::max(delta, 1e-3 * std::max(1.0, x.norm()));
    }
  }
  rep.jacobian = J;
  return finish(false);
}

/// Levenberg-Marquardt on 0.5||r(x)||^2 with every iterate projected into
/// [lower, upper]. `converged` means the residual met tol; `stationary`
/// means the projected gradient or step fell below tol.
inline SolveReport bounded_least_squares(const RootProblem& pb,
                                         const std::function<void(const Vec&)>& on_iterate = {}) {
  const Eigen::Index n = pb.guess.size();
  require(n >= 1, "bounded_least_squares: empty unknown vector");
  const Vec lo = pb.lower.value_or(Vec::Constant(n, -std::numeric_limits<double>::infinity()));
  const Vec hi = pb.upper.value_or(Vec::Constant(n, std::numeric_limits<double>::infinity()));
  require(lo.size() == n && hi.size() == n, "bounded_least_squares: bound length mismatch");
  require((lo.array() < hi.array()).all(), "bounded_least_squares: lower must be below upper");
  auto project = [&](const Vec& v) { return Vec(v.cwiseMax(lo).cwiseMin(hi)); };

  SolveReport rep;
  rep.method = "bounded_least_squares";
  Vec x = project(pb.guess);
  if (on_iterate) on_iterate(x);
  Vec f = pb.residual(x);
  rep.evaluations = 1;
  if (!f.allFinite()) throw NumericalFailure("bounded_least_squares: non-finite residual at guess");
  if (detail::inf_norm(f) <= pb.tol) {
    rep.x = x;
    rep.residual_norm = detail::inf_norm(f);
    rep.converged = rep.stationary = true;
    return rep;
  }
  Mat J = (pb.jacobian_hint && pb.jacobian_hint->rows() == f.size() && pb.jacobian_hint->cols() == n)
              ? *pb.jacobian_hint
              : detail::fd_jacobian(pb.residual, x, f, pb.typical_scale, rep.evaluations, lo, hi, f.size());
  double lambda = 1e-3;
  bool fresh_jacobian = !(pb.jacobian_hint);
  while (rep.evaluations < pb.max_evals) {
    ++rep.iterations;
    const Vec g = J.transpose() * f;
    // Projected gradient: zero components pushing against an active bound.
    Vec pg = g;
    for (Eigen::Index i = 0; i < n; ++i)
      if ((x(i) <= lo(i) && g(i) > 0) || (x(i) >= hi(i) && g(i) < 0)) pg(i) = 0.0;
    const Vec scale_x = (x.cwiseAbs().array().max(pb.typical_scale)).matrix();
    if ((pg.cwiseProduct(scale_x)).cwiseAbs().maxCoeff() <= pb.tol * std::max(1.0, f.norm()) * 1e-3) {
      if (fresh_jacobian) {
        rep.stationary = true;
        break;
      }
      J = detail::fd_jacobian(pb.residual, x, f, pb.typical_scale, rep.evaluations, lo, hi, f.size());
      fresh_jacobian = true;
      continue;
    }
    Mat A = J.transpose() * J;
    const Vec diag = A.diagonal().cwiseMax(1e-300);
    bool accepted = false;
    for (int attempt = 0; attempt < 12 && rep.evaluations < pb.max_evals; ++attempt) {
      Mat Ad = A;
      Ad.diagonal() += lambda * diag;
      Vec step = Ad.ldlt().solve(-g);
      if (!step.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      Vec x_new = project(x + step);
      Vec real_step = x_new - x;
      if ((real_step.cwiseAbs().array() <= 1e-15 * scale_x.array()).all()) {
        rep.stationary = true;
        break;
      }
      Vec f_new = pb.residual(x_new);
      ++rep.evaluations;
      if (f_new.allFinite() && f_new.squaredNorm() < f.squaredNorm()) {
        // Broyden refresh keeps evaluation count low between FD rebuilds.
        J += ((f_new - f - J * real_step) * real_step.transpose()) / real_step.squaredNorm();
        fresh_jacobian = false;
        x = x_new;
        f = f_new;
        if (on_iterate) on_iterate(x);
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (detail::inf_norm(f) <= pb.tol) {
      rep.converged = true;
      break;
    }
    if (rep.stationary) break;
    if (!accepted) {
      if (fresh_jacobian) {
        rep.stationary = true;
        break;
      }
      J = detail::fd_jacobian(pb.residual, x, f, pb.typical_scale, rep.evaluations, lo, hi, f.size());
      fresh_jacobian = true;
      lambda = 1e-3;
    }
  }
  rep.x = x;
  rep.residual_norm = detail::inf_norm(f);
  rep.converged = rep.residual_norm <= pb.tol;
  rep.jacobian = J;
  return rep;
}

}  // namespace thermoloop::nonlinear
