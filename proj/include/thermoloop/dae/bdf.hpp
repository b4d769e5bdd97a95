#pragma once

// Variable-order (1-5), variable-step BDF for F(t, y, y') = 0 in the
// fixed-leading-coefficient form: the history is kept as modified divided
// differences (phi), the predictor is the polynomial through the last k+1
// solutions, and the corrector is y' = y'_pred + cj (y - y_pred).
//
// Two Newton policies share the stepper:
//   Dassl - iteration matrix dF/dy + cj dF/dy' rebuilt whenever cj changes
//   Ida   - matrix reused until cj drifts by more than a factor 1.3 or the
//           Newton iteration fails

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "thermoloop/core/errors.hpp"
#include "thermoloop/nonlinear/solvers.hpp"

namespace thermoloop::dae {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// r = F(t, y, y')
using DaeResidual = std::function<void(double t, const Vec& y, const Vec& yp, Vec& r)>;

enum class DaeMode { Ida, Dassl };

inline const char* mode_name(DaeMode m) { return m == DaeMode::Ida ? "ida" : "dassl"; }

struct DaeConfig {
  DaeMode mode = DaeMode::Ida;
  double h_max = std::numeric_limits<double>::infinity();
  double h_min = 1e-10;
  double eps_soln = 1e-6;  // ATOL = RTOL
  double ida_output_interval = 1.0;
  double dassl_min_output = 0.1;
  int dassl_max_steps = 500;
  int max_order = 5;
  int max_newton = 4;
  double newton_tol = 0.33;
  double safety = 0.9;
  double ida_refresh_ratio = 1.3;
  double growth_deadband = 1.5;
};

/// BDF weights on a uniform grid: (1/h) sum_i alpha_i y_{n-i} approximates y'_n.
inline std::vector<double> bdf_coefficients(int k) {
  if (k < 1 || k > 5) throw ContractViolation("bdf_coefficients: order must be in 1..5, got " + std::to_string(k));
  // Derivative at 0 of the Lagrange basis on nodes 0, -1, ..., -k.
  std::vector<double> alpha(k + 1, 0.0);
  for (int i = 0; i <= k; ++i) {
    const double xi = -i;
    double denom = 1.0;
    for (int m = 0; m <= k; ++m)
      if (m != i) denom *= xi - (-m);
    double deriv = 0.0;
    for (int j = 0; j <= k; ++j) {
      if (j == i) continue;
      double prod = 1.0;
      for (int m = 0; m <= k; ++m)
        if (m != i && m != j) prod *= 0.0 - (-m);
      deriv += prod;
    }
    alpha[i] = deriv / denom;
  }
  return alpha;
}

/// h' = h * clamp(safety * est^(-1/(k+1)), 0.2, 2.5), then clamped to [h_min, h_max].
inline double step_control(double est, double h, int k, double h_min, double h_max, double safety = 0.9) {
  require(h > 0.0 && k >= 1, "step_control: need h > 0 and k >= 1");
  double factor = est > 0.0 ? safety * std::pow(est, -1.0 / (k + 1)) : 2.5;
  factor = std::clamp(factor, 0.2, 2.5);
  return std::clamp(h * factor, h_min, h_max);
}

struct NewtonOutcome {
  bool converged = false;
  int iterations = 0;
  double last_norm = 0.0;
};

/// Modified Newton on G(y) = 0 with a fixed linear solve. `solve` overwrites
/// its argument with M^{-1} r; `scale` multiplies each correction (used when
/// the iteration matrix was built for a different cj). Convergence when the
/// rate-extrapolated WRMS update is below `tol`; failure on divergence
/// (rate > 0.9), non-finite values, or after `max_iter` corrections.
template <class G, class Solve, class Norm>
NewtonOutcome newton_solve(G&& residual, Solve&& solve, Norm&& norm, Vec& y, double scale, double& s_rate,
                           int max_iter = 4, double tol = 0.33, double pnorm = 0.0,
                           const std::function<void(const Vec& delta)>& on_update = {}) {
  NewtonOutcome out;
  const double uround = std::numeric_limits<double>::epsilon();
  double oldnrm = 0.0;
  Vec r = residual(y);
  for (int m = 0; m < max_iter; ++m) {
    if (!r.allFinite()) return out;
    Vec delta = r * scale;
    solve(delta);
    if (!delta.allFinite()) return out;
    y -= delta;
    if (on_update) on_update(delta);
    out.iterations = m + 1;
    const double delnrm = norm(delta);
    out.last_norm = delnrm;
    if (delnrm <= 100.0 * uround * pnorm) {
      out.converged = true;
      return out;
    }
    if (m == 0) {
      oldnrm = delnrm;
    } else {
      const double rate = std::pow(delnrm / oldnrm, 1.0 / m);
      if (rate > 0.9) return out;
      s_rate = rate / (1.0 - rate);
    }
    if (s_rate * delnrm <= tol) {
      out.converged = true;
      return out;
    }
    if (m + 1 < max_iter) r = residual(y);
  }
  return out;
}

struct DaeStats {
  long steps = 0;
  long error_failures = 0;
  long convergence_failures = 0;
  long residual_evals = 0;
  long jacobian_evals = 0;
};

enum class StepStatus { Accepted, StepTooSmall, RepeatedFailure };

class BdfStepper {
 public:
  static constexpr int kMaxOrd = 5;

  BdfStepper(DaeResidual F, double t0, const Vec& y0, const Vec& yp0, DaeConfig cfg, double t_hint, double h0 = 0.0)
      : F_(std::move(F)), cfg_(cfg) {
    require(cfg_.h_min > 0.0 && cfg_.h_min <= cfg_.h_max, "DaeConfig: need 0 < h_min <= h_max");
    require(cfg_.eps_soln > 0.0, "DaeConfig: eps_soln must be positive");
    require(cfg_.max_order >= 1 && cfg_.max_order <= kMaxOrd, "DaeConfig: max_order in 1..5");
    require(y0.size() == yp0.size() && y0.size() >= 1, "BdfStepper: y0/yp0 size mismatch");
    require(t_hint > t0, "BdfStepper: integration direction must be forward");
    reinit(t0, y0, yp0, t_hint, h0);
  }

  /// Restart from a new consistent point at order 1, keeping the Jacobian
  /// cache (flagged stale). A positive h0 replaces the default first step.
  void reinit(double t0, const Vec& y0, const Vec& yp0, double t_hint, double h0 = 0.0) {
    n_ = y0.size();
    t_ = t0;
    y_ = y0;
    yp_ = yp0;
    t_prev_ = t0;
    y_prev_ = y0;
    yp_prev_ = yp0;
    phi_ = Mat::Zero(n_, kMaxOrd + 3);
    psi_.fill(0.0);
    alpha_.fill(0.0);
    beta_.fill(0.0);
    gamma_.fill(0.0);
    sigma_.fill(0.0);
    update_weights(y0);
    // Initial step: 0.001 of the distance, limited so that h*||y'|| <= 0.5.
    double h = 1e-3 * (t_hint - t0);
    const double ypnorm = norm(yp0);
    if (ypnorm > 0.5 / h) h = 0.5 / ypnorm;
    if (h0 > 0.0) h = std::min(h0, t_hint - t0);
    h = std::clamp(h, cfg_.h_min, cfg_.h_max);
    h_ = h;
    phi_.col(1) = y0;
    phi_.col(2) = h * yp0;
    psi_[1] = h;
    k_ = 1;
    kold_ = 0;
    hold_ = 0.0;
    ns_ = 0;
    iphase_ = 0;
    cj_ = 0.0;
    jac_stale_ = true;
    h_used_ = 0.0;
    order_used_ = 1;
    newton_iters_ = 0;
  }

  /// One accepted internal step, never passing `tstop`.
  StepStatus step(double tstop = std::numeric_limits<double>::infinity()) {
    if (std::isfinite(tstop)) {
      require(tstop > t_, "BdfStepper::step: tstop must lie ahead of the current time");
      if (t_ + h_ > tstop || tstop - (t_ + h_) < 1e-10 * std::max(1.0, std::abs(tstop)))
        h_ = tstop - t_;
    }
    update_weights(phi_.col(1));
    const Vec y_start = y_, yp_start = yp_;
    const double t_start = t_;
    int nef = 0, ncf = 0;
    while (true) {
      const int k = k_;
      const int kp1 = k + 1, kp2 = k + 2;
      // Block 1: coefficients.
      if (h_ != hold_ || k != kold_) ns_ = 0;
      ns_ = std::min(ns_ + 1, kold_ + 2);
      const int nsp1 = ns_ + 1;
      if (kp1 >= ns_) {
        beta_[1] = 1.0;
        alpha_[1] = 1.0;
        double temp1 = h_;
        gamma_[1] = 0.0;
        sigma_[1] = 1.0;
        for (int i = 2; i <= kp1; ++i) {
          const double temp2 = psi_[i - 1];
          psi_[i - 1] = temp1;
          beta_[i] = beta_[i - 1] * psi_[i - 1] / temp2;
          temp1 = temp2 + h_;
          alpha_[i] = h_ / temp1;
          sigma_[i] = (i - 1) * sigma_[i - 1] * alpha_[i];
          gamma_[i] = gamma_[i - 1] + alpha_[i - 1] / h_;
        }
        psi_[kp1] = temp1;
      }
      double alphas = 0.0, alpha0 = 0.0;
      for (int i = 1; i <= k; ++i) {
        alphas -= 1.0 / i;
        alpha0 -= alpha_[i];
      }
      cj_ = -alphas / h_;
      const double ck = std::max(std::abs(alpha_[kp1] + alphas - alpha0), alpha_[kp1]);
      if (kp1 >= nsp1)
        for (int i = nsp1; i <= kp1; ++i) phi_.col(i) *= beta_[i];
      const double tn = t_start + h_;

      // Block 2: predictor.
      Vec y = Vec::Zero(n_), yp = Vec::Zero(n_);
      for (int j = 1; j <= kp1; ++j) y += phi_.col(j);
      for (int j = 2; j <= kp1; ++j) yp += gamma_[j] * phi_.col(j);
      const Vec y_pred = y, yp_pred = yp;
      const double pnorm = norm(y);

      // Block 3: corrector.
      bool converged = false;
      int iters_total = 0;
      Vec e;
      for (int attempt = 0; attempt < 2 && !converged; ++attempt) {
        y = y_pred;
        yp = yp_pred;
        bool fresh = false;
        if (needs_jacobian()) {
          if (!assemble_jacobian(tn, y, yp)) break;
          fresh = true;
        }
        e = Vec::Zero(n_);
        const double scale = 2.0 / (1.0 + cj_ / cj_jac_);
        auto resid = [&](const Vec& yy) {
          Vec r(n_);
          Vec ypp = yp_pred + cj_ * (yy - y_pred);
          F_(tn, yy, ypp, r);
          ++stats_.residual_evals;
          return r;
        };
        auto solve = [&](Vec& d) { d = lu_.solve(d); };
        auto nrm = [&](const Vec& d) { return norm(d); };
        auto out = newton_solve(resid, solve, nrm, y, scale, s_rate_, cfg_.max_newton, cfg_.newton_tol, pnorm);
        iters_total += out.iterations;
        if (out.converged) {
          converged = true;
          e = y - y_pred;
          yp = yp_pred + cj_ * e;
        } else if (fresh) {
          break;
        } else {
          jac_stale_ = true;
        }
      }

      if (!converged) {
        restore(kp1, nsp1);
        ++stats_.convergence_failures;
        ++ncf;
        iphase_ = 1;
        jac_stale_ = true;
        if (ncf >= 10) return fail(StepStatus::RepeatedFailure, "10 consecutive Newton failures");
        h_ *= 0.5;
        if (h_ < cfg_.h_min) return fail(StepStatus::StepTooSmall, "step size below h_min after Newton failure");
        continue;
      }

      // Block 4: error estimates at orders k, k-1, k-2.
      const double enorm = norm(e);
      const double erk = sigma_[kp1] * enorm;
      const double terk = (k + 1) * erk;
      double est = erk, erkm1 = 0.0, terkm1 = 0.0;
      int knew = k;
      if (k > 1) {
        Vec delta = phi_.col(kp1) + e;
        erkm1 = sigma_[k] * norm(delta);
        terkm1 = k * erkm1;
        bool lower = false;
        if (k > 2) {
          delta += phi_.col(k);
          const double erkm2 = sigma_[k - 1] * norm(delta);
          const double terkm2 = (k - 1) * erkm2;
          lower = std::max(terkm1, terkm2) <= terk;
        } else {
          lower = terkm1 <= 0.5 * terk;
        }
        if (lower) {
          knew = k - 1;
          est = erkm1;
        }
      }
      const double err = ck * enorm;
      last_error_ = err;
      if (err > 1.0) {
        restore(kp1, nsp1);
        ++stats_.error_failures;
        ++nef;
        iphase_ = 1;
        k_ = nef >= 3 ? 1 : knew;
        h_ *= 0.5;
        if (h_ < cfg_.h_min) return fail(StepStatus::StepTooSmall, "step size below h_min after error test failure");
        continue;
      }

      // Block 5: accepted.
      ++stats_.steps;
      ++jac_age_;
      const int kdiff = k - kold_;
      kold_ = k;
      hold_ = h_;
      h_used_ = h_;
      order_used_ = k;
      newton_iters_ = iters_total;
      t_prev_ = t_start;
      y_prev_ = y_start;
      yp_prev_ = yp_start;
      t_ = tn;
      if (std::isfinite(tstop) && std::abs(t_ - tstop) < 1e-12 * std::max(1.0, std::abs(tstop))) t_ = tstop;
      y_ = y;
      yp_ = yp;

      const int maxord = cfg_.max_order;
      if (knew == k - 1 || k == maxord) iphase_ = 1;
      double hnew = h_;
      if (iphase_ == 0) {
        k_ = k + 1;
        hnew = 2.0 * h_;
      } else {
        int knext = k;
        if (knew == k - 1) {
          knext = k - 1;
          est = erkm1;
        } else if (k != maxord && !(kp1 >= ns_ || kdiff == 1)) {
          const Vec delta = e - phi_.col(kp2);
          const double erkp1 = norm(delta) / (k + 2);
          const double terkp1 = (k + 2) * erkp1;
          if (k > 1) {
            if (terkm1 <= std::min(terk, terkp1)) {
              knext = k - 1;
              est = erkm1;
            } else if (!(terkp1 >= terk)) {
              knext = k + 1;
              est = erkp1;
            }
          } else if (!(terkp1 >= 0.5 * terk)) {
            knext = k + 1;
            est = erkp1;
          }
        }
        k_ = knext;
        hnew = step_control(est, h_, k_, cfg_.h_min, cfg_.h_max, cfg_.safety);
        // Small growth is not taken so the step can stay constant long
        // enough for the order-raise test to run.
        if (hnew > h_ && hnew < cfg_.growth_deadband * h_) hnew = h_;
      }
      h_ = std::clamp(hnew, cfg_.h_min, cfg_.h_max);

      // Update the divided differences (uses the order of the step just taken).
      if (kold_ != maxord) phi_.col(kp2) = e;
      phi_.col(kp1) += e;
      for (int j = kp1 - 1; j >= 1; --j) phi_.col(j) += phi_.col(j + 1);
      return StepStatus::Accepted;
    }
  }

  /// Cubic Hermite interpolation over the last accepted step.
  void interpolate(double t, Vec& y, Vec& yp) const {
    const double h = t_ - t_prev_;
    if (h <= 0.0 || t == t_) {
      y = y_;
      yp = yp_;
      return;
    }
    const double s = (t - t_prev_) / h;
    const double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s;
    const double h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
    y = h00 * y_prev_ + h10 * h * yp_prev_ + h01 * y_ + h11 * h * yp_;
    const double d00 = (6 * s * s - 6 * s) / h, d10 = 3 * s * s - 4 * s + 1;
    const double d01 = (-6 * s * s + 6 * s) / h, d11 = 3 * s * s - 2 * s;
    yp = d00 * y_prev_ + d10 * yp_prev_ + d01 * y_ + d11 * yp_;
  }

  double t() const { return t_; }
  double t_prev() const { return t_prev_; }
  const Vec& y() const { return y_; }
  const Vec& yp() const { return yp_; }
  double h_next() const { return h_; }
  double h_used() const { return h_used_; }
  int order() const { return order_used_; }
  int next_order() const { return k_; }
  int newton_iters() const { return newton_iters_; }
  int jacobian_age() const { return jac_age_; }
  double last_error() const { return last_error_; }
  const DaeStats& stats() const { return stats_; }
  const std::string& failure() const { return failure_; }
  const DaeConfig& config() const { return cfg_; }
  double norm(const Vec& v) const { return std::sqrt((v.array() / wt_.array()).square().mean()); }

 private:
  void update_weights(const Vec& y) { wt_ = (cfg_.eps_soln * y.array().abs() + cfg_.eps_soln).matrix(); }

  bool needs_jacobian() const {
    if (jac_stale_) return true;
    if (cfg_.mode == DaeMode::Dassl) return cj_ != cj_jac_;
    const double ratio = cj_ / cj_jac_;
    return ratio > cfg_.ida_refresh_ratio || ratio < 1.0 / cfg_.ida_refresh_ratio;
  }

  bool assemble_jacobian(double t, const Vec& y, const Vec& yp) {
    Vec r0(n_);
    F_(t, y, yp, r0);
    ++stats_.residual_evals;
    if (!r0.allFinite()) return false;
    Mat J(n_, n_);
    const double sq = std::sqrt(std::numeric_limits<double>::epsilon());
    for (Eigen::Index i = 0; i < n_; ++i) {
      double del = sq * std::max({std::abs(y(i)), std::abs(h_ * yp(i)), wt_(i)});
      if (h_ * yp(i) < 0.0) del = -del;
      const double yi = y(i);
      del = (yi + del) - yi;
      Vec yy = y, ypp = yp, r(n_);
      yy(i) += del;
      ypp(i) += cj_ * del;
      F_(t, yy, ypp, r);
      ++stats_.residual_evals;
      J.col(i) = (r - r0) / del;
    }
    if (!J.allFinite()) return false;
    lu_.compute(J);
    cj_jac_ = cj_;
    jac_stale_ = false;
    jac_age_ = 0;
    s_rate_ = 100.0;
    ++stats_.jacobian_evals;
    return true;
  }

  void restore(int kp1, int nsp1) {
    if (kp1 >= nsp1)
      for (int i = nsp1; i <= kp1; ++i) phi_.col(i) /= beta_[i];
    for (int i = 2; i <= kp1; ++i) psi_[i - 1] = psi_[i] - h_;
  }

  StepStatus fail(StepStatus s, const std::string& why) {
    failure_ = why + " at t=" + std::to_string(t_);
    return s;
  }

  DaeResidual F_;
  DaeConfig cfg_;
  Eigen::Index n_ = 0;
  double t_ = 0.0, t_prev_ = 0.0;
  Vec y_, yp_, y_prev_, yp_prev_, wt_;
  Mat phi_;
  std::array<double, kMaxOrd + 3> psi_{}, alpha_{}, beta_{}, gamma_{}, sigma_{};
  double h_ = 0.0, hold_ = 0.0, cj_ = 0.0, cj_jac_ = 1.0, s_rate_ = 100.0;
  int k_ = 1, kold_ = 0, ns_ = 0, iphase_ = 0;
  bool jac_stale_ = true;
  int jac_age_ = 0;
  Eigen::PartialPivLU<Mat> lu_;
  double h_used_ = 0.0, last_error_ = 0.0;
  int order_used_ = 1, newton_iters_ = 0;
  DaeStats stats_;
  std::string failure_;
};

// ---------------------------------------------------------------------------

struct DaeRecord {
  double t = 0.0;
  Vec y;
  Vec yp;
  double h_used = 0.0;
  int order = 0;
  int newton_iters = 0;
  int jacobian_age = 0;
};

struct DaeTrajectory {
  std::vector<DaeRecord> rows;
  std::vector<DaeRecord> internal;  // every accepted internal step
  bool failed = false;
  std::string failure;
  DaeStats stats;
};

struct DaeProblem {
  DaeResidual residual;
  double t0 = 0.0;
  Vec y0;
  Vec yp0;
};

namespace detail {
inline DaeRecord record_from(const BdfStepper& s, double t, const Vec& y, const Vec& yp) {
  return DaeRecord{t, y, yp, s.h_used(), s.order(), s.newton_iters(), s.jacobian_age()};
}
}  // namespace detail

/// Values at every t_eval point (strictly increasing, first >= t0),
/// interpolated from internal steps.
inline DaeTrajectory integrate_ida(const DaeProblem& pb, const std::vector<double>& t_eval, const DaeConfig& cfg) {
  require(!t_eval.empty(), "integrate_ida: empty t_eval");
  for (std::size_t i = 1; i < t_eval.size(); ++i)
    require(t_eval[i] > t_eval[i - 1], "integrate_ida: t_eval must be strictly increasing");
  require(t_eval.front() >= pb.t0, "integrate_ida: t_eval starts before t0");
  DaeTrajectory out;
  const double t_end = t_eval.back();
  if (t_end == pb.t0) {
    out.rows.push_back(DaeRecord{pb.t0, pb.y0, pb.yp0, 0.0, 1, 0, 0});
    return out;
  }
  BdfStepper st(pb.residual, pb.t0, pb.y0, pb.yp0, cfg, t_end);
  Vec y, yp;
  for (double te : t_eval) {
    while (st.t() < te) {
      if (st.step(t_end) != StepStatus::Accepted) {
        out.failed = true;
        out.failure = st.failure();
        out.stats = st.stats();
        return out;
      }
      out.internal.push_back(detail::record_from(st, st.t(), st.y(), st.yp()));
    }
    if (te == pb.t0) {
      out.rows.push_back(DaeRecord{te, pb.y0, pb.yp0, 0.0, 1, 0, 0});
      continue;
    }
    st.interpolate(te, y, yp);
    out.rows.push_back(detail::record_from(st, te, y, yp));
  }
  out.stats = st.stats();
  return out;
}

/// Steps toward targets t0 + increment, t0 + 2*increment, ...; a point is
/// recorded when at least `dassl_min_output` has elapsed since the last
/// record (the start and final points are always recorded). Each target
/// may consume at most `dassl_max_steps` internal steps.
inline DaeTrajectory integrate_dassl(const DaeProblem& pb, double t_end, double increment, const DaeConfig& cfg) {
  require(t_end > pb.t0, "integrate_dassl: t_end must exceed t0");
  require(increment > 0.0, "integrate_dassl: increment must be positive");
  DaeTrajectory out;
  out.rows.push_back(DaeRecord{pb.t0, pb.y0, pb.yp0, 0.0, 1, 0, 0});
  BdfStepper st(pb.residual, pb.t0, pb.y0, pb.yp0, cfg, t_end);
  double last_record = pb.t0;
  Vec y, yp;
  for (long i = 1;; ++i) {
    const double target = std::min(pb.t0 + i * increment, t_end);
    int count = 0;
    while (st.t() < target) {
      if (count >= cfg.dassl_max_steps) {
        out.failed = true;
        out.failure = "exceeded " + std::to_string(cfg.dassl_max_steps) + " internal steps before t=" + std::to_string(target);
        out.stats = st.stats();
        return out;
      }
      if (st.step(t_end) != StepStatus::Accepted) {
        out.failed = true;
        out.failure = st.failure();
        out.stats = st.stats();
        return out;
      }
      ++count;
      out.internal.push_back(detail::record_from(st, st.t(), st.y(), st.yp()));
    }
    const bool final = target >= t_end;
    if (final || target - last_record >= cfg.dassl_min_output - 1e-12) {
      st.interpolate(target, y, yp);
      out.rows.push_back(detail::record_from(st, target, y, yp));
      last_record = target;
    }
    if (final) break;
  }
  out.stats = st.stats();
  return out;
}

}  // namespace thermoloop::dae
