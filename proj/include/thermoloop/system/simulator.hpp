#pragma once

// System-level stepping: junction-pressure solve, surrogate evaluation and
// the mass/energy right-hand side, advanced in one of three modes.
//
// The heat-exchanger latents are auxiliary state. Each evaluation advances
// them from the last committed point to the requested time with forcing
// [x, s], where x holds the air-side boundary at t and the refrigerant-side
// inputs of the last committed evaluation, and s is the solver's (M_r, E_hx)
// normalized by the exchanger model.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "thermoloop/corrector/corrector.hpp"
#include "thermoloop/dae/bdf.hpp"
#include "thermoloop/nonlinear/solvers.hpp"
#include "thermoloop/pinode/model.hpp"
#include "thermoloop/plant/dataset.hpp"
#include "thermoloop/plant/profile.hpp"
#include "thermoloop/surrogate/static_models.hpp"
#include "thermoloop/system/topology.hpp"

namespace thermoloop::system {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using nn::Tensor;
using pinode::PinodeModel;
using surrogate::StaticModel;

enum class SolverMode { Algebraic, Ida, Dassl };

inline const char* solver_name(SolverMode m) {
  switch (m) {
    case SolverMode::Algebraic: return "algebraic";
    case SolverMode::Ida: return "ida";
    default: return "dassl";
  }
}

inline SolverMode parse_solver(const std::string& s) {
  if (s == "algebraic") return SolverMode::Algebraic;
  if (s == "ida") return SolverMode::Ida;
  if (s == "dassl") return SolverMode::Dassl;
  throw ContractViolation("unknown solver mode '" + s + "' (expected algebraic, ida or dassl)");
}

struct HighResConfig {
  double tau = 5.0;  // jump threshold on |du|, strict
  int n_pre = 5;
  int n_post = 50;
  double dt_high = 2.5;
  double dt_low = 7.5;
  double dassl_increment_factor = 0.5;
  double dassl_min_output_factor = 0.1;

  void validate() const {
    require(tau > 0.0, "HighResConfig: tau must be positive");
    require(n_pre >= 0 && n_post >= 0, "HighResConfig: window extents must be non-negative");
    require(dt_high > 0.0 && dt_low > 0.0, "HighResConfig: target spacings must be positive");
    require(dassl_increment_factor > 0.0 && dassl_min_output_factor > 0.0, "HighResConfig: DASSL factors must be positive");
  }
};

struct SystemConfig {
  SolverMode mode = SolverMode::Algebraic;
  double eps_dt = 1.1e-3;   // latent error tolerance for step adaptation
  double eps_soln = 1e-6;   // pressure-solve tolerance (and DAE atol = rtol)
  double m_scale = 0.01;    // kg/s
  double dt_min = 0.1;      // algebraic-mode lower clamp; upper is the target spacing
  double p_lower = 2e5, p_upper = 6e6;
  double p_liq0 = 2.5e6, p_suct0 = 5e5;
  int pressure_max_evals = 200;
  double ida_output_interval = 10.0;  // caps the t_eval spacing
  double dassl_min_output = 0.0;      // <= 0: factor times the target spacing
  dae::DaeConfig dae;
  HighResConfig highres;

  void validate() const {
    require(eps_dt > 0.0 && eps_soln > 0.0 && m_scale > 0.0, "SystemConfig: tolerances and m_scale must be positive");
    require(dt_min > 0.0, "SystemConfig: dt_min must be positive");
    require(p_lower > 0.0 && p_lower < p_upper, "SystemConfig: pressure bounds");
    require(ida_output_interval > 0.0, "SystemConfig: IDA output interval must be positive");
    require(dae.h_min > 0.0 && dae.h_min <= dae.h_max, "SystemConfig: need 0 < h_min <= h_max");
    require(dae.dassl_max_steps >= 1, "SystemConfig: DASSL step limit must be positive");
    highres.validate();
  }

  /// DAE settings with the solution tolerance applied.
  dae::DaeConfig dae_config() const {
    dae::DaeConfig d = dae;
    d.mode = mode == SolverMode::Dassl ? dae::DaeMode::Dassl : dae::DaeMode::Ida;
    d.eps_soln = eps_soln;
    return d;
  }
};

/// Learned components plus the line conductances of the piping, which are
/// network parameters rather than learned quantities.
struct SurrogateSet {
  const PinodeModel* condenser = nullptr;
  const PinodeModel* evaporator = nullptr;
  const StaticModel* compressor = nullptr;
  const StaticModel* valve = nullptr;
  double G_dis = 2e-7, G_liq = 5e-8, G_suct = 2e-7;

  const PinodeModel& model(HxKind k) const { return k == HxKind::Condenser ? *condenser : *evaporator; }

  void validate() const {
    require(condenser && evaporator && compressor && valve, "SurrogateSet: every model must be provided");
    require(compressor->kind == surrogate::StaticKind::Compressor && valve->kind == surrogate::StaticKind::Valve,
            "SurrogateSet: static model kinds swapped");
    require(G_dis > 0.0 && G_liq > 0.0 && G_suct > 0.0, "SurrogateSet: line conductances must be positive");
  }
};

// ---------------------------------------------------------------------------
// Junction pressures

/// Scaled mass imbalance at one node.
inline double node_residual(double m_in, double m_out, double m_scale) { return (m_in - m_out) / m_scale; }

/// Exchanger-side values the junction balance needs, besides the pressures.
struct JunctionInputs {
  Vec pN, hN;          // per exchanger outlet pressure and enthalpy
  Vec speed, opening;  // actuation
};

struct JunctionFlows {
  Vec m_comp, h_comp;  // per compressor
  Vec m_cond_out;      // per condenser, into the liquid manifold
  Vec m_valve;         // per valve
  Vec m_evap_out;      // per evaporator, into the suction manifold
  double h_liq = 0.0, h_suct = 0.0;
};

namespace detail {
/// Flow-weighted enthalpy of the streams entering a manifold; plain mean
/// when nothing flows in.
inline double mix(const Vec& flows, const Vec& h) {
  double m = 0.0, mh = 0.0;
  for (Eigen::Index i = 0; i < flows.size(); ++i)
    if (flows(i) > 0.0) {
      m += flows(i);
      mh += flows(i) * h(i);
    }
  return m > 0.0 ? mh / m : h.mean();
}
}  // namespace detail

/// Flows at pressures p = [p_dis_1..p_dis_nc, p_liq, p_suct].
inline JunctionFlows junction_flows(const Topology& topo, const SurrogateSet& m, const JunctionInputs& in, const Vec& p) {
  require(p.size() == topo.n_p(), "junction_flows: expected " + std::to_string(topo.n_p()) + " pressures");
  const int nc = topo.n_c, nv = topo.n_v;
  const double p_liq = p(topo.p_liq_index()), p_suct = p(topo.p_suct_index());
  JunctionFlows f;
  f.m_cond_out.resize(nc);
  f.m_evap_out.resize(nv);
  Vec hc(nc), he(nv);
  for (int k = 0; k < nc; ++k) {
    f.m_cond_out(k) = m.G_liq * (in.pN(topo.condenser(k)) - p_liq);
    hc(k) = in.hN(topo.condenser(k));
  }
  for (int j = 0; j < nv; ++j) {
    f.m_evap_out(j) = m.G_suct * (in.pN(topo.evaporator(j)) - p_suct);
    he(j) = in.hN(topo.evaporator(j));
  }
  f.h_liq = detail::mix(f.m_cond_out, hc);
  f.h_suct = detail::mix(f.m_evap_out, he);
  f.m_comp.resize(nc);
  f.h_comp.resize(nc);
  for (int k = 0; k < nc; ++k) {
    const surrogate::FlowResult r = m.compressor->compressor_eval(p_suct, p(topo.p_dis_index(k)), f.h_suct, in.speed(k));
    f.m_comp(k) = r.m_dot;
    f.h_comp(k) = r.h_out;
  }
  f.m_valve.resize(nv);
  for (int j = 0; j < nv; ++j)
    f.m_valve(j) = m.valve->valve_eval(p_liq, in.pN(topo.evaporator(j)), f.h_liq, in.opening(j)).m_dot;
  return f;
}

/// r_i = (m_in - m_out) / m_scale at every pressure node: compressor
/// discharge against condenser inlet per branch, condenser outflow against
/// valve flow at the liquid manifold, evaporator outflow against compressor
/// intake at the suction manifold.
inline Vec pressure_residuals(const Topology& topo, const SurrogateSet& m, const JunctionInputs& in, const Vec& p,
                              double m_scale) {
  const JunctionFlows f = junction_flows(topo, m, in, p);
  Vec r(topo.n_p());
  for (int k = 0; k < topo.n_c; ++k) {
    const double into_cond = m.G_dis * (p(topo.p_dis_index(k)) - in.pN(topo.condenser(k)));
    r(topo.p_dis_index(k)) = node_residual(f.m_comp(k), into_cond, m_scale);
  }
  r(topo.p_liq_index()) = node_residual(f.m_cond_out.sum(), f.m_valve.sum(), m_scale);
  r(topo.p_suct_index()) = node_residual(f.m_evap_out.sum(), f.m_comp.sum(), m_scale);
  return r;
}

// ---------------------------------------------------------------------------
// High-resolution windows and step adaptation

struct HighResMask {
  std::vector<bool> mask;
  std::vector<double> dt_target;
  std::vector<long> jumps;  // sample index at which the new value takes effect
  long window_start(long j, int n_pre) const { return std::max(0L, j - n_pre); }
};

/// Marks [j - n_pre, j + n_post] around every sample j where some channel
/// changes by more than tau.
inline HighResMask highres_mask(const Mat& u, const HighResConfig& c) {
  c.validate();
  require(u.rows() >= 2, "highres_mask: profile needs at least two samples");
  const long n = u.rows();
  HighResMask m;
  m.mask.assign(n, false);
  for (long i = 1; i < n; ++i)
    if ((u.row(i) - u.row(i - 1)).cwiseAbs().maxCoeff() > c.tau) m.jumps.push_back(i);
  for (long j : m.jumps)
    for (long i = std::max(0L, j - c.n_pre); i <= std::min(n - 1, j + static_cast<long>(c.n_post)); ++i) m.mask[i] = true;
  m.dt_target.resize(n);
  for (long i = 0; i < n; ++i) m.dt_target[i] = m.mask[i] ? c.dt_high : c.dt_low;
  return m;
}

/// dt_new = 2.5 (0.6 eps_dt dt0 / err)^(1/4), clamped to [lo, hi]; err = 0
/// goes straight to hi.
inline double dt_from_error(double err, double dt0, double eps_dt, double lo, double hi) {
  require(dt0 > 0.0 && lo > 0.0 && lo <= hi, "dt_from_error: need dt0 > 0 and 0 < lo <= hi");
  if (!(err > 0.0)) return hi;
  const double dt = 2.5 * std::pow(0.6 * eps_dt * dt0 / err, 0.25);
  return std::clamp(dt, lo, hi);
}

/// ||z4 - z5|| for one Runge-Kutta-Fehlberg 4(5) step of z' = f(z) over dt.
inline double rk45_error(const std::function<Mat(const Mat&)>& f, const Mat& z, double dt) {
  const Mat k1 = f(z);
  const Mat k2 = f(z + dt * (1.0 / 4.0) * k1);
  const Mat k3 = f(z + dt * (3.0 / 32.0 * k1 + 9.0 / 32.0 * k2));
  const Mat k4 = f(z + dt * (1932.0 / 2197.0 * k1 - 7200.0 / 2197.0 * k2 + 7296.0 / 2197.0 * k3));
  const Mat k5 = f(z + dt * (439.0 / 216.0 * k1 - 8.0 * k2 + 3680.0 / 513.0 * k3 - 845.0 / 4104.0 * k4));
  const Mat k6 = f(z + dt * (-8.0 / 27.0 * k1 + 2.0 * k2 - 3544.0 / 2565.0 * k3 + 1859.0 / 4104.0 * k4 - 11.0 / 40.0 * k5));
  const Mat z4 = dt * (25.0 / 216.0 * k1 + 1408.0 / 2565.0 * k3 + 2197.0 / 4104.0 * k4 - 1.0 / 5.0 * k5);
  const Mat z5 = dt * (16.0 / 135.0 * k1 + 6656.0 / 12825.0 * k3 + 28561.0 / 56430.0 * k4 - 9.0 / 50.0 * k5 + 2.0 / 55.0 * k6);
  return (z4 - z5).norm();
}

// ---------------------------------------------------------------------------
// Evaluation and trajectories

/// Committed surrogate state: latents per kind (one row per exchanger of
/// that kind), lagged refrigerant inputs, and warm-start pressures.
struct SurrogateState {
  double t = 0.0;
  Mat zeta_c, zeta_e;
  Mat x_lag;  // n_hx x 4: m_in, h_in, h_out, P_out
  Vec p;
  Mat jac;    // last pressure Jacobian, reused as a warm start
};

struct Evaluation {
  double t = 0.0;
  Vec y, ydot, p;
  Mat inputs;   // n_hx x 8, physical
  Mat outputs;  // n_hx x 9, physical; M_r and E_hx columns carry the solver state
  Mat rates;    // n_hx x 2, surrogate chain-rule (M_r, E_hx) rates, physical
  Vec m_out;
  Mat zeta_c, zeta_e, forcing_c, forcing_e, jac;
  int pressure_evals = 0;
  bool least_squares = false;
  double residual_norm = 0.0;
};

struct TrajectoryRow {
  double t = 0.0, dt = 0.0;
  Vec y, ydot, p;
  Mat inputs, outputs, rates;
  int pressure_evals = 0;
  bool least_squares = false;
  bool highres = false;
  int order = 0;
  bool corrected = false, gate_skipped = false;
  Vec m_corr;  // physical (E.., M..) after the corrector, when enabled
};

struct StepRecord {
  double t = 0.0;   // start of the step
  double dt = 0.0;
  bool highres = false;
};

struct SimMetrics {
  long rhs_evals = 0;
  long cache_hits = 0;
  long pressure_solves = 0;
  long pressure_evals = 0;
  long pressure_solves_le10 = 0;
  long least_squares_solves = 0;
  long size_switch_solves = 0;  // bounded solves forced by n_p > 10
  long powell_fallbacks = 0;
  long corrector_applied = 0;
  long corrector_skipped = 0;
  long accepted_steps = 0;
  double wall_seconds = 0.0;
  dae::DaeStats dae;
};

struct Trajectory {
  Topology topo;
  SolverMode mode = SolverMode::Algebraic;
  std::vector<TrajectoryRow> rows;
  std::vector<StepRecord> steps;
  SimMetrics metrics;
  bool failed = false;
  std::string failure;
  double failure_time = 0.0;
  long failure_step = -1;
  bool has_corrector = false;
};

/// Deployment settings for the corrector during simulation.
struct CorrectorHook {
  const corrector::CorrectorNet* net = nullptr;
  corrector::GpKernel kernel;
  int window = 512;
  double alpha = 0.95;
};

class Simulator {
 public:
  static constexpr double kPressureRef = 1e6;

  Simulator(Topology topo, SurrogateSet models, const plant::ActuationProfile& prof, SystemConfig cfg)
      : topo_(std::move(topo)), models_(models), prof_(prof), cfg_(cfg) {
    models_.validate();
    cfg_.validate();
    prof_.validate(topo_);
    mask_ = highres_mask(prof_.actuation(), cfg_.highres);
    // Actuation changes split the DAE integration into smooth segments.
    const Mat u = prof_.actuation();
    for (long i = 1; i < u.rows(); ++i)
      if ((u.row(i) - u.row(i - 1)).cwiseAbs().maxCoeff() > 0.0) changes_.push_back(i * prof_.dt);
    for (long j : mask_.jumps) window_starts_.push_back(mask_.window_start(j, cfg_.highres.n_pre) * prof_.dt);
    std::sort(window_starts_.begin(), window_starts_.end());
  }

  const Topology& topology() const { return topo_; }
  const SystemConfig& config() const { return cfg_; }
  const SurrogateSet& models() const { return models_; }
  const plant::ActuationProfile& profile() const { return prof_; }
  const HighResMask& mask() const { return mask_; }
  SimMetrics& metrics() { return metrics_; }

  double dt_target(double t) const { return mask_.dt_target[prof_.index_at(t)]; }
  bool in_window(double t) const { return mask_.mask[prof_.index_at(t)]; }

  /// Encodes each exchanger's history (T_enc rows of the 17 physical data
  /// columns, oldest first) and sets the initial warm-start pressures.
  SurrogateState initial_state(const std::vector<Mat>& history, double t0) const {
    require(static_cast<int>(history.size()) == topo_.n_hx(), "initial_state: one history per exchanger");
    SurrogateState s;
    s.t = t0;
    s.x_lag.resize(topo_.n_hx(), 4);
    for (int i = 0; i < topo_.n_hx(); ++i) {
      const Mat& h = history[i];
      require(h.cols() == plant::kInputs + plant::kOutputs, "initial_state: history rows need 17 columns");
      require(h.rows() == models_.model(topo_.kind(i)).cfg.T_enc, "initial_state: history length must equal T_enc");
      s.x_lag.row(i) = h.row(h.rows() - 1).segment(4, 4);
    }
    s.zeta_c = encode_kind(HxKind::Condenser, history);
    s.zeta_e = encode_kind(HxKind::Evaporator, history);
    s.p.resize(topo_.n_p());
    for (int k = 0; k < topo_.n_c; ++k) s.p(topo_.p_dis_index(k)) = cfg_.p_liq0;
    s.p(topo_.p_liq_index()) = cfg_.p_liq0;
    s.p(topo_.p_suct_index()) = cfg_.p_suct0;
    return s;
  }

  /// Right-hand side and every reported quantity at (t, y), starting from a
  /// committed surrogate state. `lm` selects Levenberg-Marquardt for the
  /// pressure solve (DAE modes); otherwise Powell hybrid below the
  /// least-squares threshold.
  Evaluation evaluate(const SurrogateState& base, double t, const Vec& y, bool lm) {
    require(y.size() == topo_.state_dim(), "evaluate: state dimension mismatch");
    if (!y.allFinite()) throw NumericalFailure("non-finite state at t=" + std::to_string(t));
    ++metrics_.rhs_evals;
    const int nh = topo_.n_hx();
    Evaluation ev;
    ev.t = t;
    ev.y = y;
    ev.inputs.resize(nh, plant::kInputs);
    ev.outputs.resize(nh, plant::kOutputs);
    ev.rates.resize(nh, 2);
    const Eigen::RowVectorXd air = air_side(t);
    for (int i = 0; i < nh; ++i) {
      ev.inputs.row(i) << air(4 * i), air(4 * i + 1), air(4 * i + 2), air(4 * i + 3), base.x_lag.row(i);
    }
    run_surrogates(HxKind::Condenser, base, t, y, ev);
    run_surrogates(HxKind::Evaporator, base, t, y, ev);

    // Pressure solve.
    JunctionInputs in;
    in.pN = ev.outputs.col(1);
    in.hN = ev.outputs.col(3);
    const long idx = prof_.index_at(t);
    in.speed = prof_.speed.row(idx).transpose();
    in.opening = prof_.opening.row(idx).transpose();
    solve_pressures(base, in, lm, ev);

    // Flows and balances.
    const JunctionFlows f = junction_flows(topo_, models_, in, ev.p);
    ev.ydot.resize(topo_.state_dim());
    ev.m_out.resize(nh);
    for (int i = 0; i < nh; ++i) {
      double m_in, h_in, m_out, h_out, P_out;
      if (topo_.kind(i) == HxKind::Condenser) {
        const int k = i;
        m_in = f.m_comp(k);
        h_in = f.h_comp(k);
        m_out = f.m_cond_out(k);
        h_out = m_out >= 0.0 ? in.hN(i) : f.h_liq;
        P_out = ev.p(topo_.p_liq_index());
      } else {
        const int j = i - topo_.n_c;
        m_in = f.m_valve(j);
        h_in = f.h_liq;
        m_out = f.m_evap_out(j);
        h_out = m_out >= 0.0 ? in.hN(i) : f.h_suct;
        P_out = ev.p(topo_.p_suct_index());
      }
      ev.inputs.row(i).tail(4) << m_in, h_in, h_out, P_out;
      ev.m_out(i) = m_out;
      const double Q_a = ev.outputs(i, 5);
      ev.ydot(topo_.mass_index(i)) = m_in - m_out;
      ev.ydot(topo_.energy_index(i)) = m_in * h_in - m_out * h_out - Q_a;
    }
    if (!ev.ydot.allFinite()) throw NumericalFailure("non-finite state derivative at t=" + std::to_string(t));
    return ev;
  }

  /// The committed state after accepting `ev`.
  SurrogateState commit(const Evaluation& ev) const {
    SurrogateState s;
    s.t = ev.t;
    s.zeta_c = ev.zeta_c;
    s.zeta_e = ev.zeta_e;
    s.x_lag = ev.inputs.rightCols(4);
    s.p = ev.p;
    s.jac = ev.jac;
    return s;
  }

  /// Step from the latent RK45 error estimate at the forcing of `ev`.
  double adapt_dt_rk45(const Evaluation& ev, double dt0, double lo, double hi) const {
    double err2 = 0.0;
    if (topo_.n_c > 0) {
      const auto& m = *models_.condenser;
      const double e = rk45_error([&](const Mat& z) { return Mat(m.latent_rate_values(ev.forcing_c, z)); }, ev.zeta_c, dt0);
      err2 += e * e;
    }
    if (topo_.n_v > 0) {
      const auto& m = *models_.evaporator;
      const double e = rk45_error([&](const Mat& z) { return Mat(m.latent_rate_values(ev.forcing_e, z)); }, ev.zeta_e, dt0);
      err2 += e * e;
    }
    return dt_from_error(std::sqrt(err2), dt0, cfg_.eps_dt, lo, hi);
  }

  /// Runs `horizon` profile samples from sample `start`. Failures end the
  /// run and are recorded; the partial trajectory is returned.
  Trajectory simulate(const Vec& y0, const std::vector<Mat>& history, long start, long horizon,
                      const CorrectorHook* hook = nullptr) {
    require(start >= 0 && horizon >= 0 && start + horizon < prof_.steps() + 1, "simulate: range exceeds profile");
    require(y0.size() == topo_.state_dim(), "simulate: initial state dimension mismatch");
    metrics_ = SimMetrics{};
    cache_.clear();
    Trajectory tr;
    tr.topo = topo_;
    tr.mode = cfg_.mode;
    tr.has_corrector = hook && hook->net;
    if (tr.has_corrector) {
      require(!hook->net->hx.empty() && hook->net->m_scaler.size() == 2 * static_cast<Eigen::Index>(hook->net->hx.size()),
              "corrector hook: missing exchanger list or channel scaler");
      smoother_.emplace(hook->kernel, hook->window, hook->alpha);
    } else {
      smoother_.reset();
    }
    hook_ = tr.has_corrector ? hook : nullptr;
    const auto wall0 = std::chrono::steady_clock::now();
    const double t0 = start * prof_.dt, t_end = (start + horizon) * prof_.dt;
    try {
      SurrogateState base = initial_state(history, t0);
      if (cfg_.mode == SolverMode::Algebraic) {
        run_algebraic(tr, base, y0, t0, t_end);
      } else {
        run_dae(tr, base, y0, t0, t_end);
      }
    } catch (const NumericalFailure& e) {
      tr.failed = true;
      tr.failure = e.what();
      tr.failure_time = tr.rows.empty() ? t0 : tr.rows.back().t;
      tr.failure_step = metrics_.accepted_steps;
    }
    metrics_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    tr.metrics = metrics_;
    return tr;
  }

 private:
  static constexpr double kTimeEps = 1e-9;

  Mat encode_kind(HxKind kind, const std::vector<Mat>& history) const {
    const PinodeModel& m = models_.model(kind);
    const int n = kind == HxKind::Condenser ? topo_.n_c : topo_.n_v;
    const int first = kind == HxKind::Condenser ? 0 : topo_.n_c;
    std::vector<Tensor> X(m.cfg.T_enc), S(m.cfg.T_enc);
    for (int t = 0; t < m.cfg.T_enc; ++t) {
      X[t].resize(n, plant::kInputs);
      S[t].resize(n, 2);
      for (int r = 0; r < n; ++r) {
        const Eigen::RowVectorXd z = m.scaler.normalize(Mat(history[first + r].row(t)));
        X[t].row(r) = z.head(plant::kInputs);
        S[t].row(r) = z.segment(plant::kInputs + plant::kChannelM, 2);
      }
    }
    return m.encode_values(X, S);
  }

  /// Air-side inputs at t for every exchanger (4 per exchanger), linearly
  /// interpolated between samples.
  Eigen::RowVectorXd air_side(double t) const {
    const double s = t / prof_.dt;
    const long i0 = std::clamp(static_cast<long>(std::floor(s + 1e-9)), 0L, prof_.steps() - 1);
    const long i1 = std::min(i0 + 1, prof_.steps() - 1);
    const double w = std::clamp(s - i0, 0.0, 1.0);
    Eigen::RowVectorXd a(4 * topo_.n_hx());
    for (int i = 0; i < topo_.n_hx(); ++i) {
      auto lerp = [&](const Mat& m) { return (1.0 - w) * m(i0, i) + w * m(i1, i); };
      a.segment(4 * i, 4) << lerp(prof_.T_air), lerp(prof_.phi_air), lerp(prof_.m_air), lerp(prof_.P_amb);
    }
    return a;
  }

  void run_surrogates(HxKind kind, const SurrogateState& base, double t, const Vec& y, Evaluation& ev) const {
    const PinodeModel& m = models_.model(kind);
    const int n = kind == HxKind::Condenser ? topo_.n_c : topo_.n_v;
    const int first = kind == HxKind::Condenser ? 0 : topo_.n_c;
    const int cM = plant::kInputs + plant::kChannelM, cE = plant::kInputs + plant::kChannelE;
    Tensor u(n, plant::kInputs + 2);
    for (int r = 0; r < n; ++r) {
      const int i = first + r;
      for (int c = 0; c < plant::kInputs; ++c) u(r, c) = m.scaler.normalize(ev.inputs(i, c), c);
      u(r, plant::kInputs) = m.scaler.normalize(y(topo_.mass_index(i)), cM);
      u(r, plant::kInputs + 1) = m.scaler.normalize(y(topo_.energy_index(i)), cE);
    }
    const Mat& z0 = kind == HxKind::Condenser ? base.zeta_c : base.zeta_e;
    const Tensor z = m.advance_values(u, z0, t - base.t);
    if (!z.allFinite()) throw NumericalFailure(std::string("non-finite ") + kind_name(kind) + " latent at t=" + std::to_string(t));
    Tensor yn, rn;
    m.decode_with_rates_values(u, z, yn, rn);
    for (int r = 0; r < n; ++r) {
      const int i = first + r;
      for (int c = 0; c < plant::kOutputs; ++c) ev.outputs(i, c) = m.scaler.denormalize(yn(r, c), plant::kInputs + c);
      ev.outputs(i, plant::kChannelM) = y(topo_.mass_index(i));
      ev.outputs(i, plant::kChannelE) = y(topo_.energy_index(i));
      ev.rates(i, 0) = rn(r, 0) / m.scaler.rate_scale(cM);
      ev.rates(i, 1) = rn(r, 1) / m.scaler.rate_scale(cE);
    }
    if (kind == HxKind::Condenser) {
      ev.zeta_c = z;
      ev.forcing_c = u;
    } else {
      ev.zeta_e = z;
      ev.forcing_e = u;
    }
  }

  void solve_pressures(const SurrogateState& base, const JunctionInputs& in, bool lm, Evaluation& ev) {
    nonlinear::RootProblem pb;
    pb.residual = [&](const Vec& q) { return pressure_residuals(topo_, models_, in, q * kPressureRef, cfg_.m_scale); };
    pb.guess = base.p / kPressureRef;
    pb.tol = cfg_.eps_soln;
    pb.max_evals = cfg_.pressure_max_evals;
    pb.typical_scale = 1.0;
    if (base.jac.rows() == topo_.n_p() && base.jac.cols() == topo_.n_p()) pb.jacobian_hint = &base.jac;
    const bool ls = lm || topo_.uses_least_squares();
    nonlinear::SolveReport rep;
    if (!ls) {
      rep = nonlinear::powell_hybrid(pb);
      if (!rep.converged) {
        // Retry from the Powell iterate with the bounded solver.
        ++metrics_.powell_fallbacks;
        const int used = rep.evaluations;
        pb.guess = rep.x.allFinite() ? rep.x : Vec(base.p / kPressureRef);
        add_bounds(pb);
        rep = nonlinear::bounded_least_squares(pb);
        rep.evaluations += used;
      }
    } else {
      add_bounds(pb);
      rep = nonlinear::bounded_least_squares(pb);
      ++metrics_.least_squares_solves;
      if (topo_.uses_least_squares()) ++metrics_.size_switch_solves;
    }
    ++metrics_.pressure_solves;
    metrics_.pressure_evals += rep.evaluations;
    if (rep.evaluations <= 10) ++metrics_.pressure_solves_le10;
    ev.pressure_evals = rep.evaluations;
    ev.least_squares = ls;
    ev.residual_norm = rep.residual_norm;
    if (!rep.converged)
      throw NumericalFailure("junction pressures did not converge at t=" + std::to_string(ev.t) + " (residual " +
                             std::to_string(rep.residual_norm) + ", " + rep.method + ")");
    ev.p = rep.x * kPressureRef;
    ev.jac = rep.jacobian;
  }

  void add_bounds(nonlinear::RootProblem& pb) const {
    pb.lower = Vec::Constant(topo_.n_p(), cfg_.p_lower / kPressureRef);
    pb.upper = Vec::Constant(topo_.n_p(), cfg_.p_upper / kPressureRef);
  }

  /// Evaluation with a small exact-match cache, so that points revisited at
  /// resolution transitions (an output landing on an accepted step) are not
  /// recomputed.
  Evaluation evaluate_cached(const SurrogateState& base, double t, const Vec& y, bool lm) {
    for (const auto& c : cache_)
      if (c.base_t == base.t && c.ev.t == t && c.ev.y == y) {
        ++metrics_.cache_hits;
        return c.ev;
      }
    Evaluation ev = evaluate(base, t, y, lm);
    cache_.push_back({base.t, ev});
    if (cache_.size() > 4) cache_.pop_front();
    return ev;
  }

  /// Next segment boundary strictly after t: actuation changes, plus the
  /// starts of high-resolution windows when `windows` is set.
  double next_boundary(double t, double t_end, bool windows) const {
    double b = t_end;
    auto it = std::upper_bound(changes_.begin(), changes_.end(), t + kTimeEps);
    if (it != changes_.end()) b = std::min(b, *it);
    if (windows) {
      auto w = std::upper_bound(window_starts_.begin(), window_starts_.end(), t + kTimeEps);
      if (w != window_starts_.end()) b = std::min(b, *w);
    }
    return b;
  }

  void check_state(const Vec& y, double t) const {
    if (!y.allFinite()) throw NumericalFailure("non-finite state at t=" + std::to_string(t));
    for (int i = 0; i < topo_.n_hx(); ++i)
      if (!(y(topo_.mass_index(i)) > 0.0))
        throw NumericalFailure("refrigerant mass of exchanger " + std::to_string(i) + " became non-positive at t=" +
                               std::to_string(t));
  }

  void record(Trajectory& tr, const Evaluation& ev, int order) {
    TrajectoryRow r;
    r.t = ev.t;
    r.dt = tr.rows.empty() ? 0.0 : ev.t - tr.rows.back().t;
    r.y = ev.y;
    r.ydot = ev.ydot;
    r.p = ev.p;
    r.inputs = ev.inputs;
    r.outputs = ev.outputs;
    r.rates = ev.rates;
    r.pressure_evals = ev.pressure_evals;
    r.least_squares = ev.least_squares;
    r.highres = in_window(ev.t);
    r.order = order;
    if (hook_) apply_corrector(r);
    tr.rows.push_back(std::move(r));
  }

  void apply_corrector(TrajectoryRow& r) {
    const corrector::CorrectorNet& net = *hook_->net;
    const int n = static_cast<int>(net.hx.size());
    Vec z(n * (plant::kInputs + plant::kOutputs)), m_raw(2 * n);
    for (int q = 0; q < n; ++q) {
      const int i = net.hx[q];
      require(i >= 0 && i < topo_.n_hx(), "corrector hook: exchanger index out of range");
      const PinodeModel& m = models_.model(topo_.kind(i));
      Eigen::RowVectorXd phys(plant::kInputs + plant::kOutputs);
      phys << r.inputs.row(i), r.outputs.row(i);
      z.segment(q * phys.size(), phys.size()) = m.scaler.normalize(Mat(phys)).row(0).transpose();
      m_raw(q) = r.y(topo_.energy_index(i));
      m_raw(n + q) = r.y(topo_.mass_index(i));
    }
    const Vec m_pred = net.m_scaler.normalize(Mat(m_raw.transpose())).row(0).transpose();
    const Vec phi = smoother_->push(r.t, net.forward(z));
    const corrector::GateResult g = corrector::apply_correction(m_pred, phi);
    r.corrected = !g.skipped;
    r.gate_skipped = g.skipped;
    r.m_corr = net.m_scaler.denormalize(Mat(g.value.transpose())).row(0).transpose();
    if (g.skipped) {
      ++metrics_.corrector_skipped;
    } else {
      ++metrics_.corrector_applied;
    }
  }

  void run_algebraic(Trajectory& tr, SurrogateState base, Vec y, double t, double t_end) {
    Evaluation ev = evaluate_cached(base, t, y, false);
    record(tr, ev, 0);
    double dt_prev = dt_target(t);
    while (t < t_end - kTimeEps) {
      const double target = dt_target(t);
      double dt = std::min(adapt_dt_rk45(ev, dt_prev, cfg_.dt_min, target), target);
      const double rem = next_boundary(t, t_end, true) - t;
      dt = std::min(dt, rem);
      // Never leave a sliver shorter than dt_min before the boundary.
      if (rem - dt > 0.0 && rem - dt < cfg_.dt_min) dt = rem <= target ? rem : rem - cfg_.dt_min;
      const Vec y_new = y + dt * ev.ydot;
      check_state(y_new, t + dt);
      base = commit(ev);
      const bool hr = in_window(t);
      const double t_new = std::abs(t + dt - t_end) < kTimeEps ? t_end : t + dt;
      ev = evaluate_cached(base, t_new, y_new, false);
      tr.steps.push_back({t, dt, hr});
      ++metrics_.accepted_steps;
      record(tr, ev, 0);
      t = t_new;
      y = y_new;
      dt_prev = dt;
    }
  }

  void run_dae(Trajectory& tr, SurrogateState base, const Vec& y0, double t0, double t_end) {
    const dae::DaeConfig dcfg = cfg_.dae_config();
    const bool dassl = cfg_.mode == SolverMode::Dassl;
    Evaluation ev0 = evaluate_cached(base, t0, y0, true);
    record(tr, ev0, 0);
    if (t_end <= t0 + kTimeEps) return;

    // The residual sees the committed state through this pointer; a failed
    // pressure solve becomes a non-finite residual so the stepper retries
    // with a smaller step.
    const SurrogateState* current = &base;
    dae::DaeResidual F = [&](double t, const Vec& y, const Vec& yp, Vec& r) {
      try {
        r = yp - evaluate_cached(*current, t, y, true).ydot;
      } catch (const NumericalFailure&) {
        r = Vec::Constant(y.size(), std::numeric_limits<double>::quiet_NaN());
      }
    };

    // Output schedule.
    std::deque<double> outputs;
    if (!dassl) {
      for (double t = t0; t < t_end - kTimeEps;) {
        t = std::min(t + std::min(dt_target(t), cfg_.ida_output_interval), t_end);
        if (t_end - t < kTimeEps) t = t_end;
        outputs.push_back(t);
      }
    }
    auto increment = [&](double t) { return cfg_.highres.dassl_increment_factor * dt_target(t); };
    auto min_output = [&](double t) {
      return cfg_.dassl_min_output > 0.0 ? cfg_.dassl_min_output : cfg_.highres.dassl_min_output_factor * dt_target(t);
    };
    double target = std::min(t0 + increment(t0), t_end);
    double last_record = t0;
    int count = 0;

    double seg_end = next_boundary(t0, t_end, false);
    const double h0 = adapt_dt_rk45(ev0, dt_target(t0), dcfg.h_min, std::min(dcfg.h_max, seg_end - t0));
    dae::BdfStepper st(F, t0, y0, ev0.ydot, dcfg, seg_end, h0);
    while (st.t() < t_end - kTimeEps) {
      const double t_prev = st.t();
      const double tstop = dassl ? std::min(seg_end, target) : seg_end;
      if (st.step(tstop) != dae::StepStatus::Accepted) {
        metrics_.dae = st.stats();
        throw NumericalFailure(std::string(dae::mode_name(dcfg.mode)) + " step failed: " + st.failure());
      }
      ++count;
      const SurrogateState prev = base;
      const Evaluation ev = evaluate_cached(base, st.t(), st.y(), true);
      check_state(st.y(), st.t());
      base = commit(ev);
      tr.steps.push_back({t_prev, st.t() - t_prev, in_window(t_prev)});
      ++metrics_.accepted_steps;

      auto emit = [&](double t_out) {
        if (std::abs(t_out - st.t()) <= kTimeEps) {
          record(tr, ev, st.order());
          ++metrics_.cache_hits;
          return;
        }
        Vec y, yp;
        st.interpolate(t_out, y, yp);
        record(tr, evaluate(prev, t_out, y, true), st.order());
      };
      if (!dassl) {
        while (!outputs.empty() && outputs.front() <= st.t() + kTimeEps) {
          emit(outputs.front());
          outputs.pop_front();
        }
      } else {
        if (st.t() >= target - kTimeEps) {
          const bool final = target >= t_end - kTimeEps;
          if (final || target - last_record >= min_output(target) - 1e-12) {
            emit(target);
            last_record = target;
          }
          target = std::min(target + increment(target), t_end);
          count = 0;
        } else if (count >= dcfg.dassl_max_steps) {
          metrics_.dae = st.stats();
          throw NumericalFailure("dassl exceeded " + std::to_string(dcfg.dassl_max_steps) +
                                 " internal steps before t=" + std::to_string(target));
        }
      }
      if (st.t() >= seg_end - kTimeEps && seg_end < t_end - kTimeEps) {
        // Actuation changes here: restart from a consistent point.
        seg_end = next_boundary(st.t(), t_end, false);
        const double h = adapt_dt_rk45(ev, dt_target(st.t()), dcfg.h_min, std::min(dcfg.h_max, seg_end - st.t()));
        st.reinit(st.t(), st.y(), ev.ydot, seg_end, h);
      }
    }
    metrics_.dae = st.stats();
  }

  struct CacheEntry {
    double base_t;
    Evaluation ev;
  };

  Topology topo_;
  SurrogateSet models_;
  plant::ActuationProfile prof_;
  SystemConfig cfg_;
  HighResMask mask_;
  std::vector<double> changes_, window_starts_;
  SimMetrics metrics_;
  std::deque<CacheEntry> cache_;
  const CorrectorHook* hook_ = nullptr;
  std::optional<corrector::CorrectionSmoother> smoother_;
};

// ---------------------------------------------------------------------------
// Sampling and export

/// Linear interpolation of a per-row quantity at the given times (times
/// outside the trajectory clamp to its ends).
template <class Get>
Mat sample_rows(const Trajectory& tr, const std::vector<double>& times, Get&& get) {
  require(!tr.rows.empty(), "sample_rows: empty trajectory");
  const Eigen::Index w = get(tr.rows.front()).size();
  Mat out(times.size(), w);
  std::size_t k = 0;
  for (std::size_t q = 0; q < times.size(); ++q) {
    const double t = times[q];
    while (k + 1 < tr.rows.size() && tr.rows[k + 1].t < t) ++k;
    if (k + 1 >= tr.rows.size() || t <= tr.rows[k].t) {
      out.row(q) = get(tr.rows[std::min(k, tr.rows.size() - 1)]).transpose();
      continue;
    }
    const TrajectoryRow& a = tr.rows[k];
    const TrajectoryRow& b = tr.rows[k + 1];
    const double s = (t - a.t) / (b.t - a.t);
    out.row(q) = ((1.0 - s) * get(a) + s * get(b)).transpose();
  }
  return out;
}

/// Outputs (n_times x 9) of one exchanger at the given times.
inline Mat sample_outputs(const Trajectory& tr, int hx, const std::vector<double>& times) {
  return sample_rows(tr, times, [&](const TrajectoryRow& r) { return Vec(r.outputs.row(hx).transpose()); });
}
inline Mat sample_inputs(const Trajectory& tr, int hx, const std::vector<double>& times) {
  return sample_rows(tr, times, [&](const TrajectoryRow& r) { return Vec(r.inputs.row(hx).transpose()); });
}
inline Mat sample_rates(const Trajectory& tr, int hx, const std::vector<double>& times) {
  return sample_rows(tr, times, [&](const TrajectoryRow& r) { return Vec(r.rates.row(hx).transpose()); });
}

inline const std::vector<std::string>& trajectory_channels() {
  static const std::vector<std::string> c{"M_r", "E_hx", "p_1", "p_N", "h_1", "h_N", "T_a_out", "Q_a", "Q_lat"};
  return c;
}
// Output column for each trajectory channel.
inline const std::vector<int>& trajectory_channel_columns() {
  static const std::vector<int> c{plant::kChannelM, plant::kChannelE, 0, 1, 2, 3, 4, 5, 8};
  return c;
}

constexpr const char* kTrajectorySchema = "# schema: thermoloop-trajectory v1";

inline void write_trajectory_csv(const Trajectory& tr, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << kTrajectorySchema << "\n";
  out << "t,dt";
  for (int i = 0; i < tr.topo.n_hx(); ++i)
    for (const auto& c : trajectory_channels()) out << ",hx" << i + 1 << "_" << c;
  for (const auto& n : tr.topo.nodes) out << "," << n;
  out << ",pressure_evals,least_squares,highres,order";
  if (tr.has_corrector) out << ",corrected,gate_skipped";
  out << "\n";
  out << std::setprecision(10);
  for (const auto& r : tr.rows) {
    out << r.t << "," << r.dt;
    for (int i = 0; i < tr.topo.n_hx(); ++i)
      for (int c : trajectory_channel_columns()) out << "," << r.outputs(i, c);
    for (Eigen::Index k = 0; k < r.p.size(); ++k) out << "," << r.p(k);
    out << "," << r.pressure_evals << "," << r.least_squares << "," << r.highres << "," << r.order;
    if (tr.has_corrector) out << "," << r.corrected << "," << r.gate_skipped;
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Corrector training data

struct CorrectorData {
  std::vector<corrector::CorrectionRecord> records;
  ColumnScaler m_scaler;  // over the benchmark (E.., M..) channels
  Trajectory prediction;
};

/// Runs the algebraic solver over `length` samples from `start` and pairs
/// each sample with the benchmark state (row s of `benchmark` is the
/// reference at sample start + s). z_in concatenates the normalized inputs
/// and outputs of the listed exchangers; the (E.., M..) channels are scaled
/// by `scaler` when given, else by statistics of the benchmark segment.
inline CorrectorData collect_training_pairs(Simulator& sim, const Vec& y0, const std::vector<Mat>& history, long start,
                                            long length, const Mat& benchmark, const std::vector<int>& hx,
                                            const ColumnScaler* scaler = nullptr) {
  require(sim.config().mode == SolverMode::Algebraic, "collect_training_pairs: prediction runs use the algebraic solver");
  require(!hx.empty(), "collect_training_pairs: no exchangers selected");
  require(benchmark.rows() >= length && benchmark.cols() == sim.topology().state_dim(),
          "collect_training_pairs: benchmark does not cover the segment");
  CorrectorData out;
  if (length <= 0) return out;
  const Topology& topo = sim.topology();
  const int n = static_cast<int>(hx.size());
  out.prediction = sim.simulate(y0, history, start, length - 1);
  if (out.prediction.failed)
    throw NumericalFailure("corrector data collection aborted: " + out.prediction.failure);
  const double dt = sim.profile().dt;
  std::vector<double> times(length);
  for (long s = 0; s < length; ++s) times[s] = (start + s) * dt;
  Mat bench(length, 2 * n), pred(length, 2 * n), Z(length, n * (plant::kInputs + plant::kOutputs));
  for (int q = 0; q < n; ++q) {
    const int i = hx[q];
    require(i >= 0 && i < topo.n_hx(), "collect_training_pairs: exchanger index out of range");
    const Mat X = sample_inputs(out.prediction, i, times), Y = sample_outputs(out.prediction, i, times);
    Mat phys(length, plant::kInputs + plant::kOutputs);
    phys << X, Y;
    Z.middleCols(q * phys.cols(), phys.cols()) = sim.models().model(topo.kind(i)).scaler.normalize(phys);
    pred.col(q) = Y.col(plant::kChannelE);
    pred.col(n + q) = Y.col(plant::kChannelM);
    bench.col(q) = benchmark.col(topo.energy_index(i)).head(length);
    bench.col(n + q) = benchmark.col(topo.mass_index(i)).head(length);
  }
  out.m_scaler = scaler ? *scaler : ColumnScaler::fit(bench);
  require(out.m_scaler.size() == bench.cols(), "collect_training_pairs: scaler width");
  const Mat pn = out.m_scaler.normalize(pred), bn = out.m_scaler.normalize(bench);
  out.records.resize(length);
  for (long s = 0; s < length; ++s) {
    out.records[s].z_in = Z.row(s).transpose();
    out.records[s].m_pred = pn.row(s).transpose();
    out.records[s].m_bench = bn.row(s).transpose();
  }
  return out;
}

}  // namespace thermoloop::system
