#pragma once

// Actuation and air-side boundary profiles sampled once per second and held
// constant between samples.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "thermoloop/core/errors.hpp"
#include "thermoloop/system/topology.hpp"

namespace thermoloop::plant {

struct ActuationProfile {
  double dt = 1.0;             // sample spacing, s
  Eigen::MatrixXd speed;       // steps x n_c, compressor speed (Hz)
  Eigen::MatrixXd opening;     // steps x n_v, valve opening in [0, 1]
  Eigen::MatrixXd T_air;       // steps x n_hx, air inlet temperature (K)
  Eigen::MatrixXd phi_air;     // steps x n_hx, humidity ratio (pass-through)
  Eigen::MatrixXd m_air;       // steps x n_hx, air mass flow (kg/s)
  Eigen::MatrixXd P_amb;       // steps x n_hx, ambient pressure (Pa)

  long steps() const { return speed.rows(); }

  /// Sample index in force at time t (zero-order hold, clamped to the end).
  long index_at(double t) const {
    const long i = static_cast<long>(std::floor(t / dt + 1e-9));
    return std::clamp(i, 0L, steps() - 1);
  }

  void validate(const Topology& topo) const {
    require(steps() >= 2, "actuation profile needs at least two samples");
    require(speed.cols() == topo.n_c && opening.cols() == topo.n_v, "profile actuator count does not match topology");
    require(T_air.cols() == topo.n_hx() && phi_air.cols() == topo.n_hx() && m_air.cols() == topo.n_hx() &&
                P_amb.cols() == topo.n_hx(),
            "profile air-side columns do not match topology");
    require(opening.rows() == steps() && T_air.rows() == steps() && phi_air.rows() == steps() &&
                m_air.rows() == steps() && P_amb.rows() == steps(),
            "profile channels have different lengths");
    require((speed.array() >= 0.0).all(), "compressor speeds must be non-negative");
    require((opening.array() >= 0.0).all() && (opening.array() <= 1.0).all(), "valve openings must lie in [0,1]");
  }

  /// Every actuation channel side by side (speeds then openings), used for
  /// jump detection.
  Eigen::MatrixXd actuation() const {
    Eigen::MatrixXd u(steps(), speed.cols() + opening.cols());
    u << speed, opening;
    return u;
  }

  ActuationProfile slice(long start, long count) const {
    require(start >= 0 && count >= 2 && start + count <= steps(), "profile slice out of range");
    ActuationProfile p;
    p.dt = dt;
    p.speed = speed.middleRows(start, count);
    p.opening = opening.middleRows(start, count);
    p.T_air = T_air.middleRows(start, count);
    p.phi_air = phi_air.middleRows(start, count);
    p.m_air = m_air.middleRows(start, count);
    p.P_amb = P_amb.middleRows(start, count);
    return p;
  }
};

struct ProfileOptions {
  double speed_lo = 28.0, speed_hi = 52.0;  // Hz
  double min_jump = 6.0;                     // every speed change exceeds this
  long hold_min = 120, hold_max = 400;       // samples between speed changes
  double opening_lo = 0.35, opening_hi = 0.75;
  long opening_hold_min = 150, opening_hold_max = 500;
  double T_cond_air = 308.0, T_evap_air = 300.0, T_air_amp = 2.0, T_air_period = 1800.0;
  double m_air_cond = 0.6, m_air_evap = 0.5;
  double phi_cond = 0.010, phi_evap = 0.011;
  double P_amb = 101325.0;
};

/// Constant actuation at the given levels (used for warm-up and unit tests).
inline ActuationProfile constant_profile(const Topology& topo, long steps, double speed, double opening,
                                         const ProfileOptions& o = {}) {
  ActuationProfile p;
  p.speed = Eigen::MatrixXd::Constant(steps, topo.n_c, speed);
  p.opening = Eigen::MatrixXd::Constant(steps, topo.n_v, opening);
  p.T_air.resize(steps, topo.n_hx());
  p.phi_air.resize(steps, topo.n_hx());
  p.m_air.resize(steps, topo.n_hx());
  p.P_amb = Eigen::MatrixXd::Constant(steps, topo.n_hx(), o.P_amb);
  for (int i = 0; i < topo.n_hx(); ++i) {
    const bool cond = topo.kind(i) == HxKind::Condenser;
    p.T_air.col(i).setConstant(cond ? o.T_cond_air : o.T_evap_air);
    p.phi_air.col(i).setConstant(cond ? o.phi_cond : o.phi_evap);
    p.m_air.col(i).setConstant(cond ? o.m_air_cond : o.m_air_evap);
  }
  return p;
}

/// Piecewise-constant speeds with jumps larger than `min_jump`, slowly
/// varying openings and sinusoidal air temperatures. Deterministic in seed.
inline ActuationProfile random_profile(const Topology& topo, long steps, unsigned long seed,
                                       const ProfileOptions& o = {}) {
  require(steps >= 2, "random_profile: need at least two samples");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ActuationProfile p = constant_profile(topo, steps, 0.5 * (o.speed_lo + o.speed_hi),
                                        0.5 * (o.opening_lo + o.opening_hi), o);
  auto hold = [&](long lo, long hi) { return lo + static_cast<long>(unit(rng) * (hi - lo + 1)); };
  for (int k = 0; k < topo.n_c; ++k) {
    double level = o.speed_lo + unit(rng) * (o.speed_hi - o.speed_lo);
    long next = hold(o.hold_min, o.hold_max);
    for (long s = 0; s < steps; ++s) {
      if (s == next) {
        double cand = level;
        while (std::abs(cand - level) <= o.min_jump)
          cand = o.speed_lo + unit(rng) * (o.speed_hi - o.speed_lo);
        level = cand;
        next = s + hold(o.hold_min, o.hold_max);
      }
      p.speed(s, k) = level;
    }
  }
  for (int j = 0; j < topo.n_v; ++j) {
    double level = o.opening_lo + unit(rng) * (o.opening_hi - o.opening_lo);
    long next = hold(o.opening_hold_min, o.opening_hold_max);
    for (long s = 0; s < steps; ++s) {
      if (s == next) {
        level = o.opening_lo + unit(rng) * (o.opening_hi - o.opening_lo);
        next = s + hold(o.opening_hold_min, o.opening_hold_max);
      }
      p.opening(s, j) = level;
    }
  }
  for (int i = 0; i < topo.n_hx(); ++i) {
    const double phase = 2.0 * M_PI * unit(rng);
    const double base = topo.kind(i) == HxKind::Condenser ? o.T_cond_air : o.T_evap_air;
    for (long s = 0; s < steps; ++s)
      p.T_air(s, i) = base + o.T_air_amp * std::sin(2.0 * M_PI * s * p.dt / o.T_air_period + phase);
  }
  return p;
}

}  // namespace thermoloop::plant
