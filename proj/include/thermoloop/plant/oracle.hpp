#pragma once

// Lumped-parameter reference plant. Each heat exchanger is one control
// volume with states (M, E). Junction pressures follow from flow balances:
// the discharge pressure of each branch is explicit, the liquid and suction
// manifold pressures are scalar roots. Integrated with fixed-step RK4.

#include <Eigen/Dense>

#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "thermoloop/core/errors.hpp"
#include "thermoloop/plant/profile.hpp"
#include "thermoloop/plant/property.hpp"
#include "thermoloop/system/topology.hpp"

namespace thermoloop::plant {

using Vec = Eigen::VectorXd;

struct PlantParams {
  PropertyMap props;
  double V_cond = 0.03, V_evap = 0.04;  // m^3
  double UA_cond = 150.0, UA_evap = 200.0;  // W/K
  double eta_v = 0.9;      // volumetric efficiency
  double V_disp = 6e-6;    // m^3 per revolution
  double kappa = 2e4;      // isentropic enthalpy rise per unit log pressure ratio, J/kg
  double eta_is = 0.7;     // isentropic efficiency
  double G_dis = 2e-7;     // discharge line conductance, kg/(s Pa)
  double G_liq = 5e-8;     // condenser outlet line
  double G_suct = 2e-7;    // evaporator outlet line
  double C_v = 3e-6;       // valve coefficient, m^2
  double cp_air = 1006.0;  // J/(kg K)
  double latent_fraction = 0.3;

  double volume(HxKind k) const { return k == HxKind::Condenser ? V_cond : V_evap; }
  double UA(HxKind k) const { return k == HxKind::Condenser ? UA_cond : UA_evap; }
  /// Conductance of the line leaving an exchanger.
  double outlet_conductance(HxKind k) const { return k == HxKind::Condenser ? G_liq : G_suct; }
};

/// Component laws, shared with the static-model training data.
struct ComponentLaws {
  const PlantParams* par;

  double compressor_flow(double speed, double p_suct, double h_suct) const {
    return par->eta_v * speed * par->V_disp * par->props.eval(p_suct, h_suct).rho;
  }
  double compressor_enthalpy(double p_suct, double p_dis, double h_suct) const {
    return h_suct + par->kappa * std::log(p_dis / p_suct) / par->eta_is;
  }
  double valve_flow(double opening, double p_in, double p_out, double h_in) const {
    const double rho = par->props.eval(p_in, h_in).rho;
    return par->C_v * opening * std::sqrt(std::max(rho * (p_in - p_out), 0.0));
  }
};

/// Per-exchanger quantities at one instant: the 8 surrogate inputs, the 9
/// outputs, and the outlet flow.
struct HxSample {
  double T_a_in = 0, phi = 0, m_air = 0, P_amb = 0, m_in = 0, h_in = 0, h_out = 0, P_out = 0;
  double p1 = 0, pN = 0, h1 = 0, hN = 0, T_a_out = 0, Q_a = 0, M = 0, E = 0, Q_lat = 0;
  double m_out = 0;

  double mass_rate() const { return m_in - m_out; }
  double energy_rate() const { return m_in * h_in - m_out * h_out - Q_a; }
};

struct NetworkState {
  Vec ydot;
  std::vector<HxSample> hx;
  Vec p_dis, h_dis, m_comp;
  double p_liq = 0, h_liq = 0, p_suct = 0, h_suct = 0;
  bool clamped = false;
};

class PlantOracle {
 public:
  PlantOracle(Topology topo, PlantParams par) : topo_(std::move(topo)), par_(par) {}

  const Topology& topology() const { return topo_; }
  const PlantParams& params() const { return par_; }

  /// State with every exchanger at the given (p, h) per kind.
  Vec state_at(double p_cond, double h_cond, double p_evap, double h_evap) const {
    Vec y(topo_.state_dim());
    for (int i = 0; i < topo_.n_hx(); ++i) {
      const HxKind k = topo_.kind(i);
      const auto [M, E] = k == HxKind::Condenser ? par_.props.mass_energy(p_cond, h_cond, par_.volume(k))
                                                 : par_.props.mass_energy(p_evap, h_evap, par_.volume(k));
      y(topo_.mass_index(i)) = M;
      y(topo_.energy_index(i)) = E;
    }
    return y;
  }

  NetworkState evaluate(const Vec& y, const ActuationProfile& prof, long idx) const {
    require(y.size() == topo_.state_dim(), "oracle: state dimension mismatch");
    const int nc = topo_.n_c, nv = topo_.n_v, nh = topo_.n_hx();
    const PropertyMap& pm = par_.props;
    ComponentLaws law{&par_};
    NetworkState ns;
    Vec p(nh), h(nh), T(nh);
    for (int i = 0; i < nh; ++i) {
      const auto ph = pm.from_mass_energy(y(topo_.mass_index(i)), y(topo_.energy_index(i)), par_.volume(topo_.kind(i)));
      p(i) = ph.p;
      h(i) = ph.h;
      ns.clamped = ns.clamped || ph.clamped;
      T(i) = pm.eval(ph.p, ph.h).T;
    }
    auto speed = [&](int k) { return prof.speed(idx, k); };
    auto opening = [&](int j) { return prof.opening(idx, j); };

    // Suction manifold: evaporator outflows balance compressor intake.
    auto suction_mix = [&](double ps) {
      double m = 0.0, mh = 0.0, hsum = 0.0;
      for (int j = 0; j < nv; ++j) {
        const int e = topo_.evaporator(j);
        const double f = par_.G_suct * (p(e) - ps);
        hsum += h(e);
        if (f > 0.0) {
          m += f;
          mh += f * h(e);
        }
      }
      return m > 0.0 ? mh / m : hsum / nv;
    };
    auto suction_balance = [&](double ps) {
      const double hs = suction_mix(ps);
      double g = 0.0;
      for (int j = 0; j < nv; ++j) g += par_.G_suct * (p(topo_.evaporator(j)) - ps);
      for (int k = 0; k < nc; ++k) g -= law.compressor_flow(speed(k), ps, hs);
      return g;
    };
    double pe_max = -1e300, pe_min = 1e300;
    for (int j = 0; j < nv; ++j) {
      pe_max = std::max(pe_max, p(topo_.evaporator(j)));
      pe_min = std::min(pe_min, p(topo_.evaporator(j)));
    }
    ns.p_suct = scalar_root(suction_balance, std::min(pm.p_min, pe_min), pe_max, ns.clamped);
    ns.h_suct = suction_mix(ns.p_suct);

    // Liquid manifold: condenser outflows balance valve flows.
    auto liquid_mix = [&](double pl) {
      double m = 0.0, mh = 0.0, hsum = 0.0;
      for (int k = 0; k < nc; ++k) {
        const int c = topo_.condenser(k);
        const double f = par_.G_liq * (p(c) - pl);
        hsum += h(c);
        if (f > 0.0) {
          m += f;
          mh += f * h(c);
        }
      }
      return m > 0.0 ? mh / m : hsum / nc;
    };
    auto liquid_balance = [&](double pl) {
      const double hl = liquid_mix(pl);
      double g = 0.0;
      for (int k = 0; k < nc; ++k) g += par_.G_liq * (p(topo_.condenser(k)) - pl);
      for (int j = 0; j < nv; ++j) g -= law.valve_flow(opening(j), pl, p(topo_.evaporator(j)), hl);
      return g;
    };
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < nh; ++i) lo = std::min(lo, p(i));
    for (int k = 0; k < nc; ++k) hi = std::max(hi, p(topo_.condenser(k)));
    ns.p_liq = scalar_root(liquid_balance, lo, hi, ns.clamped);
    ns.h_liq = liquid_mix(ns.p_liq);

    // Branch flows.
    ns.m_comp.resize(nc);
    ns.p_dis.resize(nc);
    ns.h_dis.resize(nc);
    Vec m_cond(nc), m_valve(nv), m_evap(nv);
    for (int k = 0; k < nc; ++k) ns.m_comp(k) = law.compressor_flow(speed(k), ns.p_suct, ns.h_suct);
    for (int k = 0; k < nc; ++k) m_cond(k) = par_.G_liq * (p(topo_.condenser(k)) - ns.p_liq);
    for (int j = 0; j < nv; ++j) m_valve(j) = law.valve_flow(opening(j), ns.p_liq, p(topo_.evaporator(j)), ns.h_liq);
    for (int j = 0; j < nv; ++j) m_evap(j) = par_.G_suct * (p(topo_.evaporator(j)) - ns.p_suct);

    // Close both manifold balances exactly so total mass telescopes.
    balance(m_cond, m_valve);
    balance(m_evap, ns.m_comp);

    for (int k = 0; k < nc; ++k) {
      ns.p_dis(k) = p(topo_.condenser(k)) + ns.m_comp(k) / par_.G_dis;
      ns.h_dis(k) = law.compressor_enthalpy(ns.p_suct, ns.p_dis(k), ns.h_suct);
    }

    ns.hx.resize(nh);
    ns.ydot.resize(topo_.state_dim());
    for (int i = 0; i < nh; ++i) {
      const HxKind kind = topo_.kind(i);
      HxSample& s = ns.hx[i];
      s.T_a_in = prof.T_air(idx, i);
      s.phi = prof.phi_air(idx, i);
      s.m_air = prof.m_air(idx, i);
      s.P_amb = prof.P_amb(idx, i);
      if (kind == HxKind::Condenser) {
        const int k = i;
        s.m_in = ns.m_comp(k);
        s.h_in = ns.h_dis(k);
        s.m_out = m_cond(k);
        s.h_out = s.m_out >= 0.0 ? h(i) : ns.h_liq;
        s.P_out = ns.p_liq;
      } else {
        const int j = i - nc;
        s.m_in = m_valve(j);
        s.h_in = ns.h_liq;
        s.m_out = m_evap(j);
        s.h_out = s.m_out >= 0.0 ? h(i) : ns.h_suct;
        s.P_out = ns.p_suct;
      }
      s.Q_a = par_.UA(kind) * (T(i) - s.T_a_in);
      s.T_a_out = s.T_a_in + s.Q_a / (s.m_air * par_.cp_air);
      s.Q_lat = kind == HxKind::Condenser ? par_.latent_fraction * std::max(s.Q_a, 0.0) : 0.0;
      s.M = y(topo_.mass_index(i));
      s.E = y(topo_.energy_index(i));
      s.pN = p(i);
      s.p1 = p(i) + 0.5 * s.m_in / par_.outlet_conductance(kind);
      s.hN = h(i);
      s.h1 = 0.5 * (s.h_in + h(i));
      ns.ydot(topo_.mass_index(i)) = s.mass_rate();
      ns.ydot(topo_.energy_index(i)) = s.energy_rate();
    }
    return ns;
  }

  Vec rhs(const Vec& y, const ActuationProfile& prof, long idx) const { return evaluate(y, prof, idx).ydot; }

  /// One RK4 step with actuation held at sample `idx`. When `flux` is given
  /// it receives the stage-weighted per-exchanger fluxes rebuilt from the
  /// reported flows (mass rate, energy rate per exchanger).
  Vec rk4_step(const Vec& y, const ActuationProfile& prof, long idx, double dt, Vec* flux = nullptr) const {
    const NetworkState s1 = evaluate(y, prof, idx);
    const NetworkState s2 = evaluate(y + 0.5 * dt * s1.ydot, prof, idx);
    const NetworkState s3 = evaluate(y + 0.5 * dt * s2.ydot, prof, idx);
    const NetworkState s4 = evaluate(y + dt * s3.ydot, prof, idx);
    if (flux) {
      flux->setZero(topo_.state_dim());
      const double w[4] = {1.0, 2.0, 2.0, 1.0};
      const NetworkState* st[4] = {&s1, &s2, &s3, &s4};
      for (int q = 0; q < 4; ++q)
        for (int i = 0; i < topo_.n_hx(); ++i) {
          (*flux)(topo_.mass_index(i)) += w[q] * st[q]->hx[i].mass_rate() * dt / 6.0;
          (*flux)(topo_.energy_index(i)) += w[q] * st[q]->hx[i].energy_rate() * dt / 6.0;
        }
    }
    Vec out = y + dt / 6.0 * (s1.ydot + 2.0 * s2.ydot + 2.0 * s3.ydot + s4.ydot);
    if (!out.allFinite()) throw NumericalFailure("oracle: non-finite state after RK4 step at sample " + std::to_string(idx));
    return out;
  }

  /// Integrates `steps` samples of the profile starting at sample `first`.
  /// Row s of the result is the state at time (first + s) * dt.
  Eigen::MatrixXd simulate(const Vec& y0, const ActuationProfile& prof, long first, long steps) const {
    prof.validate(topo_);
    require(first >= 0 && first + steps <= prof.steps(), "oracle: simulation range exceeds profile");
    Eigen::MatrixXd Y(steps + 1, y0.size());
    Y.row(0) = y0.transpose();
    Vec y = y0;
    for (long s = 0; s < steps; ++s) {
      try {
        y = rk4_step(y, prof, first + s, prof.dt);
      } catch (const NumericalFailure& e) {
        throw NumericalFailure(std::string(e.what()) + " (oracle step " + std::to_string(first + s) + ")");
      }
      Y.row(s + 1) = y.transpose();
    }
    return Y;
  }

  /// Runs constant actuation (sample 0 of `prof`) until the state settles.
  Vec warm_up(const Vec& y0, const ActuationProfile& prof, long seconds) const {
    ActuationProfile hold = prof.slice(0, 2);
    Vec y = y0;
    for (long s = 0; s < seconds; ++s) y = rk4_step(y, hold, 0, prof.dt);
    return y;
  }

  Vec default_guess() const { return state_at(2.2e6, 2.6e5, 6.0e5, 3.4e5); }

 private:
  template <class F>
  static double scalar_root(F&& f, double lo, double hi, bool& clamped) {
    double flo = f(lo), fhi = f(hi);
    if (flo == 0.0) return lo;
    if (fhi == 0.0) return hi;
    if ((flo > 0.0) == (fhi > 0.0)) {
      // Balance cannot close inside the bracket; take the end with the
      // smaller imbalance and let the manifold correction absorb it.
      clamped = true;
      return std::abs(flo) < std::abs(fhi) ? lo : hi;
    }
    std::uintmax_t iters = 200;
    boost::math::tools::eps_tolerance<double> tol(50);
    auto r = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi, tol, iters);
    return 0.5 * (r.first + r.second);
  }

  /// Makes sum(in) == sum(out): scales the non-negative outflows when both
  /// sides carry flow, otherwise shifts the inflows equally.
  static void balance(Vec& in, Vec& out) {
    const double si = in.sum(), so = out.sum();
    if (so > 0.0 && si > 0.0) {
      out *= si / so;
    } else {
      in.array() -= (si - so) / static_cast<double>(in.size());
    }
  }

  Topology topo_;
  PlantParams par_;
};

}  // namespace thermoloop::plant
