#pragma once

// Synthetic refrigerant property map: temperature and density are affine in
// (p, h) around a reference point. Lumped states (M, E) in a fixed volume
// invert to (p, h) in closed form because h = u + p/rho.

#include <algorithm>
#include <string>
#include <utility>

#include "thermoloop/core/errors.hpp"

namespace thermoloop::plant {

struct PropertyPoint {
  double T = 0.0;    // K
  double rho = 0.0;  // kg/m^3
  bool clamped = false;
};

struct PressureEnthalpy {
  double p = 0.0;  // Pa
  double h = 0.0;  // J/kg
  bool clamped = false;
};

struct PropertyMap {
  double p0 = 1.5e6;
  double h0 = 3.0e5;
  double T0 = 310.0;
  double rho0 = 150.0;
  double dT_dp = 3e-5;
  double dT_dh = 1e-4;
  double drho_dp = 6e-5;
  double drho_dh = -4e-4;
  double p_min = 2e5, p_max = 6e6;
  double h_min = 1.5e5, h_max = 4.5e5;

  bool inside(double p, double h) const { return p >= p_min && p <= p_max && h >= h_min && h <= h_max; }

  /// Evaluates at (p, h) clamped into the envelope; `clamped` reports it.
  PropertyPoint eval(double p, double h) const {
    PropertyPoint out;
    out.clamped = !inside(p, h);
    const double pc = std::clamp(p, p_min, p_max), hc = std::clamp(h, h_min, h_max);
    out.T = T0 + dT_dp * (pc - p0) + dT_dh * (hc - h0);
    out.rho = rho0 + drho_dp * (pc - p0) + drho_dh * (hc - h0);
    return out;
  }

  /// (p, h) of a lumped volume holding mass M and internal energy E.
  PressureEnthalpy from_mass_energy(double M, double E, double V) const {
    if (!(M > 0.0) || !(V > 0.0))
      throw NumericalFailure("property map: refrigerant mass must stay positive (M=" + std::to_string(M) + ")");
    const double rho = M / V, u = E / M;
    // rho = rho0 + a (p - p0) + b (u + p/rho - h0), solved for p.
    const double a = drho_dp, b = drho_dh;
    const double denom = a + b / rho;
    if (!(denom > 0.0)) throw NumericalFailure("property map: density too low to invert (rho=" + std::to_string(rho) + ")");
    PressureEnthalpy out;
    out.p = (rho - rho0 + a * p0 - b * (u - h0)) / denom;
    out.h = u + out.p / rho;
    out.clamped = !inside(out.p, out.h);
    return out;
  }

  /// Inverse of from_mass_energy: (M, E) for a volume at (p, h).
  std::pair<double, double> mass_energy(double p, double h, double V) const {
    const double rho = rho0 + drho_dp * (p - p0) + drho_dh * (h - h0);
    require(rho > 0.0, "property map: non-positive density at requested (p, h)");
    const double M = rho * V;
    return {M, M * (h - p / rho)};
  }
};

}  // namespace thermoloop::plant
