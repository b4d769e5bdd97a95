#pragma once

#include <cmath>

#include "thermoloop/bayesopt/bayesopt.hpp"
#include "thermoloop/system/simulator.hpp"

namespace thermoloop::bayesopt {

/// Tunable solver parameters per mode, all log-uniform.
inline ParamSpace space_for(system::SolverMode mode) {
  ParamSpace s;
  s.dims = {{"eps_dt", 1e-4, 0.5, true}, {"eps_soln", 1e-8, 1e-3, true}};
  if (mode == system::SolverMode::Algebraic) return s;
  s.dims.push_back({"h_max", 1.0, 50.0, true});
  s.dims.push_back({"h_min", 1e-4, 0.1, true});
  if (mode == system::SolverMode::Ida) {
    s.dims.push_back({"dt_out_ida", 0.5, 10.0, true});
  } else {
    s.dims.push_back({"dt_out_min_dassl", 0.1, 5.0, true});
    s.dims.push_back({"n_max_dassl", 100.0, 10000.0, true});
  }
  return s;
}

/// Copy a parameter vector into a system configuration by dimension name.
inline void apply_theta(system::SystemConfig& cfg, const ParamSpace& space, const std::vector<double>& theta) {
  require(static_cast<int>(theta.size()) == space.size(), "apply_theta: dimension mismatch");
  for (int i = 0; i < space.size(); ++i) {
    const std::string& n = space.dims[i].name;
    const double v = theta[i];
    if (n == "eps_dt") {
      cfg.eps_dt = v;
    } else if (n == "eps_soln") {
      cfg.eps_soln = v;
    } else if (n == "h_max") {
      cfg.dae.h_max = v;
    } else if (n == "h_min") {
      cfg.dae.h_min = v;
    } else if (n == "dt_out_ida") {
      cfg.ida_output_interval = v;
    } else if (n == "dt_out_min_dassl") {
      cfg.dassl_min_output = v;
    } else if (n == "n_max_dassl") {
      cfg.dae.dassl_max_steps = static_cast<int>(std::lround(v));
    } else {
      throw ContractViolation("apply_theta: unknown parameter " + n);
    }
  }
}

}  // namespace thermoloop::bayesopt
