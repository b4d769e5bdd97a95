#pragma once

// Central finite-difference oracle for tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>

#include "thermoloop/nn/autodiff.hpp"

namespace fdcheck {

using thermoloop::nn::ParameterSet;
using thermoloop::nn::Tape;
using thermoloop::nn::Var;

/// `loss` builds a scalar on the given tape from the parameter set.
using LossBuilder = std::function<Var(Tape&, ParameterSet&)>;

inline double eval_loss(const LossBuilder& loss, ParameterSet& set) {
  Tape tape(false);
  return loss(tape, set).value()(0, 0);
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every scalar parameter. Entries whose magnitudes are both
/// tiny are compared absolutely.
inline double max_rel_error(const LossBuilder& loss, ParameterSet& set, double h = 1e-5,
                            double abs_floor = 1e-7) {
  set.zero_grad();
  {
    Tape tape;
    Var out = loss(tape, set);
    tape.backward(out);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto& p = set[i];
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double orig = p.value.data()[k];
      p.value.data()[k] = orig + h;
      const double fp = eval_loss(loss, set);
      p.value.data()[k] = orig - h;
      const double fm = eval_loss(loss, set);
      p.value.data()[k] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = p.grad.data()[k];
      const double denom = std::max({std::abs(fd), std::abs(ad), abs_floor});
      const double diff = std::abs(fd - ad);
      if (diff < abs_floor) continue;
      worst = std::max(worst, diff / denom);
    }
  }
  return worst;
}

}  // namespace fdcheck
