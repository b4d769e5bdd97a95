#pragma once

// Adam, global-norm clipping and a reduce-on-plateau learning-rate schedule.

#include <cmath>
#include <limits>
#include <vector>

#include "thermoloop/nn/autodiff.hpp"

namespace thermoloop::nn {

struct OptimizerState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  explicit OptimizerState(const ParameterSet& set, double lr = 1e-3) : learning_rate(lr) {
    for (const auto& p : set) {
      m.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
    }
  }
};

/// One bias-corrected Adam update using the gradients stored in `set`.
inline void adam_step(ParameterSet& set, OptimizerState& st) {
  require(st.m.size() == set.size(), "optimizer state does not match parameter set");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < set.size(); ++i) {
    Parameter& p = set[i];
    require(p.grad.rows() == st.m[i].rows() && p.grad.cols() == st.m[i].cols(),
            "adam: shape mismatch for " + p.name);
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * p.grad;
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * p.grad.cwiseAbs2();
    const auto m_hat = st.m[i].array() / bc1;
    const auto v_hat = st.v[i].array() / bc2;
    p.value.array() -= st.learning_rate * m_hat / (v_hat.sqrt() + st.eps);
  }
}

inline double global_grad_norm(const ParameterSet& set) {
  double sq = 0.0;
  for (const auto& p : set) sq += p.grad.squaredNorm();
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint Euclidean norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_gradients(ParameterSet& set, double max_norm = 1.0) {
  require(max_norm > 0.0, "clip_gradients: max_norm must be positive");
  const double norm = global_grad_norm(set);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : set) p.grad *= f;
  }
  return norm;
}

/// Same rule on a flat vector, for callers without a ParameterSet.
inline Eigen::VectorXd clip_gradients(const Eigen::VectorXd& g, double max_norm = 1.0) {
  require(max_norm > 0.0, "clip_gradients: max_norm must be positive");
  const double norm = g.norm();
  return norm > max_norm ? Eigen::VectorXd(g * (max_norm / norm)) : g;
}

class PlateauScheduler {
 public:
  PlateauScheduler(double factor = 0.5, int patience = 25) : factor_(factor), patience_(patience) {
    require(factor > 0.0 && factor < 1.0, "plateau factor must be in (0,1)");
    require(patience >= 1, "plateau patience must be >= 1");
  }

  /// Feeds one validation loss; returns true when the rate was reduced.
  bool observe(double val_loss, OptimizerState& st) {
    if (val_loss < best_) {
      best_ = val_loss;
      bad_epochs_ = 0;
      return false;
    }
    if (++bad_epochs_ > patience_) {
      st.learning_rate *= factor_;
      bad_epochs_ = 0;
      return true;
    }
    return false;
  }

  double best() const { return best_; }

 private:
  double factor_;
  int patience_;
  int bad_epochs_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

}  // namespace thermoloop::nn
