#pragma once

// System-level bias corrector for the condenser mass/energy channels, with
// its deployment-time smoothing (GP posterior mean, then EMA) and the
// [-1, 1] range gate.

#include <Eigen/Dense>

#include <deque>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "thermoloop/core/normalize.hpp"
#include "thermoloop/nn/layers.hpp"
#include "thermoloop/nn/optim.hpp"
#include "thermoloop/nn/weights_io.hpp"

namespace thermoloop::corrector {

using nn::ParameterSet;
using nn::Tensor;

struct GpKernel {
  double C = 1.0;         // signal variance
  double ell = 2000.0;    // length scale, s
  double noise = 0.3;     // white-noise variance
  double jitter = 1e-10;  // extra diagonal
};

struct CorrectorConfig {
  long segment_start = 950;
  long segment_length = 850;
  double learning_rate = 1e-3;
  int epochs = 500000;  // desk runs override this
  int hidden = 64;
  double bound = nn::kDefaultConstrainScale;
  GpKernel kernel;
  int gp_window = 512;
  double ema_alpha = 0.95;
  unsigned long seed = 1;

  void validate() const {
    require(segment_start >= 0 && segment_length >= 0, "CorrectorConfig: negative segment");
    require(ema_alpha > 0.0 && ema_alpha < 1.0, "CorrectorConfig: EMA alpha must lie in (0,1)");
    require(bound > 0.0 && hidden >= 1 && gp_window >= 2, "CorrectorConfig: bound, hidden, window");
  }
};

/// One training pair: normalized input vector and the normalized predicted
/// and benchmark mass/energy channels, ordered (E_1.., M_1..).
struct CorrectionRecord {
  Eigen::VectorXd z_in, m_pred, m_bench;
};

class CorrectorNet {
 public:
  ParameterSet params;
  nn::Mlp mlp;
  double bound = nn::kDefaultConstrainScale;
  int d_in = 0, d_out = 0;
  // Deployment metadata: the exchangers whose channels are corrected and the
  // scaling of the (E.., M..) vector, fitted on the benchmark segment.
  std::vector<int> hx;
  ColumnScaler m_scaler;

  static CorrectorNet create(int d_in, int d_out, int hidden, double bound, unsigned long seed) {
    require(d_in >= 1 && d_out >= 1, "corrector dimensions must be positive");
    std::mt19937_64 rng(seed);
    CorrectorNet c;
    c.d_in = d_in;
    c.d_out = d_out;
    c.bound = bound;
    c.mlp = nn::Mlp::create(c.params, "corr", {d_in, hidden, hidden, d_out}, nn::Activation::Sigmoid, rng);
    return c;
  }

  /// Rows of z (batch x d_in) to raw corrections (batch x d_out).
  Tensor forward_values(const Tensor& z) const {
    require(z.cols() == d_in, "corrector: expected " + std::to_string(d_in) + " inputs, got " + std::to_string(z.cols()));
    return nn::constrain_tanh_values(mlp.forward_values(params, z), bound);
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& z) const {
    return forward_values(z.transpose()).row(0).transpose();
  }

  nn::Var forward(nn::Tape& tape, nn::Var z) { return nn::constrain_tanh(mlp.forward(tape, params, z), bound); }

  nlohmann::json to_checkpoint() const {
    nlohmann::json meta;
    meta["corrector"] = {{"d_in", d_in}, {"d_out", d_out}, {"hidden", params[mlp.layers[0].W].value.cols()}, {"bound", bound}};
    meta["corrector"]["hx"] = hx;
    meta["corrector"]["m_lo"] = std::vector<double>(m_scaler.lo.data(), m_scaler.lo.data() + m_scaler.size());
    meta["corrector"]["m_hi"] = std::vector<double>(m_scaler.hi.data(), m_scaler.hi.data() + m_scaler.size());
    return nn::to_json(params, meta);
  }

  static CorrectorNet from_checkpoint(const nlohmann::json& doc) {
    require(doc.contains("meta") && doc["meta"].contains("corrector"), "checkpoint lacks corrector meta block");
    const auto& m = doc["meta"]["corrector"];
    CorrectorNet c = create(m.at("d_in").get<int>(), m.at("d_out").get<int>(), m.at("hidden").get<int>(),
                            m.at("bound").get<double>(), 0);
    nn::from_json(doc, c.params);
    c.hx = m.value("hx", std::vector<int>{});
    const auto lo = m.value("m_lo", std::vector<double>{}), hi = m.value("m_hi", std::vector<double>{});
    require(lo.size() == hi.size(), "corrector checkpoint: scaler size mismatch");
    c.m_scaler.lo = Eigen::Map<const Eigen::VectorXd>(lo.data(), lo.size());
    c.m_scaler.hi = Eigen::Map<const Eigen::VectorXd>(hi.data(), hi.size());
    return c;
  }
};

inline Eigen::MatrixXd stack(const std::vector<CorrectionRecord>& recs, Eigen::VectorXd CorrectionRecord::*field) {
  Eigen::MatrixXd M(recs.size(), (recs.front().*field).size());
  for (std::size_t i = 0; i < recs.size(); ++i) M.row(i) = (recs[i].*field).transpose();
  return M;
}

/// Mean over records of the squared norm of (pred + correction - bench).
inline double correction_loss(const CorrectorNet& net, const std::vector<CorrectionRecord>& recs) {
  require(!recs.empty(), "correction_loss: no records");
  const Eigen::MatrixXd Z = stack(recs, &CorrectionRecord::z_in);
  const Eigen::MatrixXd r = stack(recs, &CorrectionRecord::m_pred) + net.forward_values(Z) - stack(recs, &CorrectionRecord::m_bench);
  return r.rowwise().squaredNorm().mean();
}

/// Full-batch Adam on the correction loss. Returns the loss per epoch
/// (evaluated before each update) followed by the final loss.
inline std::vector<double> train_corrector(CorrectorNet& net, const std::vector<CorrectionRecord>& recs,
                                           const CorrectorConfig& cfg) {
  cfg.validate();
  require(!recs.empty(), "train_corrector: records must be nonempty");
  const Eigen::MatrixXd Z = stack(recs, &CorrectionRecord::z_in);
  const Eigen::MatrixXd gap = stack(recs, &CorrectionRecord::m_bench) - stack(recs, &CorrectionRecord::m_pred);
  nn::OptimizerState opt(net.params, cfg.learning_rate);
  std::vector<double> hist;
  hist.reserve(cfg.epochs + 1);
  const double n = static_cast<double>(recs.size());
  for (int e = 0; e < cfg.epochs; ++e) {
    nn::Tape tape;
    net.params.zero_grad();
    nn::Var phi = net.forward(tape, tape.constant(Z));
    // mean over rows of squared row norm = sum / n
    nn::Var loss = nn::scale(nn::sum(nn::square(phi - tape.constant(gap))), 1.0 / n);
    tape.backward(loss);
    hist.push_back(loss.value()(0, 0));
    if (!std::isfinite(hist.back())) throw NumericalFailure("corrector training diverged at epoch " + std::to_string(e));
    nn::adam_step(net.params, opt);
  }
  hist.push_back(correction_loss(net, recs));
  return hist;
}

// ---------------------------------------------------------------------------

inline double rbf(double a, double b, const GpKernel& k) {
  const double d = a - b;
  return k.C * std::exp(-0.5 * d * d / (k.ell * k.ell));
}

/// GP posterior mean at the observation times, one column per channel.
/// Each column is mean-centred before regression and the mean restored.
inline Eigen::MatrixXd gp_smooth(const Eigen::VectorXd& t, const Eigen::MatrixXd& y, const GpKernel& k = {}) {
  require(t.size() >= 2 && y.rows() == t.size(), "gp_smooth: need >= 2 points matching the time vector");
  for (Eigen::Index i = 1; i < t.size(); ++i) require(t(i) > t(i - 1), "gp_smooth: times must increase strictly");
  const Eigen::Index n = t.size();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) K(i, j) = rbf(t(i), t(j), k);
  Eigen::MatrixXd A = K;
  A.diagonal().array() += k.noise + k.jitter;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw NumericalFailure("gp_smooth: Gram matrix not positive definite");
  const Eigen::RowVectorXd mu = y.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - mu;
  return (K * llt.solve(yc)).rowwise() + mu;
}

/// s_0 = x_0, s_t = alpha s_{t-1} + (1 - alpha) x_t, per column.
inline Eigen::MatrixXd ema(const Eigen::MatrixXd& x, double alpha = 0.95) {
  require(alpha > 0.0 && alpha < 1.0, "ema: alpha must lie in (0,1)");
  Eigen::MatrixXd s = x;
  for (Eigen::Index i = 1; i < x.rows(); ++i) s.row(i) = alpha * s.row(i - 1) + (1.0 - alpha) * x.row(i);
  return s;
}

struct GateResult {
  Eigen::VectorXd value;
  bool skipped = false;
};

/// pred + phi when every entry stays in [-1, 1]; otherwise pred unchanged.
inline GateResult apply_correction(const Eigen::VectorXd& pred, const Eigen::VectorXd& phi) {
  require(pred.size() == phi.size(), "apply_correction: length mismatch");
  const Eigen::VectorXd c = pred + phi;
  if ((c.array() >= -1.0).all() && (c.array() <= 1.0).all()) return {c, false};
  return {pred, true};
}

/// Online pipeline: raw correction -> GP over the latest window -> EMA.
class CorrectionSmoother {
 public:
  CorrectionSmoother(const GpKernel& k, int window, double alpha) : k_(k), window_(window), alpha_(alpha) {}

  /// Pushes the raw correction at time t and returns the smoothed one.
  Eigen::VectorXd push(double t, const Eigen::VectorXd& raw) {
    if (!t_.empty() && !(t > t_.back())) {
      // Same instant re-evaluated: replace the last sample.
      t_.pop_back();
      raw_.pop_back();
      state_ = prev_state_;
      has_state_ = has_prev_;
    }
    t_.push_back(t);
    raw_.push_back(raw);
    while (static_cast<int>(t_.size()) > window_) {
      t_.pop_front();
      raw_.pop_front();
    }
    Eigen::VectorXd gp = raw;
    if (t_.size() >= 2) {
      const Eigen::Index n = static_cast<Eigen::Index>(t_.size());
      Eigen::VectorXd tv(n);
      Eigen::MatrixXd yv(n, raw.size());
      for (Eigen::Index i = 0; i < n; ++i) {
        tv(i) = t_[i];
        yv.row(i) = raw_[i].transpose();
      }
      gp = gp_posterior_last(tv, yv);
    }
    prev_state_ = state_;
    has_prev_ = has_state_;
    state_ = has_state_ ? Eigen::VectorXd(alpha_ * state_ + (1.0 - alpha_) * gp) : gp;
    has_state_ = true;
    last_gp_ = gp;
    return state_;
  }

  const Eigen::VectorXd& last_gp() const { return last_gp_; }

 private:
  Eigen::VectorXd gp_posterior_last(const Eigen::VectorXd& t, const Eigen::MatrixXd& y) const {
    const Eigen::Index n = t.size();
    Eigen::MatrixXd A(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) A(i, j) = rbf(t(i), t(j), k_);
    Eigen::RowVectorXd kstar = A.row(n - 1);
    A.diagonal().array() += k_.noise + k_.jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) throw NumericalFailure("correction smoother: Gram matrix not positive definite");
    const Eigen::RowVectorXd mu = y.colwise().mean();
    const Eigen::MatrixXd yc = y.rowwise() - mu;
    return (kstar * llt.solve(yc) + mu).transpose();
  }

  GpKernel k_;
  int window_;
  double alpha_;
  std::deque<double> t_;
  std::deque<Eigen::VectorXd> raw_;
  Eigen::VectorXd state_, prev_state_, last_gp_;
  bool has_state_ = false, has_prev_ = false;
};

}  // namespace thermoloop::corrector
