#pragma once

// Windowing, losses and the training loop for the heat-exchanger surrogate.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "thermoloop/nn/optim.hpp"
#include "thermoloop/pinode/model.hpp"

namespace thermoloop::pinode {

/// Physical balances: Mdot = m_in - m_out, Edot = m_in h_in - m_out h_out - Q_a.
inline std::pair<double, double> true_rates(double m_in, double m_out, double h_in, double h_out, double Q_a) {
  return {m_in - m_out, m_in * h_in - m_out * h_out - Q_a};
}

/// A series in normalized units: Z holds the 17 data columns, R the
/// normalized (M_r, E_hx) rates per second.
struct NormalizedSeries {
  Eigen::MatrixXd Z, R;
  long steps() const { return Z.rows(); }
  Tensor X(long r) const { return Z.row(r).head(plant::kInputs); }
  Tensor S(long r) const { return Z.row(r).segment(plant::kInputs + plant::kChannelM, 2); }
  Tensor Y(long r) const { return Z.row(r).tail(plant::kOutputs); }
};

inline NormalizedSeries normalize_series(const plant::HxSeries& s, const ColumnScaler& sc) {
  Eigen::MatrixXd all(s.steps(), plant::kInputs + plant::kOutputs);
  all << s.X, s.Y;
  NormalizedSeries n;
  n.Z = sc.normalize(all);
  const Eigen::MatrixXd r = s.true_rates();
  n.R.resize(s.steps(), 2);
  n.R.col(0) = r.col(0) * sc.rate_scale(plant::kInputs + plant::kChannelM);
  n.R.col(1) = r.col(1) * sc.rate_scale(plant::kInputs + plant::kChannelE);
  return n;
}

/// Scaler fitted jointly over every series a model will see.
inline ColumnScaler fit_scaler(const std::vector<const plant::HxSeries*>& series) {
  long rows = 0;
  for (auto* s : series) rows += s->steps();
  Eigen::MatrixXd all(rows, plant::kInputs + plant::kOutputs);
  long r = 0;
  for (auto* s : series) {
    all.middleRows(r, s->steps()) << s->X, s->Y;
    r += s->steps();
  }
  return ColumnScaler::fit(all);
}

struct WindowRef {
  int series = 0;
  long start = 0;  // first encoder index
};

/// Windows fully inside [begin, end) with the given stride.
inline std::vector<WindowRef> enumerate_windows(const std::vector<NormalizedSeries>& data, long begin, long end,
                                                const ModelConfig& cfg, long stride) {
  require(stride >= 1, "window stride must be >= 1");
  std::vector<WindowRef> out;
  const long len = cfg.T_enc + cfg.T_dec;
  for (int i = 0; i < static_cast<int>(data.size()); ++i) {
    const long stop = std::min(end, data[i].steps());
    for (long s = begin; s + len <= stop; s += stride) out.push_back({i, s});
  }
  return out;
}

inline WindowBatch make_batch(const std::vector<NormalizedSeries>& data, const std::vector<WindowRef>& refs,
                              const ModelConfig& cfg, double dt) {
  require(!refs.empty(), "make_batch: no windows");
  const Eigen::Index B = static_cast<Eigen::Index>(refs.size());
  WindowBatch w;
  w.dt = dt;
  auto alloc = [&](std::vector<Tensor>& v, int T, int width) { v.assign(T, Tensor(B, width)); };
  alloc(w.X_enc, cfg.T_enc, plant::kInputs);
  alloc(w.S_enc, cfg.T_enc, 2);
  alloc(w.X_dec, cfg.T_dec, plant::kInputs);
  alloc(w.S_dec, cfg.T_dec, 2);
  alloc(w.Y, cfg.T_dec, plant::kOutputs);
  alloc(w.rates, cfg.T_dec, 2);
  for (Eigen::Index b = 0; b < B; ++b) {
    const NormalizedSeries& s = data[refs[b].series];
    for (int t = 0; t < cfg.T_enc; ++t) {
      const long r = refs[b].start + t;
      w.X_enc[t].row(b) = s.X(r);
      w.S_enc[t].row(b) = s.S(r);
    }
    for (int t = 0; t < cfg.T_dec; ++t) {
      const long r = refs[b].start + cfg.T_enc + t;
      w.X_dec[t].row(b) = s.X(r);
      w.S_dec[t].row(b) = s.S(r);
      w.Y[t].row(b) = s.Y(r);
      w.rates[t].row(b) = s.R.row(r);
    }
  }
  return w;
}

struct Losses {
  double data = 0, phys = 0, cons = 0, total = 0;
};

/// Value form over stacked matrices: Yp/Yt (n x 9), rp/rt (n x 2).
inline Losses compute_losses(const Eigen::MatrixXd& Yp, const Eigen::MatrixXd& Yt, const Eigen::MatrixXd& rp,
                             const Eigen::MatrixXd& rt, double lambda_phys, double lambda_cons) {
  require(Yp.rows() == Yt.rows() && Yp.cols() == Yt.cols() && rp.rows() == rt.rows() && rp.cols() == rt.cols(),
          "compute_losses: shape mismatch");
  Losses l;
  l.data = (Yp - Yt).array().square().mean();
  l.phys = (rp - rt).array().square().mean();
  if (Yp.cols() > plant::kChannelE)
    l.cons = (Yp.col(plant::kChannelM) - Yt.col(plant::kChannelM)).array().square().mean() +
             (Yp.col(plant::kChannelE) - Yt.col(plant::kChannelE)).array().square().mean();
  l.total = l.data + lambda_phys * l.phys + lambda_cons * l.cons;
  return l;
}

struct LossVars {
  Var data, phys, cons, total;
};

inline LossVars compute_losses(Tape& tape, const ForwardResult& f, const WindowBatch& w, double lambda_phys,
                               double lambda_cons) {
  const double T = static_cast<double>(f.Y.size());
  Var data, phys, cons;
  for (std::size_t t = 0; t < f.Y.size(); ++t) {
    Var e = f.Y[t] - tape.constant(w.Y[t]);
    Var r = f.rates[t] - tape.constant(w.rates[t]);
    Var d = mean(square(e));
    Var p = mean(square(r));
    Var c = mean(square(slice_cols(e, plant::kChannelM, 1))) + mean(square(slice_cols(e, plant::kChannelE, 1)));
    data = data.valid() ? data + d : d;
    phys = phys.valid() ? phys + p : p;
    cons = cons.valid() ? cons + c : c;
  }
  LossVars l{scale(data, 1.0 / T), scale(phys, 1.0 / T), scale(cons, 1.0 / T), Var{}};
  l.total = l.data + scale(l.phys, lambda_phys) + scale(l.cons, lambda_cons);
  return l;
}

struct TrainConfig {
  double lambda_phys = 0.5;
  double lambda_cons = 0.5;
  double learning_rate = 1e-3;
  double lr_factor = 0.5;
  int patience = 25;
  double clip_norm = 1.0;
  int batch_size = 64;
  int epochs = 500;
  long stride = 4;        // training window stride
  long val_stride = 10;   // validation window stride
  unsigned long seed = 1;
  double time_budget_s = 0.0;  // stop after this wall time when positive

  void validate() const {
    require(lambda_phys >= 0.0 && lambda_cons >= 0.0, "TrainConfig: loss weights must be >= 0");
    require(patience >= 1, "TrainConfig: patience must be >= 1");
    require(batch_size >= 1 && epochs >= 0, "TrainConfig: batch size >= 1 and epochs >= 0");
    require(learning_rate > 0.0 && clip_norm > 0.0, "TrainConfig: positive learning rate and clip norm");
  }
};

struct EpochRecord {
  int epoch = 0;
  Losses train, val;
  double learning_rate = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  bool diverged = false;
  double seconds = 0.0;
};

/// Validation losses without dropout, averaged over batches by window count.
inline Losses evaluate(PinodeModel& model, const std::vector<NormalizedSeries>& data,
                       const std::vector<WindowRef>& windows, const TrainConfig& tc, double dt) {
  Losses acc;
  std::mt19937_64 rng(0);
  const std::size_t bs = static_cast<std::size_t>(tc.batch_size);
  for (std::size_t i = 0; i < windows.size(); i += bs) {
    std::vector<WindowRef> refs(windows.begin() + i, windows.begin() + std::min(windows.size(), i + bs));
    WindowBatch w = make_batch(data, refs, model.cfg, dt);
    Tape tape(false);
    ForwardResult f = model.forward(tape, w, false, rng);
    LossVars l = compute_losses(tape, f, w, tc.lambda_phys, tc.lambda_cons);
    const double n = static_cast<double>(refs.size());
    acc.data += n * l.data.value()(0, 0);
    acc.phys += n * l.phys.value()(0, 0);
    acc.cons += n * l.cons.value()(0, 0);
    acc.total += n * l.total.value()(0, 0);
  }
  const double n = static_cast<double>(windows.size());
  return Losses{acc.data / n, acc.phys / n, acc.cons / n, acc.total / n};
}

/// Alternates validation and training epochs; keeps the weights with the
/// lowest validation total loss.
inline TrainResult train(PinodeModel& model, const std::vector<NormalizedSeries>& train_data,
                         const std::vector<WindowRef>& train_windows, const std::vector<NormalizedSeries>& val_data,
                         const std::vector<WindowRef>& val_windows, const TrainConfig& tc, double dt = 1.0) {
  tc.validate();
  TrainResult res;
  if (tc.epochs == 0) return res;
  require(!train_windows.empty() && !val_windows.empty(), "train: datasets must be nonempty");
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(tc.seed);
  nn::OptimizerState opt(model.params, tc.learning_rate);
  nn::PlateauScheduler sched(tc.lr_factor, tc.patience);
  ParameterSet best = model.params;
  std::vector<WindowRef> order = train_windows;
  const std::size_t bs = static_cast<std::size_t>(tc.batch_size);

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Losses tr;
    for (std::size_t i = 0; i < order.size(); i += bs) {
      std::vector<WindowRef> refs(order.begin() + i, order.begin() + std::min(order.size(), i + bs));
      WindowBatch w = make_batch(train_data, refs, model.cfg, dt);
      Tape tape;
      model.params.zero_grad();
      ForwardResult f = model.forward(tape, w, true, rng);
      LossVars l = compute_losses(tape, f, w, tc.lambda_phys, tc.lambda_cons);
      tape.backward(l.total);
      nn::clip_gradients(model.params, tc.clip_norm);
      nn::adam_step(model.params, opt);
      const double n = static_cast<double>(refs.size());
      tr.data += n * l.data.value()(0, 0);
      tr.phys += n * l.phys.value()(0, 0);
      tr.cons += n * l.cons.value()(0, 0);
      tr.total += n * l.total.value()(0, 0);
    }
    const double n = static_cast<double>(order.size());
    tr = Losses{tr.data / n, tr.phys / n, tr.cons / n, tr.total / n};
    EpochRecord rec{epoch, tr, evaluate(model, val_data, val_windows, tc, dt), opt.learning_rate};
    res.history.push_back(rec);
    if (!std::isfinite(rec.val.total)) {
      res.diverged = true;
      break;
    }
    if (rec.val.total < res.best_val) {
      res.best_val = rec.val.total;
      res.best_epoch = epoch;
      best = model.params;
    }
    sched.observe(rec.val.total, opt);
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (tc.time_budget_s > 0.0 && elapsed > tc.time_budget_s) break;
  }
  model.params.assign_values(best);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline void write_history_csv(const std::vector<EpochRecord>& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,L_data,L_phys,L_cons,L_total,val_L_data,val_L_phys,val_L_cons,val_L_total,learning_rate\n";
  out << std::setprecision(10);
  for (const auto& r : h)
    out << r.epoch << ',' << r.train.data << ',' << r.train.phys << ',' << r.train.cons << ',' << r.train.total << ','
        << r.val.data << ',' << r.val.phys << ',' << r.val.cons << ',' << r.val.total << ',' << r.learning_rate << '\n';
}

}  // namespace thermoloop::pinode
