#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <boost/random/sobol.hpp>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "thermoloop/core/errors.hpp"

namespace thermoloop::bayesopt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Parameter space

struct Dimension {
  std::string name;
  double low = 0.0, high = 1.0;
  bool log = true;
};

/// Box of named parameters. The optimizer works in the unit cube; log
/// dimensions map through log10 so a uniform unit sample is log-uniform.
struct ParamSpace {
  std::vector<Dimension> dims;

  int size() const { return static_cast<int>(dims.size()); }

  void validate() const {
    require(!dims.empty(), "ParamSpace: no dimensions");
    for (const auto& d : dims) {
      require(d.low < d.high, "ParamSpace: need low < high for " + d.name);
      require(!d.log || d.low > 0.0, "ParamSpace: log dimension needs low > 0 for " + d.name);
    }
  }

  std::vector<double> from_unit(const Vec& u) const {
    require(u.size() == size(), "ParamSpace::from_unit: dimension mismatch");
    std::vector<double> theta(dims.size());
    for (int i = 0; i < size(); ++i) {
      const Dimension& d = dims[i];
      const double s = std::clamp(u(i), 0.0, 1.0);
      theta[i] = d.log ? std::pow(10.0, std::log10(d.low) + s * (std::log10(d.high) - std::log10(d.low)))
                       : d.low + s * (d.high - d.low);
    }
    return theta;
  }

  Vec to_unit(const std::vector<double>& theta) const {
    require(static_cast<int>(theta.size()) == size(), "ParamSpace::to_unit: dimension mismatch");
    Vec u(size());
    for (int i = 0; i < size(); ++i) {
      const Dimension& d = dims[i];
      require(theta[i] >= d.low * (1 - 1e-12) && theta[i] <= d.high * (1 + 1e-12), "ParamSpace::to_unit: " + d.name + " out of range");
      u(i) = d.log ? (std::log10(theta[i]) - std::log10(d.low)) / (std::log10(d.high) - std::log10(d.low))
                   : (theta[i] - d.low) / (d.high - d.low);
      u(i) = std::clamp(u(i), 0.0, 1.0);
    }
    return u;
  }
};

/// Sobol points with a seeded random shift (mod 1), one point per row.
inline Mat shifted_sobol(int n, int d, unsigned long seed) {
  require(n >= 0 && d >= 1, "shifted_sobol: bad sizes");
  boost::random::sobol gen(static_cast<std::size_t>(d));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec shift(d);
  for (int j = 0; j < d; ++j) shift(j) = u(rng);
  Mat out(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const double x = static_cast<double>(gen()) * 0x1p-64 + shift(j);
      out(i, j) = x - std::floor(x);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian process

/// ARD squared-exponential kernel plus white noise, with a constant prior mean.
struct GpKernel {
  Vec length;               // per dimension, unit-cube coordinates
  double signal_var = 1.0;
  double noise_var = 1e-6;
  double mean = 0.0;
  double jitter = 1e-10;
};

struct Posterior {
  double mu = 0.0;
  double sigma = 0.0;
};

inline double rbf(const Vec& a, const Vec& b, const GpKernel& k) {
  return k.signal_var * std::exp(-0.5 * ((a - b).array() / k.length.array()).square().sum());
}

class GpModel {
 public:
  GpKernel kernel;
  Mat X;  // observations, one per row, unit cube
  Vec y;
  Eigen::LLT<Mat> chol;
  Vec alpha;

  /// Posterior of the latent function (noise excluded).
  Posterior predict(const Vec& x) const {
    require(x.size() == X.cols(), "GpModel::predict: dimension mismatch");
    Vec ks(X.rows());
    for (long i = 0; i < X.rows(); ++i) ks(i) = rbf(X.row(i).transpose(), x, kernel);
    const Vec v = chol.matrixL().solve(ks);
    const double var = kernel.signal_var - v.squaredNorm();
    return {kernel.mean + ks.dot(alpha), std::sqrt(std::max(var, 0.0))};
  }

  /// Posterior at many points (rows of P) with one triangular solve.
  void predict(const Mat& P, Vec& mu, Vec& sigma) const {
    require(P.cols() == X.cols(), "GpModel::predict: dimension mismatch");
    Mat Ks(X.rows(), P.rows());
    for (long j = 0; j < P.rows(); ++j)
      for (long i = 0; i < X.rows(); ++i) Ks(i, j) = rbf(X.row(i).transpose(), P.row(j).transpose(), kernel);
    mu = (Ks.transpose() * alpha).array() + kernel.mean;
    chol.matrixL().solveInPlace(Ks);
    sigma = (kernel.signal_var - Ks.colwise().squaredNorm().transpose().array()).max(0.0).sqrt();
  }
};

inline Mat gram(const Mat& X, const GpKernel& k) {
  const long n = X.rows();
  Mat K(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j <= i; ++j) K(i, j) = K(j, i) = rbf(X.row(i).transpose(), X.row(j).transpose(), k);
  K.diagonal().array() += k.noise_var + k.jitter;
  return K;
}

inline GpModel gp_fit(const Mat& X, const Vec& y, const GpKernel& k) {
  require(X.rows() >= 1 && X.rows() == y.size(), "gp_fit: need at least one observation and matching sizes");
  require(k.length.size() == X.cols() && (k.length.array() > 0.0).all(), "gp_fit: length scales must match dimension and be positive");
  require(k.signal_var > 0.0 && k.noise_var >= 0.0 && k.jitter >= 0.0, "gp_fit: variances must be non-negative");
  GpModel m;
  m.kernel = k;
  m.X = X;
  m.y = y;
  Mat K = gram(X, k);
  double extra = 0.0;
  // Grow the diagonal until the factorization succeeds.
  for (int attempt = 0;; ++attempt) {
    m.chol.compute(K);
    if (m.chol.info() == Eigen::Success) break;
    if (attempt >= 10) throw NumericalFailure("gp_fit: Gram matrix not positive definite");
    const double add = extra == 0.0 ? 1e-10 * k.signal_var : extra * 9.0;
    K.diagonal().array() += add;
    extra += add;
  }
  m.kernel.jitter += extra;
  m.alpha = m.chol.solve(Vec(y.array() - k.mean));
  return m;
}

/// Log marginal likelihood and its gradient with respect to
/// [log l_1.., log signal_var, log noise_var].
inline double log_marginal_likelihood(const Mat& X, const Vec& y, const GpKernel& k, Vec* grad = nullptr) {
  const long n = X.rows();
  const int d = static_cast<int>(X.cols());
  const Mat K = gram(X, k);
  Eigen::LLT<Mat> llt(K);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  const Vec r = y.array() - k.mean;
  const Vec a = llt.solve(r);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double lml = -0.5 * r.dot(a) - 0.5 * logdet - 0.5 * n * std::log(2.0 * std::numbers::pi);
  if (grad) {
    const Mat W = a * a.transpose() - llt.solve(Mat::Identity(n, n));
    Mat Kf = K;
    Kf.diagonal().array() -= k.noise_var + k.jitter;
    grad->resize(d + 2);
    for (int q = 0; q < d; ++q) {
      double g = 0.0;
      for (long i = 0; i < n; ++i)
        for (long j = 0; j < n; ++j) {
          const double dx = (X(i, q) - X(j, q)) / k.length(q);
          g += W(i, j) * Kf(i, j) * dx * dx;
        }
      (*grad)(q) = 0.5 * g;
    }
    (*grad)(d) = 0.5 * (W.array() * Kf.array()).sum();
    (*grad)(d + 1) = 0.5 * k.noise_var * W.trace();
  }
  return lml;
}

struct HyperConfig {
  int starts = 3;
  int iterations = 60;
  double rate = 0.1;
  double length_lo = 0.02, length_hi = 5.0;
  double noise_lo = 1e-8, noise_hi = 0.5;  // fractions of the sample variance
};

/// Multi-start maximum likelihood over length scales and variances.
/// Adam in log space with box clamping; `warm` seeds the first start.
inline GpKernel fit_hyperparameters(const Mat& X, const Vec& y, unsigned long seed, const HyperConfig& hc = {},
                                    const GpKernel* warm = nullptr) {
  require(X.rows() >= 1 && X.rows() == y.size(), "fit_hyperparameters: bad sizes");
  const int d = static_cast<int>(X.cols());
  const double m = y.mean();
  const double var = std::max((y.array() - m).square().mean(), 1e-12);
  Vec lo(d + 2), hi(d + 2);
  lo.head(d).setConstant(std::log(hc.length_lo));
  hi.head(d).setConstant(std::log(hc.length_hi));
  lo(d) = std::log(0.05 * var);
  hi(d) = std::log(20.0 * var);
  lo(d + 1) = std::log(hc.noise_lo * var);
  hi(d + 1) = std::log(hc.noise_hi * var);

  auto unpack = [&](const Vec& p) {
    GpKernel k;
    k.length = p.head(d).array().exp();
    k.signal_var = std::exp(p(d));
    k.noise_var = std::exp(p(d + 1));
    k.mean = m;
    return k;
  };
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GpKernel best = unpack((lo + hi) / 2);
  double best_lml = log_marginal_likelihood(X, y, best);
  if (X.rows() < 2) return best;

  for (int s = 0; s < hc.starts; ++s) {
    Vec p(d + 2);
    if (s == 0 && warm && warm->length.size() == d) {
      p.head(d) = warm->length.array().log();
      p(d) = std::log(warm->signal_var);
      p(d + 1) = std::log(std::max(warm->noise_var, 1e-300));
    } else if (s == 0) {
      p.head(d).setConstant(std::log(0.3));
      p(d) = std::log(var);
      p(d + 1) = std::log(1e-4 * var);
    } else {
      for (int i = 0; i < d + 2; ++i) p(i) = lo(i) + u(rng) * (hi(i) - lo(i));
    }
    p = p.cwiseMax(lo).cwiseMin(hi);
    Vec m1 = Vec::Zero(d + 2), m2 = Vec::Zero(d + 2), g;
    for (int it = 1; it <= hc.iterations; ++it) {
      const double lml = log_marginal_likelihood(X, y, unpack(p), &g);
      if (std::isfinite(lml) && lml > best_lml) {
        best_lml = lml;
        best = unpack(p);
      }
      if (!std::isfinite(lml) || !g.allFinite()) break;
      m1 = 0.9 * m1 + 0.1 * g;
      m2 = 0.999 * m2 + 0.001 * g.cwiseAbs2();
      const Vec mh = m1 / (1 - std::pow(0.9, it)), vh = m2 / (1 - std::pow(0.999, it));
      p = (p.array() + hc.rate * mh.array() / (vh.array().sqrt() + 1e-8)).matrix().cwiseMax(lo).cwiseMin(hi);
    }
    const double lml = log_marginal_likelihood(X, y, unpack(p));
    if (std::isfinite(lml) && lml > best_lml) {
      best_lml = lml;
      best = unpack(p);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Acquisition

/// Expected improvement for minimization.
inline double expected_improvement(double mu, double sigma, double best) {
  require(sigma >= 0.0, "expected_improvement: sigma must be non-negative");
  const double diff = best - mu;
  if (sigma <= 0.0) return std::max(diff, 0.0);
  const double z = diff / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return std::max(diff * cdf + sigma * pdf, 0.0);
}

struct ProposeConfig {
  int candidates = 4096;
  int refine_top = 5;
  double refine_step = 0.05;
  double refine_min_step = 1e-4;
  double min_distance = 1e-6;  // unit cube
};

/// Next point in the unit cube: best EI over shifted Sobol candidates,
/// polished by a coordinate pattern search. Points closer than
/// min_distance to an observation are never returned.
inline Vec propose(const GpModel& model, double best, unsigned long seed, const ProposeConfig& pc = {}) {
  const int d = static_cast<int>(model.X.cols());
  require(pc.candidates >= 1, "propose: need candidates");
  auto far_enough = [&](const Vec& x) {
    for (long i = 0; i < model.X.rows(); ++i)
      if ((model.X.row(i).transpose() - x).norm() < pc.min_distance) return false;
    return true;
  };
  auto ei = [&](const Vec& x) {
    const Posterior p = model.predict(x);
    return expected_improvement(p.mu, p.sigma, best);
  };

  const Mat C = shifted_sobol(pc.candidates, d, seed);
  Vec mu, sig;
  model.predict(C, mu, sig);
  std::vector<double> score(C.rows());
  for (long i = 0; i < C.rows(); ++i) score[i] = expected_improvement(mu(i), sig(i), best);
  std::vector<long> order(C.rows());
  for (long i = 0; i < C.rows(); ++i) order[i] = i;
  const bool flat = *std::max_element(score.begin(), score.end()) <= 0.0;
  if (flat) {
    std::stable_sort(order.begin(), order.end(), [&](long a, long b) { return sig[a] > sig[b]; });
    for (long i : order)
      if (far_enough(C.row(i).transpose())) return C.row(i).transpose();
    throw NumericalFailure("propose: every candidate duplicates an observation");
  }
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) { return score[a] > score[b]; });

  Vec best_x;
  double best_ei = -1.0;
  int refined = 0;
  for (long idx : order) {
    if (refined >= pc.refine_top) break;
    Vec x = C.row(idx).transpose();
    if (!far_enough(x)) continue;
    ++refined;
    double fx = score[idx];
    for (double step = pc.refine_step; step >= pc.refine_min_step;) {
      bool moved = false;
      for (int j = 0; j < d; ++j)
        for (double sgn : {1.0, -1.0}) {
          Vec y = x;
          y(j) = std::clamp(y(j) + sgn * step, 0.0, 1.0);
          if (y(j) == x(j) || !far_enough(y)) continue;
          const double fy = ei(y);
          if (fy > fx) {
            x = y;
            fx = fy;
            moved = true;
          }
        }
      if (!moved) step /= 2.0;
    }
    if (fx > best_ei) {
      best_ei = fx;
      best_x = x;
    }
  }
  if (best_x.size() == 0) throw NumericalFailure("propose: every candidate duplicates an observation");
  return best_x;
}

// ---------------------------------------------------------------------------
// Tuning loop

struct EvalResult {
  double mape = 0.0;  // percent
  double time = 0.0;  // seconds
  bool failed = false;
  std::string error;
};

using Objective = std::function<EvalResult(const std::vector<double>& theta)>;

struct TuneConfig {
  double w_mape = 0.5, w_time = 0.5;
  int budget = 100;
  int n0 = 10;
  unsigned long seed = 0;
  int hyper_every = 10;  // maximum-likelihood refit period, in evaluations
  ProposeConfig propose;
  HyperConfig hyper;

  void validate() const {
    require(w_mape >= 0.0 && w_time >= 0.0, "TuneConfig: weights must be non-negative");
    require(n0 >= 2 && budget >= n0, "TuneConfig: need budget >= n0 >= 2");
    require(hyper_every >= 1, "TuneConfig: hyper_every must be positive");
  }
};

struct LogEntry {
  int iteration = 0;  // 1-based evaluation counter
  std::vector<double> theta;
  double mape = 0.0, time = 0.0, objective = 0.0;
  bool failed = false;
  std::string error;
};

/// Min-max ranges of the initial samples and the failure penalty.
struct Normalization {
  double mape_lo = 0.0, mape_hi = 1.0, time_lo = 0.0, time_hi = 1.0;
  double penalty = 0.0;
  double w_mape = 0.5, w_time = 0.5;

  double score(double mape, double time) const {
    const double dm = mape_hi > mape_lo ? mape_hi - mape_lo : 1.0;
    const double dt = time_hi > time_lo ? time_hi - time_lo : 1.0;
    return w_mape * (mape - mape_lo) / dm + w_time * (time - time_lo) / dt;
  }
};

struct TuneResult {
  ParamSpace space;
  std::vector<LogEntry> log;
  std::size_t best = 0;
  Normalization norm;
  GpKernel kernel;  // last fitted hyperparameters

  const LogEntry& best_entry() const { return log.at(best); }
};

inline Normalization normalization_from(const std::vector<LogEntry>& initial, double w_mape, double w_time) {
  Normalization n;
  n.w_mape = w_mape;
  n.w_time = w_time;
  bool any = false;
  for (const auto& e : initial) {
    if (e.failed) continue;
    if (!any) {
      n.mape_lo = n.mape_hi = e.mape;
      n.time_lo = n.time_hi = e.time;
      any = true;
    }
    n.mape_lo = std::min(n.mape_lo, e.mape);
    n.mape_hi = std::max(n.mape_hi, e.mape);
    n.time_lo = std::min(n.time_lo, e.time);
    n.time_hi = std::max(n.time_hi, e.time);
  }
  double worst = 0.0;
  for (const auto& e : initial)
    if (!e.failed) worst = std::max(worst, n.score(e.mape, e.time));
  // A zero worst (single success, or all initial samples failed) would make
  // failure free; fall back to twice the full weight.
  n.penalty = worst > 0.0 ? 2.0 * worst : 2.0 * (w_mape + w_time);
  return n;
}

inline EvalResult run_objective(const Objective& f, const std::vector<double>& theta) {
  EvalResult r;
  try {
    r = f(theta);
  } catch (const NumericalFailure& e) {
    r.failed = true;
    r.error = e.what();
  }
  if (!r.failed && !(std::isfinite(r.mape) && std::isfinite(r.time))) {
    r.failed = true;
    r.error = "non-finite objective";
  }
  return r;
}

/// GP/EI minimization of the normalized weighted objective. The log holds
/// exactly `budget` entries; the returned best is the argmin over all of them.
inline TuneResult tune(const ParamSpace& space, const Objective& f, const TuneConfig& cfg) {
  space.validate();
  cfg.validate();
  TuneResult res;
  res.space = space;
  const int d = space.size();
  Mat U(cfg.budget, d);

  const Mat init = shifted_sobol(cfg.n0, d, cfg.seed);
  for (int i = 0; i < cfg.n0; ++i) {
    U.row(i) = init.row(i);
    LogEntry e;
    e.iteration = i + 1;
    e.theta = space.from_unit(init.row(i).transpose());
    const EvalResult r = run_objective(f, e.theta);
    e.mape = r.mape;
    e.time = r.time;
    e.failed = r.failed;
    e.error = r.error;
    res.log.push_back(e);
  }
  res.norm = normalization_from(res.log, cfg.w_mape, cfg.w_time);
  for (auto& e : res.log) e.objective = e.failed ? res.norm.penalty : res.norm.score(e.mape, e.time);

  GpKernel kernel;
  bool have_kernel = false;
  for (int n = cfg.n0; n < cfg.budget; ++n) {
    const Mat X = U.topRows(n);
    Vec y(n);
    for (int i = 0; i < n; ++i) y(i) = res.log[i].objective;
    if (!have_kernel || (n - cfg.n0) % cfg.hyper_every == 0) {
      kernel = fit_hyperparameters(X, y, cfg.seed * 7919 + n, cfg.hyper, have_kernel ? &kernel : nullptr);
      have_kernel = true;
    }
    kernel.mean = y.mean();
    const GpModel gp = gp_fit(X, y, kernel);
    const Vec x = propose(gp, y.minCoeff(), cfg.seed * 104729 + n, cfg.propose);
    U.row(n) = x.transpose();
    LogEntry e;
    e.iteration = n + 1;
    e.theta = space.from_unit(x);
    const EvalResult r = run_objective(f, e.theta);
    e.mape = r.mape;
    e.time = r.time;
    e.failed = r.failed;
    e.error = r.error;
    e.objective = e.failed ? res.norm.penalty : res.norm.score(e.mape, e.time);
    res.log.push_back(e);
  }
  res.kernel = kernel;
  for (std::size_t i = 1; i < res.log.size(); ++i)
    if (res.log[i].objective < res.log[res.best].objective) res.best = i;
  return res;
}

// ---------------------------------------------------------------------------
// Pareto front and exports

/// Indices of the non-dominated points (minimizing both coordinates), in
/// increasing first coordinate.
inline std::vector<std::size_t> pareto_front(const std::vector<std::pair<double, double>>& pts) {
  require(!pts.empty(), "pareto_front: empty input");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
      if (j == i) continue;
      const auto& a = pts[j];
      const auto& b = pts[i];
      dominated = a.first <= b.first && a.second <= b.second && (a.first < b.first || a.second < b.second);
    }
    if (!dominated) keep.push_back(i);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
    return pts[a].first < pts[b].first || (pts[a].first == pts[b].first && pts[a].second < pts[b].second);
  });
  return keep;
}

/// Front over (MAPE, time) of the successful log entries; indices into the log.
inline std::vector<std::size_t> pareto_front(const std::vector<LogEntry>& log) {
  std::vector<std::pair<double, double>> pts;
  std::vector<std::size_t> map;
  for (std::size_t i = 0; i < log.size(); ++i)
    if (!log[i].failed) {
      pts.emplace_back(log[i].mape, log[i].time);
      map.push_back(i);
    }
  if (pts.empty()) return {};
  std::vector<std::size_t> out;
  for (std::size_t k : pareto_front(pts)) out.push_back(map[k]);
  return out;
}

inline constexpr const char* kEvalLogSchema = "# schema: thermoloop-bo-log v1";
inline constexpr const char* kParetoSchema = "# schema: thermoloop-pareto v1";
inline constexpr const char* kContourSchema = "# schema: thermoloop-contour v1";

inline std::ofstream open_csv(const std::string& path, const char* schema) {
  std::ofstream out(path);
  if (!out) throw ContractViolation("cannot open " + path + " for writing");
  out << schema << '\n' << std::setprecision(17);
  return out;
}

inline void write_evaluation_log(const TuneResult& r, const std::string& path) {
  std::ofstream out = open_csv(path, kEvalLogSchema);
  out << "iteration";
  for (const auto& d : r.space.dims) out << ',' << d.name;
  out << ",mape_all,t_simulation,objective,failed\n";
  for (const auto& e : r.log) {
    out << e.iteration;
    for (double v : e.theta) out << ',' << v;
    out << ',' << e.mape << ',' << e.time << ',' << e.objective << ',' << (e.failed ? 1 : 0) << '\n';
  }
}

inline void write_pareto(const TuneResult& r, const std::string& path) {
  std::ofstream out = open_csv(path, kParetoSchema);
  out << "iteration";
  for (const auto& d : r.space.dims) out << ',' << d.name;
  out << ",mape_all,t_simulation\n";
  for (std::size_t i : pareto_front(r.log)) {
    const LogEntry& e = r.log[i];
    out << e.iteration;
    for (double v : e.theta) out << ',' << v;
    out << ',' << e.mape << ',' << e.time << '\n';
  }
}

/// GP posterior means of log MAPE and log time on a grid over the first two
/// dimensions, the rest held at the best point.
struct ContourGrid {
  std::vector<double> x, y;  // physical values of dims 0 and 1
  Mat mape, time;            // rows follow x, columns follow y
};

inline ContourGrid contour_grid(const TuneResult& r, int n, unsigned long seed = 0) {
  require(r.space.size() >= 2, "contour_grid: need two dimensions");
  require(n >= 2, "contour_grid: need at least two grid points per axis");
  std::vector<const LogEntry*> ok;
  for (const auto& e : r.log)
    if (!e.failed) ok.push_back(&e);
  require(ok.size() >= 2, "contour_grid: need two successful evaluations");
  const int d = r.space.size();
  Mat X(ok.size(), d);
  Vec lm(ok.size()), lt(ok.size());
  for (std::size_t i = 0; i < ok.size(); ++i) {
    X.row(i) = r.space.to_unit(ok[i]->theta).transpose();
    lm(i) = std::log(std::max(ok[i]->mape, 1e-12));
    lt(i) = std::log(std::max(ok[i]->time, 1e-12));
  }
  const GpModel gm = gp_fit(X, lm, fit_hyperparameters(X, lm, seed));
  const GpModel gt = gp_fit(X, lt, fit_hyperparameters(X, lt, seed + 1));
  const Vec star = r.space.to_unit(r.best_entry().theta);
  ContourGrid g;
  g.mape.resize(n, n);
  g.time.resize(n, n);
  Vec u = star;
  for (int i = 0; i < n; ++i) {
    u(0) = static_cast<double>(i) / (n - 1);
    g.x.push_back(r.space.from_unit(u)[0]);
  }
  u = star;
  for (int j = 0; j < n; ++j) {
    u(1) = static_cast<double>(j) / (n - 1);
    g.y.push_back(r.space.from_unit(u)[1]);
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      u = star;
      u(0) = static_cast<double>(i) / (n - 1);
      u(1) = static_cast<double>(j) / (n - 1);
      g.mape(i, j) = std::exp(gm.predict(u).mu);
      g.time(i, j) = std::exp(gt.predict(u).mu);
    }
  return g;
}

inline void write_contour(const TuneResult& r, const ContourGrid& g, const std::string& path) {
  std::ofstream out = open_csv(path, kContourSchema);
  out << r.space.dims[0].name << ',' << r.space.dims[1].name << ",mape_all,t_simulation\n";
  for (std::size_t i = 0; i < g.x.size(); ++i)
    for (std::size_t j = 0; j < g.y.size(); ++j)
      out << g.x[i] << ',' << g.y[j] << ',' << g.mape(i, j) << ',' << g.time(i, j) << '\n';
}

}  // namespace thermoloop::bayesopt
