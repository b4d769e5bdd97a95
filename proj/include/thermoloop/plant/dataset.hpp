#pragma once

// Per-exchanger training series generated from the reference plant.
// CSV layout per exchanger: the 8 inputs, the 9 outputs, then t and m_out.

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include <json.hpp>

#include "thermoloop/core/errors.hpp"
#include "thermoloop/core/normalize.hpp"
#include "thermoloop/plant/oracle.hpp"

namespace thermoloop::plant {

inline const std::vector<std::string>& input_names() {
  static const std::vector<std::string> n{"T_a_in", "phi_a_in", "m_dot_a", "P_amb",
                                          "m_dot_r_in", "h_r_in", "h_r_out", "P_r_out"};
  return n;
}
inline const std::vector<std::string>& output_names() {
  static const std::vector<std::string> n{"p_1", "p_N", "h_1", "h_N", "T_a_out", "Q_a", "M_r", "E_hx", "Q_lat"};
  return n;
}

constexpr int kInputs = 8;
constexpr int kOutputs = 9;
constexpr int kChannelM = 6;  // output index of M_r
constexpr int kChannelE = 7;  // output index of E_hx

inline Eigen::RowVectorXd inputs_of(const HxSample& s) {
  Eigen::RowVectorXd x(kInputs);
  x << s.T_a_in, s.phi, s.m_air, s.P_amb, s.m_in, s.h_in, s.h_out, s.P_out;
  return x;
}
inline Eigen::RowVectorXd outputs_of(const HxSample& s) {
  Eigen::RowVectorXd y(kOutputs);
  y << s.p1, s.pN, s.h1, s.hN, s.T_a_out, s.Q_a, s.M, s.E, s.Q_lat;
  return y;
}

/// One exchanger's series. Row s corresponds to t = s * dt.
struct HxSeries {
  int hx = 0;
  HxKind kind = HxKind::Condenser;
  Eigen::MatrixXd X;  // steps x 8
  Eigen::MatrixXd Y;  // steps x 9
  Eigen::VectorXd t, m_out;

  long steps() const { return X.rows(); }

  /// Physical mass and energy rates from the recorded flows.
  Eigen::MatrixXd true_rates() const {
    Eigen::MatrixXd r(steps(), 2);
    r.col(0) = X.col(4) - m_out;
    r.col(1) = X.col(4).cwiseProduct(X.col(5)) - m_out.cwiseProduct(X.col(6)) - Y.col(5);
    return r;
  }

  /// Scaler over the 17 data columns.
  ColumnScaler scaler() const {
    Eigen::MatrixXd all(steps(), kInputs + kOutputs);
    all << X, Y;
    return ColumnScaler::fit(all);
  }
};

struct Dataset {
  Topology topo;
  double dt = 1.0;
  Eigen::MatrixXd states;  // steps x state_dim
  std::vector<HxSeries> hx;
  long steps() const { return states.rows(); }
};

/// Warms the plant up under the first actuation sample, then records
/// `horizon` samples. `min_window` is the shortest usable series (encoder
/// plus decoder length).
inline Dataset generate_dataset(const PlantOracle& oracle, const ActuationProfile& prof, long horizon,
                                long min_window, long warmup = 3000) {
  require(horizon >= min_window && horizon >= 2,
          "generate_dataset: horizon " + std::to_string(horizon) + " shorter than required window " +
              std::to_string(min_window));
  require(horizon <= prof.steps(), "generate_dataset: horizon exceeds profile length");
  const Topology& topo = oracle.topology();
  prof.validate(topo);
  Dataset d;
  d.topo = topo;
  d.dt = prof.dt;
  const Vec y0 = oracle.warm_up(oracle.default_guess(), prof, warmup);
  d.states = oracle.simulate(y0, prof, 0, horizon - 1);
  d.hx.resize(topo.n_hx());
  for (int i = 0; i < topo.n_hx(); ++i) {
    d.hx[i].hx = i;
    d.hx[i].kind = topo.kind(i);
    d.hx[i].X.resize(horizon, kInputs);
    d.hx[i].Y.resize(horizon, kOutputs);
    d.hx[i].t.resize(horizon);
    d.hx[i].m_out.resize(horizon);
  }
  for (long s = 0; s < horizon; ++s) {
    const NetworkState ns = oracle.evaluate(d.states.row(s).transpose(), prof, s);
    for (int i = 0; i < topo.n_hx(); ++i) {
      d.hx[i].X.row(s) = inputs_of(ns.hx[i]);
      d.hx[i].Y.row(s) = outputs_of(ns.hx[i]);
      d.hx[i].t(s) = s * prof.dt;
      d.hx[i].m_out(s) = ns.hx[i].m_out;
    }
  }
  return d;
}

inline nlohmann::json sidecar(const HxSeries& s, double dt) {
  const ColumnScaler sc = s.scaler();
  nlohmann::json j;
  std::vector<std::string> cols = input_names();
  cols.insert(cols.end(), output_names().begin(), output_names().end());
  j["columns"] = cols;
  j["aux_columns"] = {"t", "m_dot_r_out"};
  j["min"] = std::vector<double>(sc.lo.data(), sc.lo.data() + sc.size());
  j["max"] = std::vector<double>(sc.hi.data(), sc.hi.data() + sc.size());
  // Physical rate times this factor gives the normalized-space rate per second.
  j["rate_scale"] = {{"M_r", sc.rate_scale(kInputs + kChannelM)}, {"E_hx", sc.rate_scale(kInputs + kChannelE)}};
  j["dt"] = dt;
  j["hx"] = s.hx;
  j["kind"] = kind_name(s.kind);
  return j;
}

/// Writes <dir>/hx<i>.csv and <dir>/hx<i>.json for every exchanger.
inline void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const HxSeries& s : d.hx) {
    const std::string stem = "hx" + std::to_string(s.hx);
    std::ofstream csv(dir / (stem + ".csv"));
    if (!csv) throw std::runtime_error("cannot write " + (dir / (stem + ".csv")).string());
    for (const auto& n : input_names()) csv << n << ',';
    for (const auto& n : output_names()) csv << n << ',';
    csv << "t,m_dot_r_out\n";
    csv << std::setprecision(17);
    for (long r = 0; r < s.steps(); ++r) {
      for (int c = 0; c < kInputs; ++c) csv << s.X(r, c) << ',';
      for (int c = 0; c < kOutputs; ++c) csv << s.Y(r, c) << ',';
      csv << s.t(r) << ',' << s.m_out(r) << '\n';
    }
    std::ofstream js(dir / (stem + ".json"));
    js << sidecar(s, d.dt).dump(2) << '\n';
  }
}

inline HxSeries read_series(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("cannot read " + csv_path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    size_t pos = 0;
    while (pos <= line.size()) {
      const size_t next = line.find(',', pos);
      row.push_back(std::stod(line.substr(pos, next - pos)));
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    if (row.size() != kInputs + kOutputs + 2) throw std::runtime_error("malformed dataset row in " + csv_path.string());
    rows.push_back(std::move(row));
  }
  HxSeries s;
  const long n = static_cast<long>(rows.size());
  s.X.resize(n, kInputs);
  s.Y.resize(n, kOutputs);
  s.t.resize(n);
  s.m_out.resize(n);
  for (long r = 0; r < n; ++r) {
    for (int c = 0; c < kInputs; ++c) s.X(r, c) = rows[r][c];
    for (int c = 0; c < kOutputs; ++c) s.Y(r, c) = rows[r][kInputs + c];
    s.t(r) = rows[r][kInputs + kOutputs];
    s.m_out(r) = rows[r][kInputs + kOutputs + 1];
  }
  return s;
}

}  // namespace thermoloop::plant
