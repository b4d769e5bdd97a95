#pragma once

// Memoryless surrogates for compressors and expansion valves.
//
// Compressor: mdot = (speed / speed_ref) * g(x), h_out = h_in + max(dh(x), 0)
// Valve:      mdot = opening * sqrt(max(p_in - p_out, 0)) * g(x), h_out = h_in
// where x = normalized (p_a, p_b, h_in, actuation) and g, dh come from one
// tanh MLP. The prefactors give zero flow at zero speed / opening / driving
// pressure by construction.

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "thermoloop/core/normalize.hpp"
#include "thermoloop/nn/layers.hpp"
#include "thermoloop/nn/optim.hpp"
#include "thermoloop/nn/weights_io.hpp"
#include "thermoloop/plant/oracle.hpp"

namespace thermoloop::surrogate {

using nn::ParameterSet;
using nn::Tensor;

enum class StaticKind { Compressor, Valve };

inline const char* static_kind_name(StaticKind k) { return k == StaticKind::Compressor ? "compressor" : "valve"; }

struct FlowResult {
  double m_dot = 0.0;
  double h_out = 0.0;
  bool clamped = false;  // inputs outside the training box
};

struct StaticSample {
  double a = 0, b = 0, h_in = 0, act = 0;  // compressor: p_suct, p_dis; valve: p_in, p_out
  double m_dot = 0, h_out = 0;
};

struct StaticTrainConfig {
  int hidden = 32;
  int epochs = 400;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  unsigned long seed = 1;
};

class StaticModel {
 public:
  static constexpr double kSpeedRef = 50.0;

  StaticKind kind = StaticKind::Compressor;
  ParameterSet params;
  nn::Mlp mlp;
  ColumnScaler in_scaler;   // 4 feature columns
  ColumnScaler out_scaler;  // g (and dh for compressors)

  static StaticModel create(StaticKind kind, int hidden, unsigned long seed) {
    std::mt19937_64 rng(seed);
    StaticModel m;
    m.kind = kind;
    m.mlp = nn::Mlp::create(m.params, static_kind_name(kind), {4, hidden, hidden, m.targets()}, nn::Activation::Tanh, rng);
    return m;
  }

  int targets() const { return kind == StaticKind::Compressor ? 2 : 1; }

  /// Flow prefactor carrying the exact zero structure.
  double prefactor(double a, double b, double act) const {
    if (kind == StaticKind::Compressor) return act / kSpeedRef;
    return act * std::sqrt(std::max(a - b, 0.0));
  }

  FlowResult eval(double a, double b, double h_in, double act) const {
    FlowResult r;
    Tensor x(1, 4);
    x << a, b, h_in, act;
    for (int c = 0; c < 4; ++c)
      if (x(0, c) < in_scaler.lo(c) || x(0, c) > in_scaler.hi(c)) r.clamped = true;
    const Tensor out = out_scaler.denormalize(mlp.forward_values(params, in_scaler.normalize(x)));
    r.m_dot = std::max(prefactor(a, b, act) * out(0, 0), 0.0);
    r.h_out = h_in;
    if (kind == StaticKind::Compressor && act > 0.0) r.h_out = h_in + std::max(out(0, 1), 0.0);
    return r;
  }

  FlowResult compressor_eval(double p_suct, double p_dis, double h_in, double speed) const {
    require(kind == StaticKind::Compressor, "compressor_eval on a valve model");
    require(speed >= 0.0, "compressor speed must be non-negative");
    return eval(p_suct, p_dis, h_in, speed);
  }

  FlowResult valve_eval(double p_in, double p_out, double h_in, double opening) const {
    require(kind == StaticKind::Valve, "valve_eval on a compressor model");
    require(opening >= 0.0 && opening <= 1.0, "valve opening must lie in [0,1]");
    return eval(p_in, p_out, h_in, opening);
  }

  /// Fits the MLP to samples. Targets are the flow divided by the prefactor
  /// (samples with a zero prefactor carry no information and are skipped)
  /// and, for compressors, the enthalpy rise. Returns the final mean loss.
  double fit(const std::vector<StaticSample>& samples, const StaticTrainConfig& tc) {
    std::vector<const StaticSample*> use;
    for (const auto& s : samples)
      if (prefactor(s.a, s.b, s.act) > 1e-12) use.push_back(&s);
    require(use.size() >= 2, "static model fit needs informative samples");
    const Eigen::Index n = static_cast<Eigen::Index>(use.size());
    Eigen::MatrixXd X(n, 4), T(n, targets());
    for (Eigen::Index i = 0; i < n; ++i) {
      const StaticSample& s = *use[i];
      X.row(i) << s.a, s.b, s.h_in, s.act;
      T(i, 0) = s.m_dot / prefactor(s.a, s.b, s.act);
      if (targets() == 2) T(i, 1) = s.h_out - s.h_in;
    }
    in_scaler = ColumnScaler::fit(X);
    out_scaler = ColumnScaler::fit(T);
    const Eigen::MatrixXd Xn = in_scaler.normalize(X), Tn = out_scaler.normalize(T);
    std::mt19937_64 rng(tc.seed);
    nn::OptimizerState opt(params, tc.learning_rate);
    std::vector<Eigen::Index> order(n);
    for (Eigen::Index i = 0; i < n; ++i) order[i] = i;
    double last = 0.0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; i += tc.batch_size) {
        const Eigen::Index B = std::min<Eigen::Index>(tc.batch_size, n - i);
        Tensor xb(B, 4), tb(B, targets());
        for (Eigen::Index k = 0; k < B; ++k) {
          xb.row(k) = Xn.row(order[i + k]);
          tb.row(k) = Tn.row(order[i + k]);
        }
        nn::Tape tape;
        params.zero_grad();
        nn::Var y = mlp.forward(tape, params, tape.constant(xb));
        nn::Var loss = nn::mean(nn::square(y - tape.constant(tb)));
        tape.backward(loss);
        nn::clip_gradients(params, tc.clip_norm);
        nn::adam_step(params, opt);
        acc += loss.value()(0, 0) * static_cast<double>(B);
      }
      last = acc / static_cast<double>(n);
    }
    return last;
  }

  nlohmann::json to_checkpoint() const {
    nlohmann::json meta;
    meta["static"] = {{"kind", static_kind_name(kind)},
                      {"hidden", params[mlp.layers[0].W].value.cols()},
                      {"in_lo", std::vector<double>(in_scaler.lo.data(), in_scaler.lo.data() + in_scaler.size())},
                      {"in_hi", std::vector<double>(in_scaler.hi.data(), in_scaler.hi.data() + in_scaler.size())},
                      {"out_lo", std::vector<double>(out_scaler.lo.data(), out_scaler.lo.data() + out_scaler.size())},
                      {"out_hi", std::vector<double>(out_scaler.hi.data(), out_scaler.hi.data() + out_scaler.size())}};
    return nn::to_json(params, meta);
  }

  static StaticModel from_checkpoint(const nlohmann::json& doc) {
    require(doc.contains("meta") && doc["meta"].contains("static"), "checkpoint lacks static meta block");
    const auto& m = doc["meta"]["static"];
    const std::string k = m.at("kind").get<std::string>();
    require(k == "compressor" || k == "valve", "unknown static model kind " + k);
    StaticModel s = create(k == "compressor" ? StaticKind::Compressor : StaticKind::Valve, m.at("hidden").get<int>(), 0);
    nn::from_json(doc, s.params);
    auto vec = [&](const char* key) {
      const auto v = m.at(key).get<std::vector<double>>();
      return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()));
    };
    s.in_scaler.lo = vec("in_lo");
    s.in_scaler.hi = vec("in_hi");
    s.out_scaler.lo = vec("out_lo");
    s.out_scaler.hi = vec("out_hi");
    return s;
  }
};

/// Operating boxes for sampling the reference component laws.
struct StaticSamplingBox {
  double p_suct_lo = 1.5e5, p_suct_hi = 9e5;
  double p_dis_lo = 1.4e6, p_dis_hi = 4.0e6;
  double h_suct_lo = 3.0e5, h_suct_hi = 4.3e5;
  double speed_lo = 0.0, speed_hi = 60.0;
  double p_liq_lo = 1.2e6, p_liq_hi = 3.2e6;
  double p_evap_lo = 1.5e5, p_evap_hi = 1.2e6;
  double h_liq_lo = 1.6e5, h_liq_hi = 3.2e5;
};

inline std::vector<StaticSample> sample_component(const plant::PlantParams& par, StaticKind kind, int n,
                                                  unsigned long seed, const StaticSamplingBox& box = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  plant::ComponentLaws law{&par};
  std::vector<StaticSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    StaticSample s;
    if (kind == StaticKind::Compressor) {
      s.a = draw(box.p_suct_lo, box.p_suct_hi);
      s.b = draw(box.p_dis_lo, box.p_dis_hi);
      s.h_in = draw(box.h_suct_lo, box.h_suct_hi);
      s.act = draw(box.speed_lo, box.speed_hi);
      s.m_dot = law.compressor_flow(s.act, s.a, s.h_in);
      s.h_out = law.compressor_enthalpy(s.a, s.b, s.h_in);
    } else {
      s.a = draw(box.p_liq_lo, box.p_liq_hi);
      s.b = draw(box.p_evap_lo, box.p_evap_hi);
      s.h_in = draw(box.h_liq_lo, box.h_liq_hi);
      s.act = u(rng);
      s.m_dot = law.valve_flow(s.act, s.a, s.b, s.h_in);
      s.h_out = s.h_in;
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace thermoloop::surrogate
