#pragma once

// Heat-exchanger surrogate: GRU encoder over the history, projection to the
// latent space, gated latent ODE advanced by RK4 under piecewise-constant
// forcing, and a pointwise GRU-cell decoder to the nine outputs.
//
// Rates of the predicted mass and energy channels are obtained by pushing
// the latent velocity through the decoder (forward tangent), built from tape
// primitives so the physics loss is differentiable.

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "thermoloop/core/normalize.hpp"
#include "thermoloop/nn/layers.hpp"
#include "thermoloop/nn/weights_io.hpp"
#include "thermoloop/plant/dataset.hpp"

namespace thermoloop::pinode {

using nn::ParameterSet;
using nn::Tape;
using nn::Tensor;
using nn::Var;

struct ModelConfig {
  int d_x = 8;
  int d_s = 2;
  int d_latent = 8;
  int enc_hidden = 64;
  int dec_hidden = 64;
  int T_enc = 20;
  int T_dec = 10;
  double dropout = nn::kDefaultDropout;

  void validate() const {
    require(d_x == plant::kInputs && d_s == 2, "ModelConfig: d_x must be 8 and d_s 2");
    require(d_latent >= 1 && enc_hidden >= 1 && dec_hidden >= 1, "ModelConfig: widths must be positive");
    require(T_enc >= 1 && T_dec >= 1, "ModelConfig: T_enc and T_dec must be >= 1");
    require(dropout >= 0.0 && dropout < 1.0, "ModelConfig: dropout must lie in [0,1)");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_x", c.d_x},           {"d_s", c.d_s},         {"d_latent", c.d_latent},
          {"enc_hidden", c.enc_hidden}, {"dec_hidden", c.dec_hidden}, {"T_enc", c.T_enc},
          {"T_dec", c.T_dec},       {"dropout", c.dropout}};
}
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_x = j.value("d_x", c.d_x);
  c.d_s = j.value("d_s", c.d_s);
  c.d_latent = j.value("d_latent", c.d_latent);
  c.enc_hidden = j.value("enc_hidden", c.enc_hidden);
  c.dec_hidden = j.value("dec_hidden", c.dec_hidden);
  c.T_enc = j.value("T_enc", c.T_enc);
  c.T_dec = j.value("T_dec", c.T_dec);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

/// A batch of windows in normalized units; one tensor (batch x width) per
/// time index.
struct WindowBatch {
  std::vector<Tensor> X_enc, S_enc, X_dec, S_dec;
  double dt = 1.0;
  std::vector<Tensor> Y;      // T_dec entries of batch x 9
  std::vector<Tensor> rates;  // T_dec entries of batch x 2, normalized units per second

  Eigen::Index batch() const { return X_dec.empty() ? 0 : X_dec.front().rows(); }
};

struct ForwardResult {
  std::vector<Var> Y;      // per decoder step, batch x 9
  std::vector<Var> rates;  // per decoder step, batch x 2 (M_r, E_hx)
  std::vector<Var> zeta;   // latent trajectory, T_dec + 1 entries
};

struct PinodeModel {
  ModelConfig cfg;
  ParameterSet params;
  nn::GruWeights enc, ode, dec;
  std::size_t enc_ln_g = 0, enc_ln_b = 0, lat_ln_g = 0, lat_ln_b = 0, out_ln_g = 0, out_ln_b = 0;
  std::size_t dec_h0 = 0;
  nn::Mlp proj, head;
  ColumnScaler scaler;  // 17 columns: inputs then outputs
  std::string kind = "condenser";

  static PinodeModel create(const ModelConfig& c, unsigned long seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    PinodeModel m;
    m.cfg = c;
    ParameterSet& p = m.params;
    const Eigen::Index dxs = c.d_x + c.d_s;
    m.enc = nn::GruWeights::create(p, "enc", dxs, c.enc_hidden, rng);
    m.enc_ln_g = p.add("enc_ln.gain", Tensor::Ones(1, c.enc_hidden));
    m.enc_ln_b = p.add("enc_ln.bias", Tensor::Zero(1, c.enc_hidden));
    m.proj = nn::Mlp::create(p, "proj", {c.enc_hidden, c.d_latent}, nn::Activation::Identity, rng);
    m.lat_ln_g = p.add("lat_ln.gain", Tensor::Ones(1, c.d_latent));
    m.lat_ln_b = p.add("lat_ln.bias", Tensor::Zero(1, c.d_latent));
    m.ode = nn::GruWeights::create(p, "ode", dxs, c.d_latent, rng);
    m.dec = nn::GruWeights::create(p, "dec", c.d_latent, c.dec_hidden, rng);
    m.dec_h0 = p.add("dec.h0", nn::uniform_init(1, c.dec_hidden, c.dec_hidden, rng));
    m.out_ln_g = p.add("out_ln.gain", Tensor::Ones(1, c.dec_hidden));
    m.out_ln_b = p.add("out_ln.bias", Tensor::Zero(1, c.dec_hidden));
    m.head = nn::Mlp::create(p, "head", {c.dec_hidden, plant::kOutputs}, nn::Activation::Identity, rng);
    return m;
  }

  // ---- taped pieces --------------------------------------------------------

  Var encode(Tape& tape, const std::vector<Tensor>& X, const std::vector<Tensor>& S, bool training,
             std::mt19937_64& rng) {
    require(static_cast<int>(X.size()) == cfg.T_enc && S.size() == X.size(), "encode: window length mismatch");
    const Eigen::Index B = X.front().rows();
    auto g = nn::GruVars::bind(tape, params, enc);
    Var h = tape.constant(Tensor::Zero(B, cfg.enc_hidden));
    for (std::size_t t = 0; t < X.size(); ++t) {
      require(X[t].cols() == cfg.d_x && S[t].cols() == cfg.d_s && X[t].rows() == B, "encode: shape mismatch");
      Var u = tape.constant(concat(X[t], S[t]));
      h = nn::gru_cell(g, u, h);
    }
    h = nn::layer_norm(h, tape.parameter(params, enc_ln_g), tape.parameter(params, enc_ln_b));
    h = nn::dropout(h, cfg.dropout, training, rng);
    Var z = proj.forward(tape, params, h);
    return nn::layer_norm(z, tape.parameter(params, lat_ln_g), tape.parameter(params, lat_ln_b));
  }

  static Var rk4(const nn::GruVars& f, Var u, Var zeta, double dt) {
    Var k1 = nn::gru_latent_derivative(f, u, zeta);
    Var k2 = nn::gru_latent_derivative(f, u, zeta + scale(k1, 0.5 * dt));
    Var k3 = nn::gru_latent_derivative(f, u, zeta + scale(k2, 0.5 * dt));
    Var k4 = nn::gru_latent_derivative(f, u, zeta + scale(k3, dt));
    return zeta + scale(k1 + scale(k2, 2.0) + scale(k3, 2.0) + k4, dt / 6.0);
  }

  struct DecoderVars {
    nn::GruVars g;
    Var h0, ln_g, ln_b, W, b;
  };
  DecoderVars bind_decoder(Tape& tape) {
    return DecoderVars{nn::GruVars::bind(tape, params, dec), tape.parameter(params, dec_h0),
                       tape.parameter(params, out_ln_g), tape.parameter(params, out_ln_b),
                       tape.parameter(params, head.layers[0].W), tape.parameter(params, head.layers[0].b)};
  }

  /// Decoder output and, when `dzeta` is valid, the tangent of the M_r and
  /// E_hx channels along dzeta.
  static std::pair<Var, Var> decode_with_tangent(const DecoderVars& d, Var zeta, Var dzeta) {
    Tape& tape = *zeta.tape;
    const Eigen::Index B = zeta.rows();
    Var h = matmul(tape.constant(Tensor::Ones(B, 1)), d.h0);
    Var r = sigmoid(add_row(matmul(zeta, d.g.W_r) + matmul(h, d.g.U_r), d.g.b_r));
    Var z = sigmoid(add_row(matmul(zeta, d.g.W_z) + matmul(h, d.g.U_z), d.g.b_z));
    Var rh = r * h;
    Var n = tanh(add_row(matmul(zeta, d.g.W_h) + matmul(rh, d.g.U_h), d.g.b_h));
    Var hid = one_minus(z) * n + z * h;
    Var a = nn::layer_norm(hid, d.ln_g, d.ln_b);
    Var y = add_row(matmul(a, d.W), d.b);
    if (!dzeta.valid()) return {y, Var{}};
    // Forward tangent with h fixed.
    Var dr = r * one_minus(r) * matmul(dzeta, d.g.W_r);
    Var dz = z * one_minus(z) * matmul(dzeta, d.g.W_z);
    Var dn = one_minus(n * n) * (matmul(dzeta, d.g.W_h) + matmul(dr * h, d.g.U_h));
    Var dhid = one_minus(z) * dn + dz * (h - n);
    Var da = nn::layer_norm_tangent(hid, dhid, d.ln_g);
    Var dy = matmul(da, slice_cols(d.W, plant::kChannelM, 2));
    return {y, dy};
  }

  ForwardResult forward(Tape& tape, const WindowBatch& w, bool training, std::mt19937_64& rng) {
    require(static_cast<int>(w.X_dec.size()) == cfg.T_dec && w.S_dec.size() == w.X_dec.size(),
            "forward: decoder window length mismatch");
    require(w.dt > 0.0, "forward: dt must be positive");
    ForwardResult out;
    Var zeta = encode(tape, w.X_enc, w.S_enc, training, rng);
    out.zeta.push_back(zeta);
    auto f = nn::GruVars::bind(tape, params, ode);
    DecoderVars d = bind_decoder(tape);
    for (int t = 0; t < cfg.T_dec; ++t) {
      Var u = tape.constant(concat(w.X_dec[t], w.S_dec[t]));
      zeta = rk4(f, u, zeta, w.dt);
      if (!zeta.value().allFinite()) throw NumericalFailure("latent state became non-finite at decoder step " + std::to_string(t));
      out.zeta.push_back(zeta);
      Var dzeta = nn::gru_latent_derivative(f, u, zeta);
      auto [y, dy] = decode_with_tangent(d, zeta, dzeta);
      out.Y.push_back(y);
      out.rates.push_back(dy);
    }
    return out;
  }

  // ---- value-only inference ------------------------------------------------

  /// Latent vector(s) from a history: X (T_enc x batch*... ) given as one
  /// tensor per step, like the taped version.
  Tensor encode_values(const std::vector<Tensor>& X, const std::vector<Tensor>& S) const {
    require(static_cast<int>(X.size()) == cfg.T_enc && S.size() == X.size(), "encode: window length mismatch");
    const auto g = nn::GruMatrices::from(params, enc);
    Tensor h = Tensor::Zero(X.front().rows(), cfg.enc_hidden);
    for (std::size_t t = 0; t < X.size(); ++t) h = nn::gru_cell_values(g, concat(X[t], S[t]), h);
    h = nn::layer_norm_values(h, params[enc_ln_g].value.row(0), params[enc_ln_b].value.row(0));
    Tensor z = proj.forward_values(params, h);
    return nn::layer_norm_values(z, params[lat_ln_g].value.row(0), params[lat_ln_b].value.row(0));
  }

  Tensor latent_rate_values(const Tensor& forcing, const Tensor& zeta) const {
    return nn::latent_derivative_values(nn::GruMatrices::from(params, ode), forcing, zeta);
  }

  Tensor rk4_values(const Tensor& forcing, const Tensor& zeta, double dt) const {
    const auto f = nn::GruMatrices::from(params, ode);
    const Tensor k1 = nn::latent_derivative_values(f, forcing, zeta);
    const Tensor k2 = nn::latent_derivative_values(f, forcing, zeta + 0.5 * dt * k1);
    const Tensor k3 = nn::latent_derivative_values(f, forcing, zeta + 0.5 * dt * k2);
    const Tensor k4 = nn::latent_derivative_values(f, forcing, zeta + dt * k3);
    return zeta + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  /// Advances the latent over `dt` using RK4 substeps no longer than the
  /// training step, so larger solver steps see the same discrete map.
  Tensor advance_values(const Tensor& forcing, const Tensor& zeta, double dt, double max_substep = 1.0) const {
    if (dt <= 0.0) return zeta;
    const int n = std::max(1, static_cast<int>(std::ceil(dt / max_substep - 1e-12)));
    Tensor z = zeta;
    for (int i = 0; i < n; ++i) z = rk4_values(forcing, z, dt / n);
    return z;
  }

  Tensor decode_values(const Tensor& zeta) const {
    Tensor y, dy;
    decode_tangent_values(zeta, nullptr, y, dy);
    return y;
  }

  /// Normalized decoder output and the (M_r, E_hx) channel rates along the
  /// latent velocity at the given forcing.
  void decode_with_rates_values(const Tensor& forcing, const Tensor& zeta, Tensor& y, Tensor& rates) const {
    const Tensor dz = latent_rate_values(forcing, zeta);
    decode_tangent_values(zeta, &dz, y, rates);
  }

  // ---- checkpoints -----------------------------------------------------------

  nlohmann::json to_checkpoint() const {
    nlohmann::json meta;
    meta["pinode"] = to_json(cfg);
    meta["pinode"]["kind"] = kind;
    meta["pinode"]["scaler_lo"] = std::vector<double>(scaler.lo.data(), scaler.lo.data() + scaler.size());
    meta["pinode"]["scaler_hi"] = std::vector<double>(scaler.hi.data(), scaler.hi.data() + scaler.size());
    return nn::to_json(params, meta);
  }

  static PinodeModel from_checkpoint(const nlohmann::json& doc) {
    require(doc.contains("meta") && doc["meta"].contains("pinode"), "checkpoint lacks pinode meta block");
    const auto& m = doc["meta"]["pinode"];
    PinodeModel model = create(model_config_from_json(m), 0);
    nn::from_json(doc, model.params);
    model.kind = m.value("kind", std::string("condenser"));
    const auto lo = m.at("scaler_lo").get<std::vector<double>>();
    const auto hi = m.at("scaler_hi").get<std::vector<double>>();
    require(lo.size() == plant::kInputs + plant::kOutputs && hi.size() == lo.size(), "checkpoint scaler size");
    model.scaler.lo = Eigen::Map<const Eigen::VectorXd>(lo.data(), lo.size());
    model.scaler.hi = Eigen::Map<const Eigen::VectorXd>(hi.data(), hi.size());
    return model;
  }

  static Tensor concat(const Tensor& a, const Tensor& b) {
    Tensor u(a.rows(), a.cols() + b.cols());
    u << a, b;
    return u;
  }

 private:
  void decode_tangent_values(const Tensor& zeta, const Tensor* dzeta, Tensor& y, Tensor& dy) const {
    const auto g = nn::GruMatrices::from(params, dec);
    const Eigen::Index B = zeta.rows();
    const Tensor h = Tensor::Ones(B, 1) * params[dec_h0].value;
    const Tensor r = nn::sigmoid_values((zeta * g.W_r + h * g.U_r).rowwise() + g.b_r);
    const Tensor z = nn::sigmoid_values((zeta * g.W_z + h * g.U_z).rowwise() + g.b_z);
    const Tensor n = ((zeta * g.W_h + r.cwiseProduct(h) * g.U_h).rowwise() + g.b_h).array().tanh().matrix();
    const Tensor hid = ((1.0 - z.array()) * n.array() + z.array() * h.array()).matrix();
    const Eigen::RowVectorXd gain = params[out_ln_g].value.row(0);
    const Tensor a = nn::layer_norm_values(hid, gain, params[out_ln_b].value.row(0));
    const Tensor& W = params[head.layers[0].W].value;
    y = (a * W).rowwise() + params[head.layers[0].b].value.row(0);
    if (!dzeta) return;
    const Tensor dr = (r.array() * (1.0 - r.array()) * (*dzeta * g.W_r).array()).matrix();
    const Tensor dzg = (z.array() * (1.0 - z.array()) * (*dzeta * g.W_z).array()).matrix();
    const Tensor dn =
        ((1.0 - n.array().square()) * (*dzeta * g.W_h + dr.cwiseProduct(h) * g.U_h).array()).matrix();
    const Tensor dhid = ((1.0 - z.array()) * dn.array() + dzg.array() * (h - n).array()).matrix();
    // Layer-norm tangent, row by row.
    const Eigen::Index H = hid.cols();
    Tensor da(B, H);
    for (Eigen::Index i = 0; i < B; ++i) {
      const Eigen::RowVectorXd c = hid.row(i).array() - hid.row(i).mean();
      const Eigen::RowVectorXd dc = dhid.row(i).array() - dhid.row(i).mean();
      const double var = c.squaredNorm() / H;
      const double inv = 1.0 / std::sqrt(var + nn::kLayerNormEps);
      const double dvar = 2.0 * c.dot(dc) / H;
      const double dinv = -0.5 * inv * inv * inv * dvar;
      da.row(i) = ((dc * inv + c * dinv).array() * gain.array()).matrix();
    }
    dy = da * W.middleCols(plant::kChannelM, 2);
  }
};

}  // namespace thermoloop::pinode
