#pragma once

// Neural building blocks on top of the tape: GRU cells, the gated latent
// vector field, layer normalization, dropout, dense stacks and the bounded
// tanh output.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "thermoloop/nn/autodiff.hpp"

namespace thermoloop::nn {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kDefaultDropout = 0.1;
inline constexpr double kDefaultConstrainScale = 0.2;

/// Uniform in +-1/sqrt(fan_in).
inline Tensor uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------

/// Indices of a GRU weight bundle inside a ParameterSet. Input weights are
/// stored (in x hidden) so that a row batch multiplies from the left.
struct GruWeights {
  std::size_t W_r, W_z, W_h;
  std::size_t U_r, U_z, U_h;
  std::size_t b_r, b_z, b_h;
  Eigen::Index input_dim = 0;
  Eigen::Index hidden_dim = 0;

  static GruWeights create(ParameterSet& set, const std::string& prefix, Eigen::Index input_dim,
                           Eigen::Index hidden_dim, std::mt19937_64& rng) {
    require(input_dim >= 1 && hidden_dim >= 1, "GRU dimensions must be positive");
    GruWeights w;
    w.input_dim = input_dim;
    w.hidden_dim = hidden_dim;
    const double fi = static_cast<double>(input_dim), fh = static_cast<double>(hidden_dim);
    w.W_r = set.add(prefix + ".W_r", uniform_init(input_dim, hidden_dim, fi, rng));
    w.W_z = set.add(prefix + ".W_z", uniform_init(input_dim, hidden_dim, fi, rng));
    w.W_h = set.add(prefix + ".W_h", uniform_init(input_dim, hidden_dim, fi, rng));
    w.U_r = set.add(prefix + ".U_r", uniform_init(hidden_dim, hidden_dim, fh, rng));
    w.U_z = set.add(prefix + ".U_z", uniform_init(hidden_dim, hidden_dim, fh, rng));
    w.U_h = set.add(prefix + ".U_h", uniform_init(hidden_dim, hidden_dim, fh, rng));
    w.b_r = set.add(prefix + ".b_r", uniform_init(1, hidden_dim, fh, rng));
    w.b_z = set.add(prefix + ".b_z", uniform_init(1, hidden_dim, fh, rng));
    w.b_h = set.add(prefix + ".b_h", uniform_init(1, hidden_dim, fh, rng));
    return w;
  }
};

/// Tape handles for one GRU bundle, bound once per forward pass.
struct GruVars {
  Var W_r, W_z, W_h, U_r, U_z, U_h, b_r, b_z, b_h;

  static GruVars bind(Tape& tape, ParameterSet& set, const GruWeights& w) {
    return GruVars{tape.parameter(set, w.W_r), tape.parameter(set, w.W_z),
                   tape.parameter(set, w.W_h), tape.parameter(set, w.U_r),
                   tape.parameter(set, w.U_z), tape.parameter(set, w.U_h),
                   tape.parameter(set, w.b_r), tape.parameter(set, w.b_z),
                   tape.parameter(set, w.b_h)};
  }
};

/// Standard GRU update h' = (1 - z) * n + z * h.
inline Var gru_cell(const GruVars& w, Var x, Var h) {
  Var r = sigmoid(add_row(matmul(x, w.W_r) + matmul(h, w.U_r), w.b_r));
  Var z = sigmoid(add_row(matmul(x, w.W_z) + matmul(h, w.U_z), w.b_z));
  Var n = tanh(add_row(matmul(x, w.W_h) + matmul(r * h, w.U_h), w.b_h));
  return one_minus(z) * n + z * h;
}

/// Gated latent vector field dzeta/dt = (1 - z) * (candidate - zeta), where
/// `forcing` is the concatenated [x, s] row batch.
inline Var gru_latent_derivative(const GruVars& w, Var forcing, Var zeta) {
  if (forcing.cols() != w.W_r.rows())
    throw ContractViolation("latent derivative: forcing has " + std::to_string(forcing.cols()) +
                            " columns, weights expect " + std::to_string(w.W_r.rows()));
  if (zeta.cols() != w.U_r.rows())
    throw ContractViolation("latent derivative: latent has " + std::to_string(zeta.cols()) +
                            " columns, weights expect " + std::to_string(w.U_r.rows()));
  Var r = sigmoid(add_row(matmul(forcing, w.W_r) + matmul(zeta, w.U_r), w.b_r));
  Var z = sigmoid(add_row(matmul(forcing, w.W_z) + matmul(zeta, w.U_z), w.b_z));
  Var cand = tanh(add_row(matmul(forcing, w.W_h) + matmul(r * zeta, w.U_h), w.b_h));
  return one_minus(z) * (cand - zeta);
}

/// Plain-matrix evaluation of the same vector field (no tape).
struct GruMatrices {
  Tensor W_r, W_z, W_h, U_r, U_z, U_h;
  Eigen::RowVectorXd b_r, b_z, b_h;

  static GruMatrices from(const ParameterSet& set, const GruWeights& w) {
    return GruMatrices{set[w.W_r].value, set[w.W_z].value, set[w.W_h].value,
                       set[w.U_r].value, set[w.U_z].value, set[w.U_h].value,
                       set[w.b_r].value.row(0), set[w.b_z].value.row(0), set[w.b_h].value.row(0)};
  }
};

inline Tensor latent_derivative_values(const GruMatrices& w, const Tensor& forcing, const Tensor& zeta) {
  require(forcing.cols() == w.W_r.rows() && zeta.cols() == w.U_r.rows() &&
              forcing.rows() == zeta.rows(),
          "latent derivative: dimension mismatch");
  const Tensor r = sigmoid_values((forcing * w.W_r + zeta * w.U_r).rowwise() + w.b_r);
  const Tensor z = sigmoid_values((forcing * w.W_z + zeta * w.U_z).rowwise() + w.b_z);
  const Tensor cand =
      ((forcing * w.W_h + r.cwiseProduct(zeta) * w.U_h).rowwise() + w.b_h).array().tanh().matrix();
  return ((1.0 - z.array()) * (cand - zeta).array()).matrix();
}

inline Tensor gru_cell_values(const GruMatrices& w, const Tensor& x, const Tensor& h) {
  const Tensor r = sigmoid_values((x * w.W_r + h * w.U_r).rowwise() + w.b_r);
  const Tensor z = sigmoid_values((x * w.W_z + h * w.U_z).rowwise() + w.b_z);
  const Tensor n =
      ((x * w.W_h + r.cwiseProduct(h) * w.U_h).rowwise() + w.b_h).array().tanh().matrix();
  return ((1.0 - z.array()) * n.array() + z.array() * h.array()).matrix();
}

// ---------------------------------------------------------------------------

/// Row-wise layer normalization with population variance.
inline Var layer_norm(Var v, Var gain, Var bias, double eps = kLayerNormEps) {
  require(v.cols() >= 2, "layer_norm needs at least two features");
  Var centered = sub_col(v, row_mean(v));
  Var inv_std = rsqrt(row_mean(square(centered)), eps);
  return add_row(mul_row(mul_col(centered, inv_std), gain), bias);
}

inline Tensor layer_norm_values(const Tensor& v, const Eigen::RowVectorXd& gain,
                                const Eigen::RowVectorXd& bias, double eps = kLayerNormEps) {
  require(v.cols() >= 2, "layer_norm needs at least two features");
  Tensor centered = v.colwise() - v.rowwise().mean();
  Eigen::VectorXd inv_std =
      (centered.array().square().rowwise().mean() + eps).rsqrt().matrix();
  Tensor out = centered.array().colwise() * inv_std.array();
  out = (out.array().rowwise() * gain.array()).matrix();
  return out.rowwise() + bias;
}

/// Directional derivative of layer_norm at `v` along `dv` (bias drops out).
inline Var layer_norm_tangent(Var v, Var dv, Var gain, double eps = kLayerNormEps) {
  Var centered = sub_col(v, row_mean(v));
  Var dcentered = sub_col(dv, row_mean(dv));
  Var var = row_mean(square(centered));
  Var inv_std = rsqrt(var, eps);
  // d(var) = 2 mean(c * dc); d(inv_std) = -0.5 (var+eps)^-3/2 d(var)
  Var dvar = scale(row_mean(centered * dcentered), 2.0);
  Var inv_std3 = inv_std * inv_std * inv_std;
  Var dinv = scale(inv_std3 * dvar, -0.5);
  Var dnorm = mul_col(dcentered, inv_std) + mul_col(centered, dinv);
  return mul_row(dnorm, gain);
}

/// Inverted dropout. Identity when `training` is false or rate is zero.
inline Var dropout(Var v, double rate, bool training, std::mt19937_64& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0,1)");
  if (!training || rate == 0.0) return v;
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul_const(v, mask);
}

/// scale * tanh(v): every entry strictly inside (-scale, scale).
inline Var constrain_tanh(Var v, double scale_bound = kDefaultConstrainScale) {
  require(scale_bound > 0.0, "constrain_tanh scale must be positive");
  return scale(tanh(v), scale_bound);
}

inline Tensor constrain_tanh_values(const Tensor& v, double scale_bound = kDefaultConstrainScale) {
  require(scale_bound > 0.0, "constrain_tanh scale must be positive");
  return (scale_bound * v.array().tanh()).matrix();
}

// ---------------------------------------------------------------------------

enum class Activation { Tanh, Sigmoid, Identity };

inline Var activate(Var v, Activation a) {
  switch (a) {
    case Activation::Tanh: return tanh(v);
    case Activation::Sigmoid: return sigmoid(v);
    case Activation::Identity: return v;
  }
  return v;
}

inline Tensor activate_values(const Tensor& v, Activation a) {
  switch (a) {
    case Activation::Tanh: return v.array().tanh().matrix();
    case Activation::Sigmoid: return sigmoid_values(v);
    case Activation::Identity: return v;
  }
  return v;
}

/// Dense stack: hidden layers share one activation, the last layer is linear.
struct Mlp {
  struct Layer {
    std::size_t W, b;
  };
  std::vector<Layer> layers;
  Activation hidden_activation = Activation::Tanh;

  static Mlp create(ParameterSet& set, const std::string& prefix, const std::vector<Eigen::Index>& dims,
                    Activation act, std::mt19937_64& rng) {
    require(dims.size() >= 2, "MLP needs at least input and output widths");
    Mlp m;
    m.hidden_activation = act;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const double fan_in = static_cast<double>(dims[i]);
      Layer l;
      l.W = set.add(prefix + ".W" + std::to_string(i + 1), uniform_init(dims[i], dims[i + 1], fan_in, rng));
      l.b = set.add(prefix + ".b" + std::to_string(i + 1), uniform_init(1, dims[i + 1], fan_in, rng));
      m.layers.push_back(l);
    }
    return m;
  }

  Var forward(Tape& tape, ParameterSet& set, Var x) const {
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = add_row(matmul(h, tape.parameter(set, layers[i].W)), tape.parameter(set, layers[i].b));
      if (i + 1 < layers.size()) h = activate(h, hidden_activation);
    }
    return h;
  }

  Tensor forward_values(const ParameterSet& set, const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = (h * set[layers[i].W].value).rowwise() + set[layers[i].b].value.row(0);
      if (i + 1 < layers.size()) h = activate_values(h, hidden_activation);
    }
    return h;
  }
};

}  // namespace thermoloop::nn
