#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fd_check.hpp"
#include "thermoloop/nn/layers.hpp"
#include "thermoloop/nn/optim.hpp"
#include "thermoloop/nn/weights_io.hpp"

using namespace thermoloop;
using namespace thermoloop::nn;
using Catch::Approx;

namespace {

Tensor scalar(double v) { return Tensor::Constant(1, 1, v); }

Tensor random_block(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::uniform_real_distribution<double> d(-s, s);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
  return t;
}

}  // namespace

TEST_CASE("backward on x^2 at 3 gives 6") {
  ParameterSet set;
  auto ix = set.add("x", scalar(3.0));
  Tape tape;
  Var x = tape.parameter(set, ix);
  tape.backward(square(x));
  CHECK(set[ix].grad(0, 0) == Approx(6.0));
}

TEST_CASE("backward on tanh at 0 gives 1") {
  ParameterSet set;
  auto ix = set.add("x", scalar(0.0));
  Tape tape;
  tape.backward(nn::tanh(tape.parameter(set, ix)));
  CHECK(set[ix].grad(0, 0) == Approx(1.0));
}

TEST_CASE("backward rejects non-scalar output and unreachable leaves get zero") {
  ParameterSet set;
  auto ia = set.add("a", Tensor::Ones(2, 2));
  auto ib = set.add("b", scalar(1.0));
  Tape tape;
  Var a = tape.parameter(set, ia);
  tape.parameter(set, ib);
  CHECK_THROWS_AS(tape.backward(a), ContractViolation);
  tape.backward(sum(a));
  CHECK(set[ib].grad(0, 0) == 0.0);
  CHECK(set[ia].grad.isApprox(Tensor::Ones(2, 2)));
}

TEST_CASE("backward flags non-finite forward values") {
  ParameterSet set;
  auto ix = set.add("x", scalar(-1.0));
  Tape tape;
  Var y = rsqrt(tape.parameter(set, ix), 0.0);
  CHECK_THROWS_AS(tape.backward(sum(y)), NumericalFailure);
}

TEST_CASE("GRU cell gradient matches central differences") {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    ParameterSet set;
    auto w = GruWeights::create(set, "gru", 3, 4, rng);
    auto ix = set.add("x", random_block(2, 3, rng));
    auto ih = set.add("h", random_block(2, 4, rng, 0.5));
    auto loss = [&](Tape& t, ParameterSet& s) {
      auto g = GruVars::bind(t, s, w);
      Var h = gru_cell(g, t.parameter(s, ix), t.parameter(s, ih));
      return sum(square(h));
    };
    CHECK(fdcheck::max_rel_error(loss, set) < 1e-4);
  }
}

TEST_CASE("layer norm, tangent, dropout and MLP gradients match central differences") {
  std::mt19937_64 rng(7);
  ParameterSet set;
  auto iv = set.add("v", random_block(3, 5, rng));
  auto idv = set.add("dv", random_block(3, 5, rng));
  auto ig = set.add("g", random_block(1, 5, rng));
  auto ib = set.add("b", random_block(1, 5, rng));
  auto mlp = Mlp::create(set, "mlp", {5, 6, 2}, Activation::Sigmoid, rng);
  Tensor mask = Tensor::Ones(3, 5);
  mask(0, 1) = 0.0;
  auto loss = [&](Tape& t, ParameterSet& s) {
    Var v = t.parameter(s, iv), g = t.parameter(s, ig);
    Var ln = layer_norm(v, g, t.parameter(s, ib));
    Var tan = layer_norm_tangent(v, t.parameter(s, idv), g);
    Var out = mlp.forward(t, s, mul_const(ln, mask));
    return sum(square(out)) + sum(tan * tan) + sum(constrain_tanh(tan));
  };
  CHECK(fdcheck::max_rel_error(loss, set) < 1e-4);
}

TEST_CASE("layer norm tangent equals the directional finite difference") {
  std::mt19937_64 rng(3);
  Tensor v = random_block(2, 6, rng), dv = random_block(2, 6, rng);
  Eigen::RowVectorXd g = random_block(1, 6, rng).row(0), b = Eigen::RowVectorXd::Zero(6);
  const double h = 1e-6;
  Tensor fd = (layer_norm_values(v + h * dv, g, b) - layer_norm_values(v - h * dv, g, b)) / (2 * h);
  Tape tape(false);
  Tensor an = layer_norm_tangent(tape.constant(v), tape.constant(dv), tape.constant(g)).value();
  CHECK((fd - an).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("latent derivative with zero weights is -0.5 zeta") {
  ParameterSet set;
  std::mt19937_64 rng(1);
  auto w = GruWeights::create(set, "f", 10, 8, rng);
  for (auto& p : set) p.value.setZero();
  Tape tape(false);
  auto g = GruVars::bind(tape, set, w);
  Var d = gru_latent_derivative(g, tape.constant(Tensor::Random(1, 10)), tape.constant(Tensor::Ones(1, 8)));
  CHECK(d.value().isApprox(Tensor::Constant(1, 8, -0.5)));
}

TEST_CASE("latent derivative vanishes at its fixed point") {
  // Saturate z to 0 and make the candidate equal zeta = tanh(b_h) exactly.
  ParameterSet set;
  std::mt19937_64 rng(2);
  auto w = GruWeights::create(set, "f", 2, 3, rng);
  for (auto& p : set) p.value.setZero();
  set[w.b_h].value << 0.3, -0.2, 0.1;
  Tensor zeta = set[w.b_h].value.array().tanh().matrix();
  Tape tape(false);
  auto g = GruVars::bind(tape, set, w);
  Var d = gru_latent_derivative(g, tape.constant(Tensor::Zero(1, 2)), tape.constant(zeta));
  CHECK(d.value().cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("latent derivative matches straight-line matrix arithmetic") {
  std::mt19937_64 rng(11);
  ParameterSet set;
  auto w = GruWeights::create(set, "f", 10, 8, rng);
  Tensor xs = random_block(1, 10, rng), zeta = random_block(1, 8, rng);
  // Independent evaluation, one entry at a time.
  auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  const Tensor &Wr = set[w.W_r].value, &Wz = set[w.W_z].value, &Wh = set[w.W_h].value;
  const Tensor &Ur = set[w.U_r].value, &Uz = set[w.U_z].value, &Uh = set[w.U_h].value;
  std::vector<double> r(8), z(8), expect(8);
  for (int j = 0; j < 8; ++j) {
    double ar = set[w.b_r].value(0, j), az = set[w.b_z].value(0, j);
    for (int i = 0; i < 10; ++i) ar += xs(0, i) * Wr(i, j), az += xs(0, i) * Wz(i, j);
    for (int i = 0; i < 8; ++i) ar += zeta(0, i) * Ur(i, j), az += zeta(0, i) * Uz(i, j);
    r[j] = sig(ar);
    z[j] = sig(az);
  }
  for (int j = 0; j < 8; ++j) {
    double ah = set[w.b_h].value(0, j);
    for (int i = 0; i < 10; ++i) ah += xs(0, i) * Wh(i, j);
    for (int i = 0; i < 8; ++i) ah += r[i] * zeta(0, i) * Uh(i, j);
    expect[j] = (1.0 - z[j]) * (std::tanh(ah) - zeta(0, j));
  }
  Tape tape(false);
  auto g = GruVars::bind(tape, set, w);
  Tensor got = gru_latent_derivative(g, tape.constant(xs), tape.constant(zeta)).value();
  Tensor fast = latent_derivative_values(GruMatrices::from(set, w), xs, zeta);
  for (int j = 0; j < 8; ++j) {
    CHECK(got(0, j) == Approx(expect[j]).margin(1e-14));
    CHECK(fast(0, j) == Approx(expect[j]).margin(1e-14));
    CHECK(std::abs(got(0, j)) <= std::abs(std::tanh(0.0) + 2.0));
  }
  CHECK_THROWS_AS(gru_latent_derivative(g, tape.constant(Tensor::Zero(1, 9)), tape.constant(zeta)),
                  ContractViolation);
}

TEST_CASE("layer norm examples") {
  Eigen::RowVectorXd one4 = Eigen::RowVectorXd::Ones(4), zero4 = Eigen::RowVectorXd::Zero(4);
  Tensor c = Tensor::Constant(1, 4, 2.5);
  CHECK(layer_norm_values(c, one4, zero4).cwiseAbs().maxCoeff() == 0.0);

  Tensor pm(1, 2);
  pm << 1, -1;
  Tensor out = layer_norm_values(pm, Eigen::RowVectorXd::Ones(2), Eigen::RowVectorXd::Zero(2));
  CHECK(out(0, 0) == Approx(1.0 / std::sqrt(1.0 + 1e-5)));
  CHECK(out(0, 1) == Approx(-1.0 / std::sqrt(1.0 + 1e-5)));

  Tensor v(1, 4);
  v << 1, 2, 3, 4;
  Tensor ln = layer_norm_values(v, one4, zero4);
  const double sd = std::sqrt(1.25 + 1e-5);
  for (int i = 0; i < 4; ++i) CHECK(ln(0, i) == Approx((v(0, i) - 2.5) / sd).margin(1e-14));

  // gain = std, bias = mean recovers the input.
  Tensor back = layer_norm_values(v, Eigen::RowVectorXd::Constant(4, sd), Eigen::RowVectorXd::Constant(4, 2.5));
  CHECK((back - v).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(layer_norm_values(Tensor::Ones(1, 1), Eigen::RowVectorXd::Ones(1), Eigen::RowVectorXd::Zero(1)),
                  ContractViolation);
}

TEST_CASE("adam first steps") {
  ParameterSet set;
  auto i = set.add("x", scalar(0.0));
  OptimizerState st(set, 1e-3);
  set[i].grad(0, 0) = 1.0;
  adam_step(set, st);
  CHECK(set[i].value(0, 0) == Approx(-1e-3 * 1.0 / (1.0 + 1e-8)).epsilon(1e-12));
  adam_step(set, st);
  CHECK(set[i].value(0, 0) - (-1e-3) == Approx(-1e-3).epsilon(1e-6));
  CHECK(st.step == 2);

  const double before = set[i].value(0, 0);
  const double m_before = st.m[0](0, 0);
  set[i].grad.setZero();
  OptimizerState fresh(set, 1e-3);
  adam_step(set, fresh);
  CHECK(set[i].value(0, 0) == before);
  adam_step(set, st);
  CHECK(st.m[0](0, 0) == Approx(0.9 * m_before));
}

TEST_CASE("gradient clipping") {
  Eigen::VectorXd g(2);
  g << 0.3, 0.4;
  CHECK(clip_gradients(g).isApprox(g));
  Eigen::VectorXd big = g * 4.0;  // norm 2
  CHECK(clip_gradients(big).isApprox(big * 0.5));
  CHECK(clip_gradients(clip_gradients(big)).isApprox(clip_gradients(big)));
  CHECK(clip_gradients(Eigen::VectorXd::Zero(3)).norm() == 0.0);
  CHECK_THROWS_AS(clip_gradients(g, 0.0), ContractViolation);

  ParameterSet set;
  set.add("a", Tensor::Constant(1, 1, 0.0));
  set.add("b", Tensor::Constant(1, 2, 0.0));
  set[0].grad(0, 0) = 2.0;
  set[1].grad << 0.0, 0.0;
  CHECK(clip_gradients(set) == Approx(2.0));
  CHECK(set[0].grad(0, 0) == Approx(1.0));
}

TEST_CASE("constrain_tanh") {
  Tensor v(1, 3);
  v << 0.0, 1.0, 1e3;
  Tensor out = constrain_tanh_values(v, 0.2);
  CHECK(out(0, 0) == 0.0);
  CHECK(out(0, 1) == Approx(0.152318).margin(1e-6));
  CHECK(out(0, 2) == Approx(0.2));
  CHECK(constrain_tanh_values(-v, 0.2).isApprox(-out));
}

TEST_CASE("dropout is identity at eval time and inverted-scaled in training") {
  std::mt19937_64 rng(5);
  Tape tape(false);
  Var v = tape.constant(Tensor::Ones(50, 40));
  CHECK(dropout(v, 0.1, false, rng).value().isApprox(Tensor::Ones(50, 40)));
  Tensor d = dropout(v, 0.1, true, rng).value();
  for (Eigen::Index i = 0; i < d.size(); ++i)
    CHECK((d.data()[i] == 0.0 || std::abs(d.data()[i] - 1.0 / 0.9) < 1e-15));
  CHECK(d.mean() == Approx(1.0).margin(0.05));
}

TEST_CASE("plateau scheduler halves the rate after patience bad epochs") {
  ParameterSet set;
  set.add("x", scalar(0.0));
  OptimizerState st(set, 1e-3);
  PlateauScheduler sched(0.5, 3);
  sched.observe(1.0, st);
  for (int i = 0; i < 3; ++i) CHECK_FALSE(sched.observe(2.0, st));
  CHECK(sched.observe(2.0, st));
  CHECK(st.learning_rate == Approx(5e-4));
}

TEST_CASE("weight container round trip") {
  std::mt19937_64 rng(9);
  ParameterSet a;
  Mlp::create(a, "m", {4, 3, 2}, Activation::Tanh, rng);
  json doc = to_json(a, {{"kind", "test"}});
  CHECK(doc["layers"][0]["shape"][0] == 4);
  CHECK(doc["layers"][0]["values"][1].get<double>() == a[0].value(0, 1));
  ParameterSet b;
  std::mt19937_64 rng2(10);
  Mlp::create(b, "m", {4, 3, 2}, Activation::Tanh, rng2);
  from_json(doc, b);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].value == b[i].value);
  ParameterSet c;
  Mlp::create(c, "m", {4, 5, 2}, Activation::Tanh, rng2);
  CHECK_THROWS_AS(from_json(doc, c), ContractViolation);
}
