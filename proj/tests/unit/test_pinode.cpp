#include <catch_amalgamated.hpp>

#include <cmath>

#include "fd_check.hpp"
#include "thermoloop/pinode/train.hpp"

using namespace thermoloop;
using namespace thermoloop::pinode;
using Catch::Approx;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_latent = 3;
  c.enc_hidden = 4;
  c.dec_hidden = 5;
  c.T_enc = 3;
  c.T_dec = 2;
  c.dropout = 0.0;
  return c;
}

WindowBatch random_batch(const ModelConfig& c, Eigen::Index B, unsigned long seed, double dt = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto fill = [&](Eigen::Index r, Eigen::Index k) {
    Tensor t(r, k);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
    return t;
  };
  WindowBatch w;
  w.dt = dt;
  for (int t = 0; t < c.T_enc; ++t) {
    w.X_enc.push_back(fill(B, 8));
    w.S_enc.push_back(fill(B, 2));
  }
  for (int t = 0; t < c.T_dec; ++t) {
    w.X_dec.push_back(fill(B, 8));
    w.S_dec.push_back(fill(B, 2));
    w.Y.push_back(fill(B, 9));
    w.rates.push_back(fill(B, 2));
  }
  return w;
}

void zero_all(PinodeModel& m) {
  for (auto& p : m.params) p.value.setZero();
}

}  // namespace

TEST_CASE("zero weights collapse the encoder to the projection bias", "[pinode]") {
  PinodeModel m = PinodeModel::create(tiny_config(), 3);
  zero_all(m);
  m.params[m.lat_ln_g].value.setOnes();
  Tensor b(1, 3);
  b << 0.3, -0.7, 1.1;
  m.params[m.proj.layers[0].b].value = b;
  WindowBatch w = random_batch(m.cfg, 2, 1);
  Tensor z = m.encode_values(w.X_enc, w.S_enc);
  Tensor expect = nn::layer_norm_values(b, Eigen::RowVectorXd::Ones(3), Eigen::RowVectorXd::Zero(3));
  CHECK((z.row(0) - expect).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((z.row(1) - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("default latent width is 8 and history order matters", "[pinode]") {
  ModelConfig c;
  c.T_enc = 5;
  PinodeModel m = PinodeModel::create(c, 4);
  WindowBatch w = random_batch(c, 1, 2);
  Tensor z = m.encode_values(w.X_enc, w.S_enc);
  CHECK(z.cols() == 8);
  std::reverse(w.X_enc.begin(), w.X_enc.end());
  std::reverse(w.S_enc.begin(), w.S_enc.end());
  Tensor z2 = m.encode_values(w.X_enc, w.S_enc);
  CHECK((z - z2).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("saturated update gate freezes the latent and zeroes the rates", "[pinode]") {
  PinodeModel m = PinodeModel::create(tiny_config(), 5);
  m.params[m.ode.W_z].value.setZero();
  m.params[m.ode.U_z].value.setZero();
  m.params[m.ode.b_z].value.setConstant(800.0);  // sigmoid == 1 exactly
  WindowBatch w = random_batch(m.cfg, 3, 6);
  Tape tape(false);
  std::mt19937_64 rng(0);
  ForwardResult f = m.forward(tape, w, false, rng);
  for (std::size_t t = 1; t < f.zeta.size(); ++t) CHECK((f.zeta[t].value() - f.zeta[0].value()).cwiseAbs().maxCoeff() == 0.0);
  for (const auto& r : f.rates) CHECK(r.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("one RK4 step of the linear latent field", "[pinode]") {
  ModelConfig c = tiny_config();
  c.d_latent = 1;
  PinodeModel m = PinodeModel::create(c, 1);
  zero_all(m);  // zero weights: dzeta/dt = -0.5 zeta
  Tensor z0 = Tensor::Ones(1, 1), u = Tensor::Zero(1, 10);
  // dt = 0.2 on -0.5 zeta is dt = 0.1 on -zeta.
  CHECK(m.rk4_values(u, z0, 0.2)(0, 0) == Approx(0.90483750).margin(5e-9));
  // The taped step agrees.
  Tape tape(false);
  auto f = nn::GruVars::bind(tape, m.params, m.ode);
  Var zt = PinodeModel::rk4(f, tape.constant(u), tape.constant(z0), 0.2);
  CHECK(zt.value()(0, 0) == Approx(m.rk4_values(u, z0, 0.2)(0, 0)).epsilon(1e-15));
}

TEST_CASE("RK4 latent integration is fourth order", "[pinode]") {
  ModelConfig c = tiny_config();
  c.d_latent = 1;
  PinodeModel m = PinodeModel::create(c, 1);
  zero_all(m);
  const Tensor u = Tensor::Zero(1, 10);
  // Horizon 2 on -0.5 zeta is [0, 1] on -zeta.
  std::vector<double> logh, loge;
  for (int n : {2, 4, 8, 16}) {
    Tensor z = Tensor::Ones(1, 1);
    for (int i = 0; i < n; ++i) z = m.rk4_values(u, z, 2.0 / n);
    logh.push_back(std::log(1.0 / n));
    loge.push_back(std::log(std::abs(z(0, 0) - std::exp(-1.0))));
  }
  const double slope = (loge.back() - loge.front()) / (logh.back() - logh.front());
  CHECK(slope == Approx(4.0).margin(0.2));
  // Halving the step cuts the error about 16x.
  CHECK(std::exp(loge[2] - loge[3]) == Approx(16.0).margin(1.5));
}

TEST_CASE("decoder: zero weights give the bias, random weights separate inputs", "[pinode]") {
  PinodeModel m = PinodeModel::create(tiny_config(), 7);
  Tensor z1 = Tensor::Random(2, 3), z2 = Tensor::Random(2, 3);
  CHECK(m.decode_values(z1).cols() == 9);
  CHECK((m.decode_values(z1) - m.decode_values(z2)).cwiseAbs().maxCoeff() > 1e-6);
  zero_all(m);
  Tensor b = Tensor::Random(1, 9);
  m.params[m.head.layers[0].b].value = b;
  Tensor y = m.decode_values(z1);
  for (int r = 0; r < 2; ++r) CHECK((y.row(r) - b.row(0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("rates equal the decoder Jacobian times the latent velocity", "[pinode]") {
  for (unsigned long seed = 1; seed <= 5; ++seed) {
    PinodeModel m = PinodeModel::create(tiny_config(), seed);
    WindowBatch w = random_batch(m.cfg, 1, seed + 100);
    Tape tape(false);
    std::mt19937_64 rng(0);
    ForwardResult f = m.forward(tape, w, false, rng);
    const Tensor zeta = f.zeta[1].value();
    const Tensor u = PinodeModel::concat(w.X_dec[0], w.S_dec[0]);
    const Tensor v = m.latent_rate_values(u, zeta);
    // Explicit chain rule with a central-difference Jacobian.
    Eigen::MatrixXd J(2, 3);
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Tensor zp = zeta, zm = zeta;
      zp(0, k) += h;
      zm(0, k) -= h;
      const Tensor d = (m.decode_values(zp) - m.decode_values(zm)) / (2 * h);
      J(0, k) = d(0, plant::kChannelM);
      J(1, k) = d(0, plant::kChannelE);
    }
    const Eigen::Vector2d chain = J * v.row(0).transpose();
    const Tensor taped = f.rates[0].value();
    for (int c = 0; c < 2; ++c) CHECK(std::abs(taped(0, c) - chain(c)) <= 1e-8 * std::max(1.0, std::abs(chain(c))));
    Tensor y, rv;
    m.decode_with_rates_values(u, zeta, y, rv);
    CHECK((rv - taped).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((y - f.Y[0].value()).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("rates match finite differences of the predicted mass along the latent flow", "[pinode]") {
  PinodeModel m = PinodeModel::create(tiny_config(), 11);
  const Tensor u = Tensor::Random(1, 10) * 0.5;
  Tensor zeta = Tensor::Random(1, 3);
  for (double dt : {1e-2, 1e-3}) {
    Tensor y, r;
    m.decode_with_rates_values(u, zeta, y, r);
    const Tensor y2 = m.decode_values(m.rk4_values(u, zeta, dt));
    const double fd = (y2(0, plant::kChannelM) - y(0, plant::kChannelM)) / dt;
    CHECK(std::abs(fd - r(0, 0)) < 5.0 * dt * std::max(1.0, std::abs(r(0, 0))));
  }
}

TEST_CASE("forward shapes", "[pinode]") {
  ModelConfig c;
  PinodeModel m = PinodeModel::create(c, 2);
  WindowBatch w = random_batch(c, 4, 3);
  Tape tape(false);
  std::mt19937_64 rng(0);
  ForwardResult f = m.forward(tape, w, false, rng);
  REQUIRE(f.Y.size() == 10);
  CHECK(f.Y[0].rows() == 4);
  CHECK(f.Y[0].cols() == 9);
  CHECK(f.rates.size() == 10);
  CHECK(f.rates[9].cols() == 2);
  w.X_enc.pop_back();
  CHECK_THROWS_AS(m.forward(tape, w, false, rng), ContractViolation);
}

TEST_CASE("true rates under the adopted sign convention", "[pinode]") {
  auto [M0, E0] = true_rates(0.02, 0.02, 3e5, 3e5, 0.0);
  CHECK(M0 == 0.0);
  CHECK(E0 == 0.0);
  auto [M1, E1] = true_rates(0.02, 0.02, 4e5, 2.5e5, 3000.0);
  CHECK(M1 == 0.0);
  CHECK(E1 == Approx(0.0).margin(1e-9));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const double mi = 0.05 * u(rng), mo = 0.05 * u(rng), hi = 2e5 + 2e5 * u(rng), ho = 2e5 + 2e5 * u(rng);
    const double q = 6000.0 * (u(rng) - 0.5);
    auto [M, E] = true_rates(mi, mo, hi, ho, q);
    CHECK(M == mi - mo);
    CHECK(E == Approx(mi * hi - mo * ho - q).epsilon(1e-14));
  }
}

TEST_CASE("loss composition", "[pinode]") {
  Eigen::MatrixXd Y = Eigen::MatrixXd::Random(4, 9), r = Eigen::MatrixXd::Random(4, 2);
  Losses zero = compute_losses(Y, Y, r, r, 0.5, 0.5);
  CHECK(zero.total == 0.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(1, 9), b = a;
  b(0, 2) = 2.0;
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(1, 2);
  Losses one = compute_losses(a, b, z, z, 0.5, 0.5);
  CHECK(one.data == Approx(4.0 / 9.0));
  CHECK(one.cons == 0.0);
  Eigen::MatrixXd Yp = Eigen::MatrixXd::Random(6, 9), rp = Eigen::MatrixXd::Random(6, 2);
  Eigen::MatrixXd Yt = Eigen::MatrixXd::Random(6, 9), rt = Eigen::MatrixXd::Random(6, 2);
  Losses l = compute_losses(Yp, Yt, rp, rt, 0.5, 0.5);
  CHECK(l.total == l.data + 0.5 * l.phys + 0.5 * l.cons);

  // The taped losses agree with the value form.
  PinodeModel m = PinodeModel::create(tiny_config(), 9);
  WindowBatch w = random_batch(m.cfg, 3, 10);
  Tape tape(false);
  std::mt19937_64 rng(0);
  ForwardResult f = m.forward(tape, w, false, rng);
  LossVars lv = compute_losses(tape, f, w, 0.5, 0.5);
  Eigen::MatrixXd P(6, 9), T(6, 9), RP(6, 2), RT(6, 2);
  for (int t = 0; t < 2; ++t) {
    P.middleRows(3 * t, 3) = f.Y[t].value();
    T.middleRows(3 * t, 3) = w.Y[t];
    RP.middleRows(3 * t, 3) = f.rates[t].value();
    RT.middleRows(3 * t, 3) = w.rates[t];
  }
  Losses lval = compute_losses(P, T, RP, RT, 0.5, 0.5);
  CHECK(lv.data.value()(0, 0) == Approx(lval.data).epsilon(1e-12));
  CHECK(lv.phys.value()(0, 0) == Approx(lval.phys).epsilon(1e-12));
  CHECK(lv.cons.value()(0, 0) == Approx(lval.cons).epsilon(1e-12));
  CHECK(lv.total.value()(0, 0) == Approx(lval.total).epsilon(1e-12));
}

TEST_CASE("full loss gradient matches central differences", "[pinode][gradient]") {
  double worst = 0.0;
  for (unsigned long seed = 1; seed <= 100; ++seed) {
    PinodeModel m = PinodeModel::create(tiny_config(), seed);
    WindowBatch w = random_batch(m.cfg, 2, 1000 + seed, 0.5);
    auto loss = [&](Tape& tape, ParameterSet& set) {
      (void)set;
      std::mt19937_64 rng(0);
      ForwardResult f = m.forward(tape, w, false, rng);
      return compute_losses(tape, f, w, 0.5, 0.5).total;
    };
    worst = std::max(worst, fdcheck::max_rel_error(loss, m.params, 1e-5, 1e-8));
  }
  INFO("worst relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("zero epochs return the initial weights", "[pinode]") {
  PinodeModel m = PinodeModel::create(tiny_config(), 1);
  ParameterSet before = m.params;
  std::vector<NormalizedSeries> none;
  TrainConfig tc;
  tc.epochs = 0;
  TrainResult r = train(m, none, {}, none, {}, tc);
  CHECK(r.history.empty());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK((before[i].value - m.params[i].value).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("desk-scale training reduces validation error", "[pinode][training]") {
  auto topo = build_topology(2, 1);
  plant::PlantOracle oracle(topo, plant::PlantParams{});
  auto prof = plant::random_profile(topo, 2000, 7);
  plant::Dataset d = plant::generate_dataset(oracle, prof, 2000, 30, 1000);
  ModelConfig c;
  c.enc_hidden = c.dec_hidden = 12;
  c.T_enc = 8;
  c.T_dec = 5;
  PinodeModel m = PinodeModel::create(c, 3);
  m.scaler = fit_scaler({&d.hx[0], &d.hx[1]});
  std::vector<NormalizedSeries> ns{normalize_series(d.hx[0], m.scaler), normalize_series(d.hx[1], m.scaler)};
  TrainConfig tc;
  tc.epochs = 500;
  tc.stride = 25;
  tc.val_stride = 25;
  tc.batch_size = 64;
  auto tw = enumerate_windows(ns, 0, 1600, c, tc.stride);
  auto vw = enumerate_windows(ns, 1600, 2000, c, tc.val_stride);
  TrainResult r = train(m, ns, tw, ns, vw, tc);
  REQUIRE(r.history.size() == 500);
  CHECK_FALSE(r.diverged);
  double best_val_data = std::numeric_limits<double>::infinity(), running = std::numeric_limits<double>::infinity();
  for (const auto& e : r.history) {
    best_val_data = std::min(best_val_data, e.val.data);
    CHECK(std::min(running, e.val.total) <= running);
    running = std::min(running, e.val.total);
  }
  CHECK(r.best_val == running);
  const Losses after = evaluate(m, ns, vw, tc, 1.0);
  CHECK(after.total == Approx(r.best_val).epsilon(1e-9));
  CHECK(after.data < 0.1 * r.history.front().val.data);
}

TEST_CASE("checkpoint round trip", "[pinode]") {
  PinodeModel m = PinodeModel::create(tiny_config(), 8);
  m.scaler.lo = Eigen::VectorXd::LinSpaced(17, 0, 16);
  m.scaler.hi = m.scaler.lo.array() + 2.0;
  m.kind = "evaporator";
  auto doc = m.to_checkpoint();
  PinodeModel back = PinodeModel::from_checkpoint(nlohmann::json::parse(doc.dump()));
  CHECK(back.kind == "evaporator");
  CHECK(back.cfg.d_latent == 3);
  CHECK((back.scaler.hi - m.scaler.hi).cwiseAbs().maxCoeff() == 0.0);
  Tensor z = Tensor::Random(2, 3);
  CHECK((back.decode_values(z) - m.decode_values(z)).cwiseAbs().maxCoeff() == 0.0);
}
