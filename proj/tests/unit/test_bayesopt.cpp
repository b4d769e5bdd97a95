#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "thermoloop/bayesopt/solver_space.hpp"

using namespace thermoloop;
using namespace thermoloop::bayesopt;
using Catch::Approx;

namespace {

GpKernel iso(int d, double l, double sf2, double sn2, double mean) {
  GpKernel k;
  k.length = Vec::Constant(d, l);
  k.signal_var = sf2;
  k.noise_var = sn2;
  k.mean = mean;
  k.jitter = 0.0;
  return k;
}

// Two log-axis parabolas, minimum 0 at eps_dt = 1e-2, eps_soln = 1e-5.
double parabolas(const std::vector<double>& th) {
  const double a = std::log10(th[0]) + 2.0, b = std::log10(th[1]) + 5.0;
  return a * a + b * b;
}

}  // namespace

TEST_CASE("expected improvement closed form and sign", "[bayesopt]") {
  CHECK(expected_improvement(0.3, 1.0, 0.3) == Approx(0.398942280401).margin(1e-6));
  CHECK(expected_improvement(1.0, 0.0, 0.5) == 0.0);
  CHECK(expected_improvement(0.5, 0.0, 0.5) == 0.0);
  CHECK(expected_improvement(0.2, 0.0, 0.5) == Approx(0.3));
  double prev = 0.0;
  for (int i = 1; i <= 50; ++i) {
    const double e = expected_improvement(1.0, 0.1 * i, 1.0);
    CHECK(e >= prev);
    prev = e;
  }
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5.0, 5.0), s(0.0, 3.0);
  double lo = 1.0;
  for (int i = 0; i < 10000; ++i) lo = std::min(lo, expected_improvement(u(rng), s(rng), u(rng)));
  CHECK(lo >= 0.0);
  CHECK_THROWS_AS(expected_improvement(0.0, -1.0, 0.0), ContractViolation);
}

TEST_CASE("GP posterior: interpolation, decay, two-point closed form", "[bayesopt]") {
  Mat X(1, 2);
  X << 0.3, 0.6;
  Vec y(1);
  y << 2.5;
  GpModel one = gp_fit(X, y, iso(2, 0.2, 1.0, 0.0, 0.0));
  CHECK(one.predict(X.row(0).transpose()).mu == Approx(2.5).margin(1e-9));
  Vec far(2);
  far << 1e3, -1e3;
  const Posterior pf = one.predict(far);
  CHECK(pf.mu == Approx(0.0).margin(1e-12));
  CHECK(pf.sigma == Approx(1.0).margin(1e-12));

  // Hand 2x2 algebra at a third point.
  Mat X2(2, 1);
  X2 << 0.1, 0.4;
  Vec y2(2);
  y2 << 1.0, -0.5;
  const double l = 0.3, sf2 = 1.7, sn2 = 0.01, m = 0.2;
  GpModel gp = gp_fit(X2, y2, iso(1, l, sf2, sn2, m));
  auto k = [&](double a, double b) { return sf2 * std::exp(-0.5 * (a - b) * (a - b) / (l * l)); };
  const double a = k(0.1, 0.1) + sn2, b = k(0.1, 0.4), d = k(0.4, 0.4) + sn2, det = a * d - b * b;
  const double x = 0.25, k1 = k(x, 0.1), k2 = k(x, 0.4);
  const double r1 = y2(0) - m, r2 = y2(1) - m;
  const double mu = m + (k1 * (d * r1 - b * r2) + k2 * (-b * r1 + a * r2)) / det;
  const double var = sf2 - (k1 * (d * k1 - b * k2) + k2 * (-b * k1 + a * k2)) / det;
  Vec xv(1);
  xv << x;
  const Posterior p = gp.predict(xv);
  CHECK(std::abs(p.mu - mu) < 1e-10);
  CHECK(std::abs(p.sigma - std::sqrt(var)) < 1e-10);

  Vec mus, sig;
  gp.predict(Mat(xv.transpose()), mus, sig);
  CHECK(std::abs(mus(0) - mu) < 1e-12);
  CHECK(std::abs(sig(0) - p.sigma) < 1e-12);
}

TEST_CASE("GP variance at observations bounded by noise plus jitter", "[bayesopt]") {
  const Mat X = shifted_sobol(30, 3, 5);
  Vec y(30);
  for (int i = 0; i < 30; ++i) y(i) = std::sin(5 * X(i, 0)) + X(i, 1) * X(i, 2);
  for (double sn2 : {1e-6, 1e-3, 0.1}) {
    GpKernel kk = iso(3, 0.3, 1.0, sn2, 0.0);
    kk.jitter = 1e-10;
    const GpModel gp = gp_fit(X, y, kk);
    for (int i = 0; i < 30; ++i) {
      const Posterior p = gp.predict(X.row(i).transpose());
      CHECK(p.sigma * p.sigma <= gp.kernel.noise_var + gp.kernel.jitter + 1e-12);
    }
  }
}

TEST_CASE("marginal likelihood gradient matches central differences", "[bayesopt]") {
  const Mat X = shifted_sobol(12, 2, 3);
  Vec y(12);
  for (int i = 0; i < 12; ++i) y(i) = std::cos(4 * X(i, 0)) - X(i, 1);
  GpKernel k;
  k.length = Vec(2);
  k.length << 0.3, 0.7;
  k.signal_var = 0.8;
  k.noise_var = 0.02;
  k.mean = y.mean();
  k.jitter = 0.0;
  Vec g;
  log_marginal_likelihood(X, y, k, &g);
  const double h = 1e-5;
  for (int q = 0; q < 4; ++q) {
    auto shifted = [&](double s) {
      GpKernel c = k;
      if (q < 2) c.length(q) *= std::exp(s);
      if (q == 2) c.signal_var *= std::exp(s);
      if (q == 3) c.noise_var *= std::exp(s);
      return log_marginal_likelihood(X, y, c);
    };
    const double fd = (shifted(h) - shifted(-h)) / (2 * h);
    CHECK(g(q) == Approx(fd).epsilon(1e-5).margin(1e-7));
  }
  // Maximum likelihood never does worse than its first start.
  const GpKernel fit = fit_hyperparameters(X, y, 1);
  GpKernel start = k;
  start.length.setConstant(0.3);
  start.signal_var = (y.array() - y.mean()).square().mean();
  start.noise_var = 1e-4 * start.signal_var;
  start.jitter = 1e-10;
  CHECK(log_marginal_likelihood(X, y, fit) >= log_marginal_likelihood(X, y, start) - 1e-9);
}

TEST_CASE("parameter space mapping", "[bayesopt]") {
  const ParamSpace s = space_for(system::SolverMode::Algebraic);
  CHECK(s.size() == 2);
  CHECK(space_for(system::SolverMode::Ida).size() == 5);
  CHECK(space_for(system::SolverMode::Dassl).size() == 6);
  Vec half = Vec::Constant(2, 0.5);
  const auto th = s.from_unit(half);
  CHECK(th[0] == Approx(std::sqrt(1e-4 * 0.5)));
  CHECK(th[1] == Approx(std::pow(10.0, -5.5)));
  CHECK((s.to_unit(th) - half).norm() < 1e-12);
  ParamSpace bad;
  bad.dims = {{"x", 0.0, 1.0, true}};
  CHECK_THROWS_AS(bad.validate(), ContractViolation);

  system::SystemConfig cfg;
  const ParamSpace ds = space_for(system::SolverMode::Dassl);
  apply_theta(cfg, ds, {0.01, 1e-7, 20.0, 0.001, 2.0, 1234.4});
  CHECK(cfg.eps_dt == 0.01);
  CHECK(cfg.eps_soln == 1e-7);
  CHECK(cfg.dae.h_max == 20.0);
  CHECK(cfg.dae.h_min == 0.001);
  CHECK(cfg.dassl_min_output == 2.0);
  CHECK(cfg.dae.dassl_max_steps == 1234);
}

TEST_CASE("propose: sigma-driven, deduplicated, deterministic", "[bayesopt]") {
  Mat X(1, 2);
  X << 0.5, 0.5;
  Vec y(1);
  y << 1.0;
  const GpModel gp = gp_fit(X, y, iso(2, 0.2, 1.0, 0.0, 1.0));
  const Vec x = propose(gp, 1.0, 7);
  CHECK((x - X.row(0).transpose()).norm() > 0.5);
  CHECK((propose(gp, 1.0, 7) - x).norm() == 0.0);

  // Dense observations: the proposal never lands on one.
  const Mat Xd = shifted_sobol(64, 2, 2);
  Vec yd(64);
  for (int i = 0; i < 64; ++i) yd(i) = (Xd.row(i).array() - 0.3).square().sum();
  const GpModel g2 = gp_fit(Xd, yd, iso(2, 0.1, 1.0, 1e-8, yd.mean()));
  const Vec x2 = propose(g2, yd.minCoeff(), 3);
  for (int i = 0; i < 64; ++i) CHECK((Xd.row(i).transpose() - x2).norm() >= 1e-6);
}

TEST_CASE("tune: degenerate budget, log length, failures, synthetic optimum", "[bayesopt]") {
  const ParamSpace s = space_for(system::SolverMode::Algebraic);
  Objective f = [](const std::vector<double>& th) { return EvalResult{parabolas(th), 0.0, false, ""}; };

  TuneConfig c;
  c.budget = 10;
  TuneResult r0 = tune(s, f, c);
  REQUIRE(r0.log.size() == 10);
  double best0 = r0.log[0].objective;
  for (const auto& e : r0.log) best0 = std::min(best0, e.objective);
  CHECK(r0.best_entry().objective == best0);

  // Failures keep their log row and score twice the worst initial sample.
  int calls = 0;
  Objective flaky = [&](const std::vector<double>& th) {
    if (++calls % 4 == 0) throw NumericalFailure("diverged");
    return EvalResult{parabolas(th), 1.0 + th[0], false, ""};
  };
  c.budget = 20;
  TuneResult rf = tune(s, flaky, c);
  REQUIRE(rf.log.size() == 20);
  double worst_init = 0.0;
  for (int i = 0; i < 10; ++i)
    if (!rf.log[i].failed) worst_init = std::max(worst_init, rf.log[i].objective);
  int failed = 0;
  for (const auto& e : rf.log)
    if (e.failed) {
      ++failed;
      CHECK(e.objective == Approx(2.0 * worst_init));
    }
  CHECK(failed == 5);
  CHECK_FALSE(rf.best_entry().failed);

  // Known optimum: range of the objective over the box is 13.
  const double range = 13.0;
  int hits = 0;
  for (unsigned long seed = 0; seed < 10; ++seed) {
    TuneConfig cs;
    cs.seed = seed;
    const TuneResult r = tune(s, f, cs);
    REQUIRE(r.log.size() == 100);
    double init_best = 1e300;
    for (int i = 0; i < cs.n0; ++i) init_best = std::min(init_best, r.log[i].objective);
    CHECK(r.best_entry().objective <= init_best);
    if (parabolas(r.best_entry().theta) <= 0.05 * range) ++hits;
  }
  CHECK(hits >= 8);
}

TEST_CASE("Pareto front", "[bayesopt]") {
  CHECK(pareto_front(std::vector<std::pair<double, double>>{{3.0, 4.0}}) == std::vector<std::size_t>{0});
  const std::vector<std::pair<double, double>> p = {{1, 10}, {2, 5}, {3, 1}, {2, 20}};
  CHECK(pareto_front(p) == std::vector<std::size_t>{0, 1, 2});

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(u(rng), u(rng));
  const auto front = pareto_front(pts);
  std::vector<std::pair<double, double>> sub;
  for (std::size_t i : front) sub.push_back(pts[i]);
  CHECK(pareto_front(sub).size() == sub.size());
  for (const auto& a : sub)
    for (const auto& b : pts) CHECK_FALSE((b.first <= a.first && b.second <= a.second && (b.first < a.first || b.second < a.second)));
  CHECK_THROWS_AS(pareto_front(std::vector<std::pair<double, double>>{}), ContractViolation);
}

TEST_CASE("evaluation log, Pareto and contour exports", "[bayesopt]") {
  const ParamSpace s = space_for(system::SolverMode::Ida);
  Objective f = [](const std::vector<double>& th) {
    return EvalResult{1.0 + std::abs(std::log10(th[0]) + 2.0), 10.0 / th[2] + th[4], false, ""};
  };
  TuneConfig c;
  c.budget = 14;
  const TuneResult r = tune(s, f, c);
  const auto tmp = [](const char* n) { return (std::filesystem::temp_directory_path() / n).string(); };
  write_evaluation_log(r, tmp("test_bo_log.csv"));
  write_pareto(r, tmp("test_bo_pareto.csv"));
  const ContourGrid g = contour_grid(r, 5);
  write_contour(r, g, tmp("test_bo_contour.csv"));
  auto lines = [](const std::string& path) {
    std::ifstream in(path);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  };
  const auto log = lines(tmp("test_bo_log.csv"));
  REQUIRE(log.size() == 16);
  CHECK(log[0] == kEvalLogSchema);
  CHECK(log[1] == "iteration,eps_dt,eps_soln,h_max,h_min,dt_out_ida,mape_all,t_simulation,objective,failed");
  const auto par = lines(tmp("test_bo_pareto.csv"));
  CHECK(par.size() == 2 + pareto_front(r.log).size());
  const auto con = lines(tmp("test_bo_contour.csv"));
  CHECK(con.size() == 2 + 25);
  CHECK(con[1] == "eps_dt,eps_soln,mape_all,t_simulation");
  CHECK(g.x.front() == Approx(1e-4));
  CHECK(g.x.back() == Approx(0.5));
  CHECK((g.mape.array() > 0.0).all());
}
