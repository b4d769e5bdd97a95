#include <catch_amalgamated.hpp>

#include <random>

#include "thermoloop/nonlinear/solvers.hpp"

using namespace thermoloop;
using namespace thermoloop::nonlinear;
using Catch::Approx;

namespace {
Vec v1(double a) { return Vec::Constant(1, a); }
}  // namespace

TEST_CASE("powell hybrid scalar and 2x2 examples") {
  RootProblem lin{[](const Vec& x) { return Vec(x.array() - 3.0); }, v1(0.0)};
  lin.tol = 1e-12;
  auto r1 = powell_hybrid(lin);
  CHECK(r1.converged);
  CHECK(r1.x(0) == Approx(3.0).margin(1e-12));

  RootProblem quad{[](const Vec& x) { return Vec(x.array().square() - 4.0); }, v1(1.0)};
  quad.tol = 1e-12;
  auto r2 = powell_hybrid(quad);
  CHECK(r2.converged);
  CHECK(std::abs(r2.x(0) - 2.0) < 1e-10);

  RootProblem sys{[](const Vec& x) {
                    Vec r(2);
                    r << x(0) + x(1) - 3.0, x(0) - x(1) - 1.0;
                    return r;
                  },
                  Vec::Zero(2)};
  sys.tol = 1e-12;
  auto r3 = powell_hybrid(sys);
  CHECK(r3.converged);
  CHECK(r3.x(0) == Approx(2.0).margin(1e-10));
  CHECK(r3.x(1) == Approx(1.0).margin(1e-10));
  CHECK(r3.residual_norm <= sys.tol);
}

TEST_CASE("powell hybrid on 100 random well-conditioned 4x4 linear systems") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> nd;
  int worst_evals = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Mat A = Mat::Identity(4, 4) * 3.0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) A(i, j) += 0.5 * nd(rng);
    Vec b(4);
    for (int i = 0; i < 4; ++i) b(i) = nd(rng);
    RootProblem pb{[&](const Vec& x) { return Vec(A * x - b); }, Vec::Zero(4)};
    pb.tol = 1e-11;
    auto rep = powell_hybrid(pb);
    CHECK(rep.converged);
    CHECK((A * rep.x - b).cwiseAbs().maxCoeff() < 1e-10);
    worst_evals = std::max(worst_evals, rep.evaluations);
  }
  CHECK(worst_evals < 50);
}

TEST_CASE("powell hybrid reports failure on a rootless problem") {
  RootProblem pb{[](const Vec& x) { return Vec(x.array().square() + 1.0); }, v1(0.5)};
  pb.max_evals = 60;
  auto rep = powell_hybrid(pb);
  CHECK_FALSE(rep.converged);
  CHECK(rep.residual_norm >= 1.0);
  CHECK(rep.evaluations <= 60 + 2);
}

TEST_CASE("powell hybrid accepts a warm-start Jacobian") {
  Mat J = Mat::Identity(2, 2) * 2.0;
  RootProblem pb{[](const Vec& x) { return Vec(2.0 * x.array() - 1.0); }, Vec::Zero(2)};
  pb.jacobian_hint = &J;
  pb.tol = 1e-12;
  auto rep = powell_hybrid(pb);
  CHECK(rep.converged);
  CHECK(rep.evaluations <= 3);
}

TEST_CASE("bounded least squares keeps every iterate inside the pressure box") {
  Vec lo = Vec::Constant(2, 2e5), hi = Vec::Constant(2, 6e6);
  // Unconstrained root sits outside the box at (1e5, 7e6).
  RootProblem pb{[](const Vec& x) {
                   Vec r(2);
                   r << (x(0) - 1e5) / 1e5, (x(1) - 7e6) / 1e5;
                   return r;
                 },
                 Vec::Constant(2, 1e6), lo, hi};
  pb.typical_scale = 1e5;
  bool feasible = true;
  auto rep = bounded_least_squares(pb, [&](const Vec& x) {
    feasible = feasible && (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
  });
  CHECK(feasible);
  CHECK_FALSE(rep.converged);
  CHECK(rep.stationary);
  CHECK(rep.x(0) == Approx(2e5));
  CHECK(rep.x(1) == Approx(6e6));
}

TEST_CASE("bounded least squares zero residual at guess and collinear line fit") {
  RootProblem zero{[](const Vec& x) { return Vec(x.array() - 1.0); }, Vec::Ones(3)};
  auto r0 = bounded_least_squares(zero);
  CHECK(r0.iterations == 0);
  CHECK(r0.x == Vec::Ones(3));

  // y = 2 + 3 t at t = 0, 1, 2.
  RootProblem fit{[](const Vec& c) {
                    Vec r(3);
                    for (int i = 0; i < 3; ++i) r(i) = c(0) + c(1) * i - (2.0 + 3.0 * i);
                    return r;
                  },
                  Vec::Zero(2)};
  fit.tol = 1e-12;
  auto rep = bounded_least_squares(fit);
  CHECK(std::abs(rep.x(0) - 2.0) < 1e-10);
  CHECK(std::abs(rep.x(1) - 3.0) < 1e-10);
}

TEST_CASE("wrms norm") {
  CHECK(wrms_norm(Vec::Zero(3), Vec::Ones(3), 1e-6, 1e-6) == 0.0);
  CHECK(wrms_norm(v1(1e-6), v1(1.0), 1e-6, 1e-6) == Approx(0.5));
  Vec v(3), y(3);
  v << 1e-3, -2e-4, 5e-5;
  y << 1.0, 10.0, -3.0;
  CHECK(wrms_norm(7.0 * v, y, 1e-4, 1e-3) == Approx(7.0 * wrms_norm(v, y, 1e-4, 1e-3)).epsilon(1e-14));
  CHECK_THROWS_AS(wrms_norm(v, Vec::Ones(2), 1e-6, 1e-6), ContractViolation);
  CHECK_THROWS_AS(wrms_norm(v, y, 0.0, 1e-6), ContractViolation);
}
