#include <catch_amalgamated.hpp>

#include <cmath>

#include "thermoloop/surrogate/static_models.hpp"

using namespace thermoloop;
using namespace thermoloop::surrogate;

namespace {

const StaticModel& trained(StaticKind kind) {
  static StaticModel comp = [] {
    StaticModel m = StaticModel::create(StaticKind::Compressor, 32, 1);
    m.fit(sample_component(plant::PlantParams{}, StaticKind::Compressor, 3000, 11), StaticTrainConfig{});
    return m;
  }();
  static StaticModel valve = [] {
    StaticModel m = StaticModel::create(StaticKind::Valve, 32, 2);
    m.fit(sample_component(plant::PlantParams{}, StaticKind::Valve, 3000, 12), StaticTrainConfig{});
    return m;
  }();
  return kind == StaticKind::Compressor ? comp : valve;
}

}  // namespace

TEST_CASE("compressor surrogate: zero speed, monotone speed, held-out accuracy", "[static]") {
  const StaticModel& m = trained(StaticKind::Compressor);
  plant::PlantParams par;
  plant::ComponentLaws law{&par};
  CHECK(m.compressor_eval(4e5, 2.2e6, 3.6e5, 0.0).m_dot < 1e-4);
  CHECK(m.compressor_eval(4e5, 2.2e6, 3.6e5, 0.0).m_dot == 0.0);
  double prev = -1.0;
  for (int i = 0; i < 10; ++i) {
    const double speed = 10.0 + 5.0 * i;
    const double md = m.compressor_eval(4e5, 2.2e6, 3.6e5, speed).m_dot;
    CHECK(md >= prev);
    prev = md;
  }
  // Held-out grid inside the operating band.
  double ape = 0.0;
  int n = 0;
  for (double ps : {2.5e5, 4e5, 6e5})
    for (double pd : {1.8e6, 2.3e6, 3.0e6})
      for (double h : {3.3e5, 3.7e5, 4.0e5})
        for (double w : {25.0, 40.0, 55.0}) {
          const FlowResult r = m.compressor_eval(ps, pd, h, w);
          const double m_ref = law.compressor_flow(w, ps, h);
          const double h_ref = law.compressor_enthalpy(ps, pd, h);
          ape += std::abs(r.m_dot - m_ref) / m_ref + std::abs(r.h_out - h_ref) / h_ref;
          n += 2;
          CHECK(r.h_out >= h);
        }
  CHECK(100.0 * ape / n < 5.0);
}

TEST_CASE("valve surrogate: exact zeros, isenthalpic, mid-range accuracy", "[static]") {
  const StaticModel& m = trained(StaticKind::Valve);
  plant::PlantParams par;
  plant::ComponentLaws law{&par};
  CHECK(m.valve_eval(2e6, 5e5, 2.2e5, 0.0).m_dot == 0.0);
  CHECK(m.valve_eval(2e6, 2e6, 2.2e5, 0.6).m_dot == 0.0);
  CHECK(m.valve_eval(1e6, 2e6, 2.2e5, 0.6).m_dot == 0.0);
  for (double h : {1.7e5, 2.2e5, 3.1e5}) CHECK(m.valve_eval(2e6, 5e5, h, 0.5).h_out == h);
  const double ref = law.valve_flow(0.5, 2.2e6, 6e5, 2.3e5);
  const double got = m.valve_eval(2.2e6, 6e5, 2.3e5, 0.5).m_dot;
  CHECK(std::abs(got - ref) / ref < 0.05);
  CHECK_THROWS_AS(m.valve_eval(2e6, 5e5, 2e5, 1.5), ContractViolation);
}

TEST_CASE("static checkpoints round trip", "[static]") {
  const StaticModel& m = trained(StaticKind::Compressor);
  StaticModel back = StaticModel::from_checkpoint(nlohmann::json::parse(m.to_checkpoint().dump()));
  CHECK(back.kind == StaticKind::Compressor);
  const FlowResult a = m.compressor_eval(3e5, 2e6, 3.5e5, 33.0), b = back.compressor_eval(3e5, 2e6, 3.5e5, 33.0);
  CHECK(a.m_dot == b.m_dot);
  CHECK(a.h_out == b.h_out);
  CHECK(m.compressor_eval(3e4, 2e6, 3.5e5, 33.0).clamped);
}
