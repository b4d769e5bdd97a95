#pragma once

// Parallel-merge vapor-compression topology: n_c compressor -> condenser
// branches merging into a liquid manifold, which feeds n_v valve ->
// evaporator branches merging into a suction manifold that supplies every
// compressor.
//
// Heat exchangers are indexed condensers first (0..n_c-1) then evaporators
// (n_c..n_c+n_v-1). The state vector is [M_0..M_{N-1}, E_0..E_{N-1}].

#include <string>
#include <vector>

#include "thermoloop/core/errors.hpp"

namespace thermoloop {

enum class HxKind { Condenser, Evaporator };

inline const char* kind_name(HxKind k) { return k == HxKind::Condenser ? "condenser" : "evaporator"; }

struct Edge {
  std::string from;
  std::string to;
};

struct Topology {
  int n_c = 0;
  int n_v = 0;
  std::vector<std::string> components;  // compressors, condensers, valves, evaporators
  std::vector<std::string> nodes;       // pressure unknowns: p_dis_k..., p_liq, p_suct
  std::vector<Edge> edges;

  int n_hx() const { return n_c + n_v; }
  int n_p() const { return n_c + 2; }
  int state_dim() const { return 2 * n_hx(); }
  HxKind kind(int hx) const { return hx < n_c ? HxKind::Condenser : HxKind::Evaporator; }
  int mass_index(int hx) const { return hx; }
  int energy_index(int hx) const { return n_hx() + hx; }
  int condenser(int k) const { return k; }
  int evaporator(int j) const { return n_c + j; }
  // Pressure-unknown layout.
  int p_dis_index(int k) const { return k; }
  int p_liq_index() const { return n_c; }
  int p_suct_index() const { return n_c + 1; }
  /// Square systems above ten junction pressures go to bounded least squares.
  bool uses_least_squares() const { return n_p() > 10; }
};

inline Topology build_topology(int n_c, int n_v) {
  if (n_c < 1 || n_v < 1)
    throw ContractViolation("build_topology: need n_c >= 1 and n_v >= 1, got " + std::to_string(n_c) + ", " +
                            std::to_string(n_v));
  Topology t;
  t.n_c = n_c;
  t.n_v = n_v;
  for (int k = 0; k < n_c; ++k) t.components.push_back("comp" + std::to_string(k + 1));
  for (int k = 0; k < n_c; ++k) t.components.push_back("cond" + std::to_string(k + 1));
  for (int j = 0; j < n_v; ++j) t.components.push_back("valve" + std::to_string(j + 1));
  for (int j = 0; j < n_v; ++j) t.components.push_back("evap" + std::to_string(j + 1));
  for (int k = 0; k < n_c; ++k) t.nodes.push_back("p_dis" + std::to_string(k + 1));
  t.nodes.push_back("p_liq");
  t.nodes.push_back("p_suct");
  for (int k = 0; k < n_c; ++k) {
    const std::string c = std::to_string(k + 1);
    t.edges.push_back({"suction_manifold", "comp" + c});
    t.edges.push_back({"comp" + c, "cond" + c});
    t.edges.push_back({"cond" + c, "liquid_manifold"});
  }
  for (int j = 0; j < n_v; ++j) {
    const std::string v = std::to_string(j + 1);
    t.edges.push_back({"liquid_manifold", "valve" + v});
    t.edges.push_back({"valve" + v, "evap" + v});
    t.edges.push_back({"evap" + v, "suction_manifold"});
  }
  return t;
}

}  // namespace thermoloop
