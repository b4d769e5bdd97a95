#pragma once

// Report emission from stored artifacts only, so regeneration is
// byte-identical for the same inputs.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "thermoloop/bayesopt/solver_space.hpp"
#include "thermoloop/cli/pipeline.hpp"

namespace thermoloop::cli {

inline constexpr const char* kTableSchema = "# schema: thermoloop-table v1";
inline constexpr const char* kDtHistorySchema = "# schema: thermoloop-dt-history v1";
inline constexpr const char* kScaleSchema = "# schema: thermoloop-scale-study v1";

inline const std::vector<system::SolverMode>& all_modes() {
  static const std::vector<system::SolverMode> m{system::SolverMode::Algebraic, system::SolverMode::Ida,
                                                 system::SolverMode::Dassl};
  return m;
}

/// Column titles used in the solver comparison tables.
inline const char* solver_title(system::SolverMode m) {
  switch (m) {
    case system::SolverMode::Algebraic:
      return "Algebraic";
    case system::SolverMode::Ida:
      return "DAE-IDA";
    default:
      return "DAE-DASSL";
  }
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw ContractViolation("CSV column '" + name + "' missing");
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Reads a schema-tagged CSV; the first line must equal `schema`.
inline CsvTable read_csv(const fs::path& path, const std::string& schema) {
  std::ifstream in(path);
  if (!in) throw ContractViolation("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != schema) throw ContractViolation(path.string() + ": expected '" + schema + "', found '" + line + "'");
  CsvTable t;
  if (!std::getline(in, line)) throw ContractViolation(path.string() + ": missing header");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split_csv_line(line));
    if (t.rows.back().size() != t.header.size()) throw ContractViolation(path.string() + ": ragged row");
  }
  return t;
}

inline double to_double(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw ContractViolation("not a number: '" + s + "'");
  return v;
}

inline bayesopt::TuneResult read_evaluation_log(const fs::path& path, system::SolverMode mode) {
  const CsvTable t = read_csv(path, bayesopt::kEvalLogSchema);
  bayesopt::TuneResult r;
  r.space = bayesopt::space_for(mode);
  std::vector<int> cols;
  for (const auto& d : r.space.dims) cols.push_back(t.column(d.name));
  const int it = t.column("iteration"), cm = t.column("mape_all"), ct = t.column("t_simulation"),
            co = t.column("objective"), cf = t.column("failed");
  require(!t.rows.empty(), path.string() + ": empty evaluation log");
  for (const auto& row : t.rows) {
    bayesopt::LogEntry e;
    e.iteration = std::stoi(row[it]);
    for (int c : cols) e.theta.push_back(to_double(row[c]));
    e.mape = to_double(row[cm]);
    e.time = to_double(row[ct]);
    e.objective = to_double(row[co]);
    e.failed = row[cf] == "1";
    r.log.push_back(e);
  }
  for (std::size_t i = 1; i < r.log.size(); ++i)
    if (r.log[i].objective < r.log[r.best].objective) r.best = i;
  return r;
}

/// Best-overall (minimum objective) and fastest successful evaluation.
struct SolverSummary {
  bool present = false;
  bayesopt::LogEntry best_overall, best_time;
};

inline SolverSummary summarize(const bayesopt::TuneResult& r) {
  SolverSummary s;
  s.present = true;
  s.best_overall = r.best_entry();
  bool any = false;
  for (const auto& e : r.log)
    if (!e.failed && (!any || e.time < s.best_time.time)) {
      s.best_time = e;
      any = true;
    }
  if (!any) s.best_time = s.best_overall;
  return s;
}

inline std::string fixed(double v, int digits) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

/// Two-row tables (MAPE_all [%], t_simulation [s]) with one column per solver.
inline void write_solver_table(const fs::path& csv, const std::map<system::SolverMode, SolverSummary>& s, bool by_time) {
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << kTableSchema << "\nmetric";
  for (auto m : all_modes()) out << ',' << solver_title(m);
  out << "\nMAPE_all [%]";
  for (auto m : all_modes()) {
    const auto it = s.find(m);
    out << ',' << (it != s.end() && it->second.present ? fixed((by_time ? it->second.best_time : it->second.best_overall).mape, 4) : "n/a");
  }
  out << "\nt_simulation [s]";
  for (auto m : all_modes()) {
    const auto it = s.find(m);
    out << ',' << (it != s.end() && it->second.present ? fixed((by_time ? it->second.best_time : it->second.best_overall).time, 4) : "n/a");
  }
  out << '\n';
}

inline std::string markdown_table(const std::string& title, const std::map<system::SolverMode, SolverSummary>& s,
                                  bool by_time) {
  std::ostringstream o;
  o << "### " << title << "\n\n|  |";
  for (auto m : all_modes()) o << ' ' << solver_title(m) << " |";
  o << "\n|---|";
  for (std::size_t i = 0; i < all_modes().size(); ++i) o << "---|";
  auto cell = [&](system::SolverMode m, bool mape_row) {
    const auto it = s.find(m);
    if (it == s.end() || !it->second.present) return std::string("n/a");
    const auto& e = by_time ? it->second.best_time : it->second.best_overall;
    return mape_row ? fixed(e.mape, 4) + "%" : fixed(e.time, 4);
  };
  o << "\n| MAPE_all [%] |";
  for (auto m : all_modes()) o << ' ' << cell(m, true) << " |";
  o << "\n| t_simulation [s] |";
  for (auto m : all_modes()) o << ' ' << cell(m, false) << " |";
  o << "\n\n";
  return o.str();
}

inline void write_scale_csv(const std::vector<ScaleRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kScaleSchema << "\n";
  out << "n_c,n_v,n_p,solver,status,runtime_s,steps_reached,pressure_solves,least_squares_solves,size_switch_solves,rhs_evals,failure\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    std::string why = r.failure;
    for (char& ch : why)
      if (ch == ',' || ch == '\n') ch = ';';
    out << r.n_c << ',' << r.n_v << ',' << r.n_p << ',' << system::solver_name(r.mode) << ','
        << (r.failed ? "failed" : "ok") << ',' << r.seconds << ',' << r.steps << ',' << r.pressure_solves << ','
        << r.least_squares_solves << ','
        << r.size_switch_solves << ',' << r.rhs_evals << ',' << why << '\n';
  }
}

/// (solver, t, dt) rows from stored trajectories.
inline void write_dt_history(const std::map<system::SolverMode, fs::path>& trajectories, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kDtHistorySchema << "\nsolver,t,dt\n";
  for (auto m : all_modes()) {
    const auto it = trajectories.find(m);
    if (it == trajectories.end()) continue;
    const CsvTable t = read_csv(it->second, system::kTrajectorySchema);
    const int ct = t.column("t"), cd = t.column("dt");
    for (const auto& row : t.rows) out << system::solver_name(m) << ',' << row[ct] << ',' << row[cd] << '\n';
  }
}

struct ReportInputs {
  fs::path root;  // run directory holding tune/, simulate/ and scale_study/
  int contour_points = 25;
  unsigned long seed = 0;
};

/// Everything the report needs, regenerated from stored artifacts. Returns
/// the list of files written (relative to out).
inline std::vector<std::string> generate_report(const ReportInputs& in, const fs::path& out) {
  fs::create_directories(out);
  std::vector<std::string> written;
  std::map<system::SolverMode, SolverSummary> summary;
  std::map<system::SolverMode, fs::path> trajectories;
  for (auto m : all_modes()) {
    const std::string name = system::solver_name(m);
    const fs::path log = in.root / "tune" / name / "evaluations.csv";
    if (fs::exists(log)) {
      const bayesopt::TuneResult r = read_evaluation_log(log, m);
      summary[m] = summarize(r);
      bayesopt::write_pareto(r, (out / ("pareto_" + name + ".csv")).string());
      written.push_back("pareto_" + name + ".csv");
      std::size_t ok = 0;
      for (const auto& e : r.log) ok += e.failed ? 0 : 1;
      if (ok >= 2) {
        bayesopt::write_contour(r, bayesopt::contour_grid(r, in.contour_points, in.seed),
                                (out / ("contour_" + name + ".csv")).string());
        written.push_back("contour_" + name + ".csv");
      }
    }
    const fs::path traj = in.root / "simulate" / name / "trajectory.csv";
    if (fs::exists(traj)) trajectories[m] = traj;
  }
  write_solver_table(out / "table_best_overall.csv", summary, false);
  write_solver_table(out / "table_best_time.csv", summary, true);
  written.push_back("table_best_overall.csv");
  written.push_back("table_best_time.csv");
  write_dt_history(trajectories, out / "dt_history.csv");
  written.push_back("dt_history.csv");
  const fs::path scale = in.root / "scale_study" / "scale_study.csv";
  if (fs::exists(scale)) {
    read_csv(scale, kScaleSchema);  // schema check
    fs::copy_file(scale, out / "scale_study.csv", fs::copy_options::overwrite_existing);
    written.push_back("scale_study.csv");
  }

  std::ofstream md(out / "report.md");
  if (!md) throw std::runtime_error("cannot write " + (out / "report.md").string());
  md << "# Solver comparison\n\n";
  md << "MAPE_all covers all nine outputs of every exchanger (p_1, p_N, h_1, h_N, T_a_out, Q_a, M_r, E_hx, Q_lat); "
        "channels identically zero in the reference are skipped. Each entry is |pred - ref| / max(|ref|, floor) "
        "with floor = 1e-3 of the channel's half range (1e-3 in normalized units).\n\n";
  md << "Tuning objective: 0.5 * MAPE_all + 0.5 * t_simulation, each term min-max normalized over the initial "
        "samples; failed runs score twice the worst initial sample.\n\n";
  md << markdown_table("Best overall objective (weighted MAPE and simulation time)", summary, false);
  md << markdown_table("Best simulation time (minimum time with its MAPE)", summary, true);
  written.push_back("report.md");
  return written;
}

}  // namespace thermoloop::cli
