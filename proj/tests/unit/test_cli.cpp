#include <catch_amalgamated.hpp>

#include <map>

#include "thermoloop/cli/report.hpp"

using namespace thermoloop;
using namespace thermoloop::cli;

namespace {

std::function<const char*(const char*)> env_from(const std::map<std::string, std::string>& vars) {
  return [vars](const char* n) -> const char* {
    auto it = vars.find(n);
    return it == vars.end() ? nullptr : it->second.c_str();
  };
}

const auto no_env = env_from({});

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("thermoloop_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bayesopt::LogEntry entry(int it, double mape, double time, double obj, bool failed) {
  bayesopt::LogEntry e;
  e.iteration = it;
  e.theta = {0.01 * (it + 1), 1e-6 / (it + 1)};
  e.mape = mape;
  e.time = time;
  e.objective = obj;
  e.failed = failed;
  return e;
}

}  // namespace

TEST_CASE("config defaults survive a JSON round trip", "[cli]") {
  const json j = to_json(PipelineConfig{});
  CHECK(to_json(config_from_json(j)) == j);
  const PipelineConfig c = load_config(json::object(), no_env);
  CHECK(c.train.epochs == 200);
  CHECK(c.corrector.epochs == 2000);
  CHECK(c.corrector.segment_start == 950);
  CHECK(c.corrector.segment_length == 850);
  CHECK(c.tune.budget == 100);
  CHECK(c.scale_nc == std::vector<int>{2, 4, 8, 16});
}

TEST_CASE("config file values and environment overrides", "[cli]") {
  const json user = {{"seed", 3}, {"train", {{"epochs", 5}}}, {"system", {{"solver", "dassl"}}}};
  PipelineConfig c = load_config(user, no_env);
  CHECK(c.seed == 3);
  CHECK(c.train.epochs == 5);
  CHECK(c.system.mode == system::SolverMode::Dassl);

  c = load_config(user, env_from({{"THERMOLOOP_TRAIN_EPOCHS", "9"},
                                  {"THERMOLOOP_SEED", "11"},
                                  {"THERMOLOOP_SYSTEM_EPS_DT", "0.002"},
                                  {"THERMOLOOP_SYSTEM_SOLVER", "ida"}}));
  CHECK(c.train.epochs == 9);
  CHECK(c.seed == 11);
  CHECK(c.system.eps_dt == 0.002);
  CHECK(c.system.mode == system::SolverMode::Ida);
}

TEST_CASE("config errors are contract violations", "[cli]") {
  CHECK_THROWS_AS(load_config({{"sed", 3}}, no_env), ContractViolation);
  CHECK_THROWS_AS(load_config({{"train", {{"epoch", 3}}}}, no_env), ContractViolation);
  CHECK_THROWS_AS(load_config({{"train", 3}}, no_env), ContractViolation);
  CHECK_THROWS_AS(load_config({{"train", {{"epochs", "many"}}}}, no_env), ContractViolation);
  CHECK_THROWS_AS(load_config({{"system", {{"solver", "euler"}}}}, no_env), ContractViolation);
  CHECK_THROWS_AS(load_config({{"data", {{"holdout_length", 600}}}}, no_env), ContractViolation);
  CHECK_THROWS_AS(load_config(json::object(), env_from({{"THERMOLOOP_TRAIN_EPOCHS", "1.5"}})), ContractViolation);
  CHECK_THROWS_AS(load_config(json::object(), env_from({{"THERMOLOOP_SYSTEM_EPS_DT", "x"}})), ContractViolation);
}

TEST_CASE("evaluation log round trips through the report reader", "[cli]") {
  const fs::path dir = scratch("log");
  bayesopt::TuneResult r;
  r.space = bayesopt::space_for(system::SolverMode::Algebraic);
  r.log = {entry(0, 2.0 / 3.0, 0.125, 0.7, false), entry(1, 0.0, 0.0, 1.4, true), entry(2, 1.5, 1e-3, 0.3, false)};
  r.best = 2;
  bayesopt::write_evaluation_log(r, (dir / "e.csv").string());
  const bayesopt::TuneResult back = read_evaluation_log(dir / "e.csv", system::SolverMode::Algebraic);
  REQUIRE(back.log.size() == 3);
  CHECK(back.best == 2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.log[i].iteration == r.log[i].iteration);
    CHECK(back.log[i].theta == r.log[i].theta);
    CHECK(back.log[i].mape == r.log[i].mape);
    CHECK(back.log[i].time == r.log[i].time);
    CHECK(back.log[i].objective == r.log[i].objective);
    CHECK(back.log[i].failed == r.log[i].failed);
  }
  // The IDA space has different columns.
  CHECK_THROWS_AS(read_evaluation_log(dir / "e.csv", system::SolverMode::Ida), ContractViolation);
}

TEST_CASE("solver tables: best overall and fastest successful run", "[cli]") {
  bayesopt::TuneResult r;
  r.space = bayesopt::space_for(system::SolverMode::Ida);
  r.log = {entry(0, 3.0, 2.0, 0.9, false), entry(1, 9.0, 0.1, 2.0, true), entry(2, 2.0366, 58.91, 0.2, false),
           entry(3, 4.0, 15.43, 0.5, false)};
  r.best = 2;
  for (auto& e : r.log) e.theta.resize(5, 1.0);
  const SolverSummary s = summarize(r);
  CHECK(s.best_overall.iteration == 2);
  CHECK(s.best_time.iteration == 0);  // the failed run is faster but excluded

  const fs::path dir = scratch("table");
  std::map<system::SolverMode, SolverSummary> m{{system::SolverMode::Ida, s}};
  write_solver_table(dir / "t1.csv", m, false);
  write_solver_table(dir / "t2.csv", m, true);
  CHECK(slurp(dir / "t1.csv") ==
        "# schema: thermoloop-table v1\n"
        "metric,Algebraic,DAE-IDA,DAE-DASSL\n"
        "MAPE_all [%],n/a,2.0366,n/a\n"
        "t_simulation [s],n/a,58.9100,n/a\n");
  CHECK(slurp(dir / "t2.csv") ==
        "# schema: thermoloop-table v1\n"
        "metric,Algebraic,DAE-IDA,DAE-DASSL\n"
        "MAPE_all [%],n/a,3.0000,n/a\n"
        "t_simulation [s],n/a,2.0000,n/a\n");
}

TEST_CASE("scale-study CSV keeps failed rows with a reason", "[cli]") {
  const fs::path dir = scratch("scale");
  ScaleRow ok;
  ok.n_c = ok.n_v = 2;
  ok.n_p = 4;
  ok.seconds = 0.5;
  ok.steps = 500;
  ScaleRow bad = ok;
  bad.n_c = bad.n_v = 16;
  bad.n_p = 18;
  bad.mode = system::SolverMode::Dassl;
  bad.failed = true;
  bad.failure = "step failed, h < h_min";
  write_scale_csv({ok, bad}, dir / "s.csv");
  const CsvTable t = read_csv(dir / "s.csv", kScaleSchema);
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0][t.column("status")] == "ok");
  CHECK(t.rows[1][t.column("status")] == "failed");
  CHECK(t.rows[1][t.column("solver")] == "dassl");
  CHECK(t.rows[1][t.column("failure")] == "step failed; h < h_min");
  CHECK_THROWS_AS(read_csv(dir / "s.csv", kTableSchema), ContractViolation);
}
