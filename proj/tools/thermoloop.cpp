// thermoloop <generate-data|train|simulate|tune|scale-study|report> --config <path>
//   [--seed N] [--out DIR] [--solver algebraic|ida|dassl] [--corrector on|off]
//
// Exit codes: 0 success, 2 config error, 3 numerical failure (partial
// artifacts and the manifest are still written), 1 anything else.

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "thermoloop/cli/pipeline.hpp"
#include "thermoloop/cli/report.hpp"

namespace tl = thermoloop;
namespace cl = thermoloop::cli;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitError = 1, kExitConfig = 2, kExitNumerical = 3;

struct Options {
  std::string command, config, out = "thermoloop-run", solver, corrector;
  std::optional<unsigned long> seed;
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Git blob hash of the resolved config followed by every input file.
std::string content_hash(const json& resolved, const fs::path& root, const std::vector<fs::path>& inputs) {
  std::string body = resolved.dump();
  std::vector<fs::path> files;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
    } else if (fs::exists(p)) {
      files.push_back(p);
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) body += "\n" + fs::relative(f, root).generic_string() + "\n" + read_bytes(f);
  const std::string blob = "blob " + std::to_string(body.size()) + '\0' + body;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

class Run {
 public:
  Run(const Options& o, fs::path out) : opt_(o), out_(std::move(out)) {}

  template <class F>
  auto phase(const std::string& name, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    struct Stop {
      Run* r;
      std::string n;
      std::chrono::steady_clock::time_point t0;
      ~Stop() { r->timing_[n] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
    } stop{this, name, t0};
    return f();
  }

  void artifact(const fs::path& p) { artifacts_.push_back(fs::relative(p, out_).generic_string()); }
  void note(const std::string& k, json v) { extra_[k] = std::move(v); }
  void set_hash(std::string h) { hash_ = std::move(h); }
  void set_seed(unsigned long s) { seed_ = s; }

  void write_manifest(const std::string& status, const std::string& message) const {
    std::string name = "manifest_" + opt_.command;
    if (!opt_.solver.empty()) name += "_" + opt_.solver;
    json m;
    m["command"] = opt_.command;
    m["config_path"] = opt_.config;
    if (seed_) m["seed"] = *seed_;
    m["input_hash"] = hash_;
    m["output_dir"] = out_.generic_string();
    m["status"] = status;
    if (!message.empty()) m["message"] = message;
    m["timing_s"] = timing_;
    m["artifacts"] = artifacts_;
    if (!opt_.solver.empty()) m["solver"] = opt_.solver;
    if (!opt_.corrector.empty()) m["corrector"] = opt_.corrector;
    if (!extra_.empty()) m["details"] = extra_;
    fs::create_directories(out_);
    cl::write_json(out_ / (name + ".json"), m);
  }

  const fs::path& out() const { return out_; }

 private:
  const Options& opt_;
  fs::path out_;
  std::map<std::string, double> timing_;
  std::vector<std::string> artifacts_;
  json extra_ = json::object();
  std::string hash_;
  std::optional<unsigned long> seed_;
};

// Raised to stop after writing partial artifacts of a failed simulation.
struct PartialFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json scenario_stamp(const cl::PipelineConfig& c) {
  return {{"seed", c.seed}, {"n_c", c.n_c}, {"n_v", c.n_v}, {"steps", c.steps}, {"warmup", c.warmup}};
}

cl::Scenario stored_scenario(const cl::PipelineConfig& cfg, const fs::path& out) {
  const fs::path dir = out / "data";
  tl::require(fs::exists(dir / "scenario.json"), "no dataset under " + dir.string() + "; run generate-data first");
  tl::require(cl::read_json(dir / "scenario.json") == scenario_stamp(cfg),
              "dataset under " + dir.string() + " was generated with a different seed or topology");
  return cl::load_scenario(cfg, dir);
}

cl::Models stored_models(const fs::path& out) {
  const fs::path dir = out / "models";
  tl::require(fs::exists(dir / "condenser.json"), "no models under " + dir.string() + "; run train first");
  return cl::load_models(dir);
}

void write_history(const tl::pinode::TrainResult& r, const fs::path& p) {
  std::ofstream out(p);
  out << "epoch,train_data,train_phys,train_cons,train_total,val_data,val_phys,val_cons,val_total,learning_rate\n";
  out << std::setprecision(10);
  for (const auto& e : r.history)
    out << e.epoch << ',' << e.train.data << ',' << e.train.phys << ',' << e.train.cons << ',' << e.train.total << ','
        << e.val.data << ',' << e.val.phys << ',' << e.val.cons << ',' << e.val.total << ',' << e.learning_rate << '\n';
}

tl::system::CorrectorHook make_hook(const cl::Models& m, const cl::PipelineConfig& cfg) {
  tl::system::CorrectorHook h;
  h.net = &*m.corr;
  h.kernel = cfg.corrector.kernel;
  h.window = cfg.corrector.gp_window;
  h.alpha = cfg.corrector.ema_alpha;
  return h;
}

// ---------------------------------------------------------------------------

void cmd_generate(Run& run, const cl::PipelineConfig& cfg) {
  const cl::Scenario s = run.phase("oracle", [&] { return cl::make_scenario(cfg); });
  const fs::path dir = run.out() / "data";
  run.phase("write", [&] {
    tl::plant::write_dataset(s.data, dir);
    cl::write_json(dir / "scenario.json", scenario_stamp(cfg));
    return 0;
  });
  for (int i = 0; i < s.topo.n_hx(); ++i) {
    run.artifact(dir / ("hx" + std::to_string(i) + ".csv"));
    run.artifact(dir / ("hx" + std::to_string(i) + ".json"));
  }
  run.artifact(dir / "scenario.json");
}

void cmd_train(Run& run, const cl::PipelineConfig& cfg, bool corrector) {
  const cl::Scenario s = run.phase("load", [&] { return stored_scenario(cfg, run.out()); });
  const fs::path dir = run.out() / "models";
  fs::create_directories(dir);
  cl::Models m;
  cl::TrainingReport rep;
  rep.cond = run.phase("pinode_condenser", [&] { return cl::train_kind(m.cond, s, tl::HxKind::Condenser, cfg, cfg.seed + 1); });
  rep.evap = run.phase("pinode_evaporator", [&] { return cl::train_kind(m.evap, s, tl::HxKind::Evaporator, cfg, cfg.seed + 2); });
  run.phase("static_models", [&] {
    cl::train_statics(m, cfg, s.par, rep);
    return 0;
  });
  if (corrector) rep.corrector_loss = run.phase("corrector", [&] { return cl::train_corrector_model(m, s, cfg); });
  run.phase("write", [&] {
    cl::save_models(m, dir);
    write_history(rep.cond.result, dir / "history_condenser.csv");
    write_history(rep.evap.result, dir / "history_evaporator.csv");
    if (corrector) {
      std::ofstream h(dir / "history_corrector.csv");
      h << "epoch,loss\n" << std::setprecision(10);
      for (std::size_t i = 0; i < rep.corrector_loss.size(); ++i) h << i + 1 << ',' << rep.corrector_loss[i] << '\n';
    }
    return 0;
  });
  for (const char* f : {"condenser.json", "evaporator.json", "compressor.json", "valve.json", "history_condenser.csv",
                        "history_evaporator.csv"})
    run.artifact(dir / f);
  if (corrector) {
    run.artifact(dir / "corrector.json");
    run.artifact(dir / "history_corrector.csv");
  }
  run.note("condenser_best_val", rep.cond.result.best_val);
  run.note("evaporator_best_val", rep.evap.result.best_val);
  run.note("compressor_loss", rep.comp_loss);
  run.note("valve_loss", rep.valve_loss);
  if (corrector) run.note("corrector_final_loss", rep.corrector_loss.empty() ? 0.0 : rep.corrector_loss.back());
}

void cmd_simulate(Run& run, const cl::PipelineConfig& cfg, bool corrector) {
  const cl::Scenario s = run.phase("load", [&] { return stored_scenario(cfg, run.out()); });
  const cl::Models m = run.phase("load", [&] { return stored_models(run.out()); });
  tl::require(!corrector || m.corr.has_value(), "--corrector on needs a trained corrector (train --corrector on)");
  std::optional<tl::system::CorrectorHook> hook;
  if (corrector) hook = make_hook(m, cfg);
  const cl::RunScore r = run.phase("simulate", [&] {
    return cl::run_closed_loop(s, m, cfg.system, cfg.holdout_start, cfg.holdout_length, hook ? &*hook : nullptr);
  });
  const fs::path dir = run.out() / "simulate" / tl::system::solver_name(cfg.system.mode);
  fs::create_directories(dir);
  tl::system::write_trajectory_csv(r.tr, (dir / "trajectory.csv").string());
  json metrics = {{"solver", tl::system::solver_name(cfg.system.mode)},
                  {"start", cfg.holdout_start},
                  {"samples", cfg.holdout_length},
                  {"rows", r.tr.rows.size()},
                  {"t_simulation_s", r.seconds},
                  {"cpu_s", r.cpu_seconds},
                  {"failed", r.tr.failed},
                  {"rhs_evals", r.tr.metrics.rhs_evals},
                  {"pressure_solves", r.tr.metrics.pressure_solves},
                  {"least_squares_solves", r.tr.metrics.least_squares_solves},
                  {"accepted_steps", r.tr.metrics.accepted_steps},
                  {"corrector_applied", r.tr.metrics.corrector_applied},
                  {"corrector_skipped", r.tr.metrics.corrector_skipped}};
  if (r.tr.failed) {
    metrics["failure"] = r.tr.failure;
  } else {
    metrics["mape_all_pct"] = r.mape_all;
    metrics["mape_me_pct"] = r.mape_me;
    metrics["mape_rates_pct"] = r.mape_rates;
    metrics["channels"] = r.channels;
  }
  cl::write_json(dir / "metrics.json", metrics);
  run.artifact(dir / "trajectory.csv");
  run.artifact(dir / "metrics.json");
  run.note("metrics", metrics);
  if (r.tr.failed) throw PartialFailure("simulation failed: " + r.tr.failure);
}

void cmd_tune(Run& run, const cl::PipelineConfig& cfg) {
  const cl::Scenario s = run.phase("load", [&] { return stored_scenario(cfg, run.out()); });
  const cl::Models m = run.phase("load", [&] { return stored_models(run.out()); });
  const auto mode = cfg.system.mode;
  const auto space = tl::bayesopt::space_for(mode);
  const auto r = run.phase("optimize", [&] { return tl::bayesopt::tune(space, cl::tuning_objective(s, m, cfg, mode), cfg.tune); });
  const fs::path dir = run.out() / "tune" / tl::system::solver_name(mode);
  fs::create_directories(dir);
  run.phase("write", [&] {
    tl::bayesopt::write_evaluation_log(r, (dir / "evaluations.csv").string());
    tl::bayesopt::write_pareto(r, (dir / "pareto.csv").string());
    // The surrogate needs two successful runs; otherwise there is no contour.
    std::size_t ok = 0;
    for (const auto& e : r.log) ok += e.failed ? 0 : 1;
    fs::remove(dir / "contour.csv");
    if (ok >= 2)
      tl::bayesopt::write_contour(r, tl::bayesopt::contour_grid(r, cfg.contour_points, cfg.tune.seed),
                                  (dir / "contour.csv").string());
    return 0;
  });
  const auto& b = r.best_entry();
  json best = json::object();
  for (std::size_t i = 0; i < space.dims.size(); ++i) best[space.dims[i].name] = b.theta[i];
  json summary = {{"iteration", b.iteration}, {"theta", best}, {"mape_all_pct", b.mape},
                  {"t_simulation_s", b.time},  {"objective", b.objective}};
  cl::write_json(dir / "best.json", summary);
  for (const char* f : {"evaluations.csv", "pareto.csv", "contour.csv", "best.json"})
    if (fs::exists(dir / f)) run.artifact(dir / f);
  run.note("best", summary);
}

void cmd_scale(Run& run, const cl::PipelineConfig& cfg, const std::string& solver) {
  const cl::Models m = run.phase("load", [&] { return stored_models(run.out()); });
  std::vector<tl::system::SolverMode> modes = cl::all_modes();
  if (!solver.empty()) modes = {tl::system::parse_solver(solver)};
  const auto rows = run.phase("sweep", [&] { return cl::scale_study(cfg, m, modes); });
  const fs::path dir = run.out() / "scale_study";
  fs::create_directories(dir);
  cl::write_scale_csv(rows, dir / "scale_study.csv");
  run.artifact(dir / "scale_study.csv");
  long failed = 0;
  for (const auto& r : rows) failed += r.failed ? 1 : 0;
  run.note("runs", rows.size());
  run.note("failed_runs", failed);
}

void cmd_report(Run& run, const cl::PipelineConfig& cfg) {
  const fs::path dir = run.out() / "report";
  const auto files = run.phase("report", [&] {
    return cl::generate_report({run.out(), cfg.contour_points, cfg.tune.seed}, dir);
  });
  for (const auto& f : files) run.artifact(dir / f);
}

std::vector<fs::path> inputs_for(const std::string& cmd, const fs::path& out) {
  if (cmd == "generate-data") return {};
  if (cmd == "train") return {out / "data"};
  if (cmd == "scale-study") return {out / "models"};
  if (cmd == "report")
    return {out / "tune", out / "scale_study", out / "simulate"};
  return {out / "data", out / "models"};
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  CLI::App app{"Surrogate-based refrigeration cycle simulation pipeline"};
  app.require_subcommand(1, 1);
  for (const char* name : {"generate-data", "train", "simulate", "tune", "scale-study", "report"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", opt.config, "JSON configuration file")->required();
    sub->add_option("--seed", opt.seed, "Override the configured seed");
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_option("--solver", opt.solver, "Solver mode")->check(CLI::IsMember({"algebraic", "ida", "dassl"}));
    sub->add_option("--corrector", opt.corrector, "Use the hybrid corrector")->check(CLI::IsMember({"on", "off"}));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  opt.command = app.get_subcommands().front()->get_name();

  Run run(opt, fs::path(opt.out));
  cl::PipelineConfig cfg;
  try {
    const json user = cl::read_json(opt.config);
    cfg = cl::load_config(user, [](const char* n) { return std::getenv(n); });
    if (opt.seed) {
      cfg.seed = *opt.seed;
      cfg.tune.seed = *opt.seed;
    }
    if (!opt.solver.empty()) cfg.system.mode = tl::system::parse_solver(opt.solver);
    run.set_seed(cfg.seed);
    run.set_hash(content_hash(cl::to_json(cfg), run.out(), inputs_for(opt.command, run.out())));
    const bool corrector = opt.corrector.empty() ? opt.command == "train" : opt.corrector == "on";

    if (opt.command == "generate-data") cmd_generate(run, cfg);
    else if (opt.command == "train") cmd_train(run, cfg, corrector);
    else if (opt.command == "simulate") cmd_simulate(run, cfg, corrector);
    else if (opt.command == "tune") cmd_tune(run, cfg);
    else if (opt.command == "scale-study") cmd_scale(run, cfg, opt.solver);
    else cmd_report(run, cfg);
    run.write_manifest("ok", "");
    return kExitOk;
  } catch (const tl::ContractViolation& e) {
    std::cerr << "config error: " << e.what() << '\n';
    run.write_manifest("config_error", e.what());
    return kExitConfig;
  } catch (const PartialFailure& e) {
    std::cerr << e.what() << '\n';
    run.write_manifest("numerical_failure", e.what());
    return kExitNumerical;
  } catch (const tl::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    run.write_manifest("numerical_failure", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    try {
      run.write_manifest("error", e.what());
    } catch (...) {
    }
    return kExitError;
  }
}
