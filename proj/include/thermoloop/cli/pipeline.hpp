#pragma once

// End-to-end scenario plumbing shared by the command-line tool and the
// acceptance runner: configuration, data, training, closed-loop runs and
// their scores.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "thermoloop/bayesopt/solver_space.hpp"
#include "thermoloop/core/metrics.hpp"
#include "thermoloop/corrector/corrector.hpp"
#include "thermoloop/pinode/train.hpp"
#include "thermoloop/plant/dataset.hpp"
#include "thermoloop/surrogate/static_models.hpp"
#include "thermoloop/system/simulator.hpp"

namespace thermoloop::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  unsigned long seed = 7;
  int n_c = 2, n_v = 1;
  long steps = 2500;   // recorded samples
  long warmup = 3000;  // seconds of constant actuation before recording
  long train_end = 1600, val_end = 2000;
  long holdout_start = 2000, holdout_length = 500;

  pinode::ModelConfig model;
  // Desk-scale training lengths: 200 PINODE epochs fit inside the 10 minute
  // budget on one core; the corrector's 500k epochs are cut to 2000.
  pinode::TrainConfig train = [] {
    pinode::TrainConfig t;
    t.epochs = 200;
    return t;
  }();
  surrogate::StaticTrainConfig statics;
  int static_samples = 4000;

  corrector::CorrectorConfig corrector = [] {
    corrector::CorrectorConfig c;
    c.epochs = 2000;
    return c;
  }();
  long continuation_length = 500;

  system::SystemConfig system;

  bayesopt::TuneConfig tune;
  long tune_start = 2000, tune_horizon = 499;
  int contour_points = 25;

  std::vector<int> scale_nc{2, 4, 8, 16};
  long scale_steps = 500;

  void validate() const {
    require(n_c >= 1 && n_v >= 1, "config: n_c and n_v must be positive");
    require(model.T_enc + model.T_dec <= train_end && train_end < val_end && val_end <= steps,
            "config: need T_enc + T_dec <= train_end < val_end <= steps");
    require(holdout_start >= model.T_enc && holdout_length >= 1 && holdout_start + holdout_length <= steps,
            "config: hold-out range must lie inside the recorded steps");
    require(corrector.segment_start >= model.T_enc &&
                corrector.segment_start + corrector.segment_length + continuation_length <= steps,
            "config: corrector segment and continuation must lie inside the recorded steps");
    require(tune_start >= model.T_enc && tune_start + tune_horizon < steps, "config: tuning window out of range");
    require(static_samples >= 2 && scale_steps >= 1 && contour_points >= 2, "config: sizes must be positive");
    for (int n : scale_nc) require(n >= 1, "config: scale-study sizes must be positive");
    model.validate();
    train.validate();
    corrector.validate();
    system.validate();
    tune.validate();
  }
};

inline json to_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["topology"] = {{"n_c", c.n_c}, {"n_v", c.n_v}};
  j["data"] = {{"steps", c.steps},
               {"warmup", c.warmup},
               {"train_end", c.train_end},
               {"val_end", c.val_end},
               {"holdout_start", c.holdout_start},
               {"holdout_length", c.holdout_length}};
  j["model"] = pinode::to_json(c.model);
  j["train"] = {{"lambda_phys", c.train.lambda_phys}, {"lambda_cons", c.train.lambda_cons},
                {"learning_rate", c.train.learning_rate}, {"lr_factor", c.train.lr_factor},
                {"patience", c.train.patience},     {"clip_norm", c.train.clip_norm},
                {"batch_size", c.train.batch_size}, {"epochs", c.train.epochs},
                {"stride", c.train.stride},         {"val_stride", c.train.val_stride},
                {"time_budget_s", c.train.time_budget_s}};
  j["static"] = {{"hidden", c.statics.hidden},
                 {"epochs", c.statics.epochs},
                 {"batch_size", c.statics.batch_size},
                 {"learning_rate", c.statics.learning_rate},
                 {"samples", c.static_samples}};
  j["corrector"] = {{"segment_start", c.corrector.segment_start},
                    {"segment_length", c.corrector.segment_length},
                    {"continuation_length", c.continuation_length},
                    {"learning_rate", c.corrector.learning_rate},
                    {"epochs", c.corrector.epochs},
                    {"hidden", c.corrector.hidden},
                    {"bound", c.corrector.bound},
                    {"gp_length", c.corrector.kernel.ell},
                    {"gp_variance", c.corrector.kernel.C},
                    {"gp_noise", c.corrector.kernel.noise},
                    {"gp_window", c.corrector.gp_window},
                    {"ema_alpha", c.corrector.ema_alpha}};
  j["system"] = {{"solver", system::solver_name(c.system.mode)},
                 {"eps_dt", c.system.eps_dt},
                 {"eps_soln", c.system.eps_soln},
                 {"m_scale", c.system.m_scale},
                 {"dt_min", c.system.dt_min},
                 {"h_max", c.system.dae.h_max},
                 {"h_min", c.system.dae.h_min},
                 {"ida_output_interval", c.system.ida_output_interval},
                 {"dassl_min_output", c.system.dassl_min_output},
                 {"dassl_max_steps", c.system.dae.dassl_max_steps},
                 {"tau", c.system.highres.tau},
                 {"n_pre", c.system.highres.n_pre},
                 {"n_post", c.system.highres.n_post},
                 {"dt_high", c.system.highres.dt_high},
                 {"dt_low", c.system.highres.dt_low}};
  j["tune"] = {{"budget", c.tune.budget},         {"n0", c.tune.n0},
               {"w_mape", c.tune.w_mape},         {"w_time", c.tune.w_time},
               {"start", c.tune_start},           {"horizon", c.tune_horizon},
               {"contour_points", c.contour_points}};
  j["scale_study"] = {{"n_c", c.scale_nc}, {"steps", c.scale_steps}};
  return j;
}

inline PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  const json d = to_json(c);
  auto get = [&](const char* sec, const char* key) -> json {
    if (j.contains(sec) && j[sec].is_object() && j[sec].contains(key)) return j[sec][key];
    return d[sec][key];
  };
  c.seed = j.value("seed", c.seed);
  c.n_c = get("topology", "n_c").get<int>();
  c.n_v = get("topology", "n_v").get<int>();
  c.steps = get("data", "steps").get<long>();
  c.warmup = get("data", "warmup").get<long>();
  c.train_end = get("data", "train_end").get<long>();
  c.val_end = get("data", "val_end").get<long>();
  c.holdout_start = get("data", "holdout_start").get<long>();
  c.holdout_length = get("data", "holdout_length").get<long>();
  json m = d["model"];
  if (j.contains("model")) m.update(j["model"]);
  c.model = pinode::model_config_from_json(m);
  c.train.lambda_phys = get("train", "lambda_phys").get<double>();
  c.train.lambda_cons = get("train", "lambda_cons").get<double>();
  c.train.learning_rate = get("train", "learning_rate").get<double>();
  c.train.lr_factor = get("train", "lr_factor").get<double>();
  c.train.patience = get("train", "patience").get<int>();
  c.train.clip_norm = get("train", "clip_norm").get<double>();
  c.train.batch_size = get("train", "batch_size").get<int>();
  c.train.epochs = get("train", "epochs").get<int>();
  c.train.stride = get("train", "stride").get<long>();
  c.train.val_stride = get("train", "val_stride").get<long>();
  c.train.time_budget_s = get("train", "time_budget_s").get<double>();
  c.statics.hidden = get("static", "hidden").get<int>();
  c.statics.epochs = get("static", "epochs").get<int>();
  c.statics.batch_size = get("static", "batch_size").get<int>();
  c.statics.learning_rate = get("static", "learning_rate").get<double>();
  c.static_samples = get("static", "samples").get<int>();
  c.corrector.segment_start = get("corrector", "segment_start").get<long>();
  c.corrector.segment_length = get("corrector", "segment_length").get<long>();
  c.continuation_length = get("corrector", "continuation_length").get<long>();
  c.corrector.learning_rate = get("corrector", "learning_rate").get<double>();
  c.corrector.epochs = get("corrector", "epochs").get<int>();
  c.corrector.hidden = get("corrector", "hidden").get<int>();
  c.corrector.bound = get("corrector", "bound").get<double>();
  c.corrector.kernel.ell = get("corrector", "gp_length").get<double>();
  c.corrector.kernel.C = get("corrector", "gp_variance").get<double>();
  c.corrector.kernel.noise = get("corrector", "gp_noise").get<double>();
  c.corrector.gp_window = get("corrector", "gp_window").get<int>();
  c.corrector.ema_alpha = get("corrector", "ema_alpha").get<double>();
  c.system.mode = system::parse_solver(get("system", "solver").get<std::string>());
  c.system.eps_dt = get("system", "eps_dt").get<double>();
  c.system.eps_soln = get("system", "eps_soln").get<double>();
  c.system.m_scale = get("system", "m_scale").get<double>();
  c.system.dt_min = get("system", "dt_min").get<double>();
  c.system.dae.h_max = get("system", "h_max").get<double>();
  c.system.dae.h_min = get("system", "h_min").get<double>();
  c.system.ida_output_interval = get("system", "ida_output_interval").get<double>();
  c.system.dassl_min_output = get("system", "dassl_min_output").get<double>();
  c.system.dae.dassl_max_steps = get("system", "dassl_max_steps").get<int>();
  c.system.highres.tau = get("system", "tau").get<double>();
  c.system.highres.n_pre = get("system", "n_pre").get<int>();
  c.system.highres.n_post = get("system", "n_post").get<int>();
  c.system.highres.dt_high = get("system", "dt_high").get<double>();
  c.system.highres.dt_low = get("system", "dt_low").get<double>();
  c.tune.budget = get("tune", "budget").get<int>();
  c.tune.n0 = get("tune", "n0").get<int>();
  c.tune.w_mape = get("tune", "w_mape").get<double>();
  c.tune.w_time = get("tune", "w_time").get<double>();
  c.tune_start = get("tune", "start").get<long>();
  c.tune_horizon = get("tune", "horizon").get<long>();
  c.contour_points = get("tune", "contour_points").get<int>();
  c.scale_nc = get("scale_study", "n_c").get<std::vector<int>>();
  c.scale_steps = get("scale_study", "steps").get<long>();
  c.tune.seed = c.seed;
  c.train.seed = c.seed;
  c.statics.seed = c.seed;
  c.corrector.seed = c.seed;
  return c;
}

/// Environment overrides for scalar leaves: THERMOLOOP_<SECTION>_<KEY>
/// (upper case), e.g. THERMOLOOP_TRAIN_EPOCHS=20 or THERMOLOOP_SEED=3.
/// `env` returns nullptr for unset names.
template <class Env>
json apply_env_overrides(json j, Env&& env) {
  auto upper = [](std::string s) {
    for (char& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return s;
  };
  auto set = [&](json& leaf, const std::string& name) {
    const char* v = env(name.c_str());
    if (!v) return;
    const std::string s(v);
    try {
      if (leaf.is_boolean()) {
        require(s == "true" || s == "false" || s == "1" || s == "0", "expected a boolean");
        leaf = s == "true" || s == "1";
      } else if (leaf.is_number_integer() || leaf.is_number_unsigned()) {
        std::size_t pos = 0;
        const long long x = std::stoll(s, &pos);
        require(pos == s.size(), "expected an integer");
        leaf = x;
      } else if (leaf.is_number()) {
        std::size_t pos = 0;
        const double x = std::stod(s, &pos);
        require(pos == s.size(), "expected a number");
        leaf = x;
      } else if (leaf.is_string()) {
        leaf = s;
      }
    } catch (const std::exception& e) {
      throw ContractViolation("environment override " + name + "='" + s + "': " + e.what());
    }
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it->is_object()) {
      for (auto jt = it->begin(); jt != it->end(); ++jt)
        if (jt->is_primitive()) set(*jt, "THERMOLOOP_" + upper(it.key()) + "_" + upper(jt.key()));
    } else if (it->is_primitive()) {
      set(*it, "THERMOLOOP_" + upper(it.key()));
    }
  }
  return j;
}

/// Defaults, then the file, then the environment. Unknown sections or keys
/// are rejected so typos do not pass silently.
inline PipelineConfig load_config(const json& user, const std::function<const char*(const char*)>& env) {
  json merged = to_json(PipelineConfig{});
  require(user.is_object(), "config: top level must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    require(merged.contains(it.key()), "config: unknown key '" + it.key() + "'");
    if (merged[it.key()].is_object()) {
      require(it->is_object(), "config: section '" + it.key() + "' must be an object");
      for (auto jt = it->begin(); jt != it->end(); ++jt) {
        require(merged[it.key()].contains(jt.key()), "config: unknown key '" + it.key() + "." + jt.key() + "'");
        merged[it.key()][jt.key()] = *jt;
      }
    } else {
      merged[it.key()] = *it;
    }
  }
  merged = apply_env_overrides(merged, env);
  PipelineConfig c;
  try {
    c = config_from_json(merged);
  } catch (const json::exception& e) {
    throw ContractViolation(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Scenario

struct Scenario {
  Topology topo;
  plant::PlantParams par;
  plant::ActuationProfile prof;
  plant::Dataset data;
};

/// Oracle data for an (n_c, n_v) network over `steps` samples. The profile
/// keeps one spare sample past the end.
inline Scenario make_scenario(const PipelineConfig& cfg, int n_c, int n_v, long steps) {
  Scenario s;
  s.topo = build_topology(n_c, n_v);
  s.prof = plant::random_profile(s.topo, steps + 1, cfg.seed);
  plant::PlantOracle oracle(s.topo, s.par);
  s.data = plant::generate_dataset(oracle, s.prof, steps, 2, cfg.warmup);
  return s;
}

inline Scenario make_scenario(const PipelineConfig& cfg) { return make_scenario(cfg, cfg.n_c, cfg.n_v, cfg.steps); }

/// Reads series written by plant::write_dataset and rebuilds the states.
inline Scenario load_scenario(const PipelineConfig& cfg, const fs::path& dir) {
  Scenario s;
  s.topo = build_topology(cfg.n_c, cfg.n_v);
  s.prof = plant::random_profile(s.topo, cfg.steps + 1, cfg.seed);
  s.data.topo = s.topo;
  s.data.dt = s.prof.dt;
  for (int i = 0; i < s.topo.n_hx(); ++i) {
    plant::HxSeries h = plant::read_series(dir / ("hx" + std::to_string(i) + ".csv"));
    h.hx = i;
    h.kind = s.topo.kind(i);
    s.data.hx.push_back(std::move(h));
  }
  const long n = s.data.hx.front().steps();
  require(n == cfg.steps, "dataset in " + dir.string() + " has " + std::to_string(n) + " steps, config expects " +
                              std::to_string(cfg.steps));
  s.data.states.resize(n, s.topo.state_dim());
  for (int i = 0; i < s.topo.n_hx(); ++i) {
    require(s.data.hx[i].steps() == n, "dataset series lengths differ");
    s.data.states.col(s.topo.mass_index(i)) = s.data.hx[i].Y.col(plant::kChannelM);
    s.data.states.col(s.topo.energy_index(i)) = s.data.hx[i].Y.col(plant::kChannelE);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Models

struct Models {
  pinode::PinodeModel cond, evap;
  surrogate::StaticModel comp, valve;
  std::optional<corrector::CorrectorNet> corr;

  system::SurrogateSet set(const plant::PlantParams& par) const {
    system::SurrogateSet s;
    s.condenser = &cond;
    s.evaporator = &evap;
    s.compressor = &comp;
    s.valve = &valve;
    s.G_dis = par.G_dis;
    s.G_liq = par.G_liq;
    s.G_suct = par.G_suct;
    return s;
  }
};

struct KindTraining {
  pinode::TrainResult result;
  double seconds = 0.0;
};

struct TrainingReport {
  KindTraining cond, evap;
  double comp_loss = 0.0, valve_loss = 0.0;
  std::vector<double> corrector_loss;
};

/// One shared PINODE per exchanger kind, trained on every series of that kind.
inline KindTraining train_kind(pinode::PinodeModel& m, const Scenario& s, HxKind kind, const PipelineConfig& cfg,
                               unsigned long seed) {
  std::vector<const plant::HxSeries*> series;
  for (const auto& h : s.data.hx)
    if (h.kind == kind) series.push_back(&h);
  m = pinode::PinodeModel::create(cfg.model, seed);
  m.kind = kind_name(kind);
  m.scaler = pinode::fit_scaler(series);
  std::vector<pinode::NormalizedSeries> data;
  for (auto* h : series) data.push_back(pinode::normalize_series(*h, m.scaler));
  const auto tw = pinode::enumerate_windows(data, 0, cfg.train_end, cfg.model, cfg.train.stride);
  const auto vw = pinode::enumerate_windows(data, cfg.train_end, cfg.val_end, cfg.model, cfg.train.val_stride);
  pinode::TrainConfig tc = cfg.train;
  tc.seed = seed;
  KindTraining k;
  k.result = pinode::train(m, data, tw, data, vw, tc, s.data.dt);
  k.seconds = k.result.seconds;
  if (k.result.diverged) throw NumericalFailure(std::string("PINODE training diverged for ") + kind_name(kind));
  return k;
}

inline void train_statics(Models& m, const PipelineConfig& cfg, const plant::PlantParams& par, TrainingReport& rep) {
  m.comp = surrogate::StaticModel::create(surrogate::StaticKind::Compressor, cfg.statics.hidden, cfg.seed + 11);
  rep.comp_loss = m.comp.fit(surrogate::sample_component(par, surrogate::StaticKind::Compressor, cfg.static_samples,
                                                         cfg.seed + 12),
                             cfg.statics);
  m.valve = surrogate::StaticModel::create(surrogate::StaticKind::Valve, cfg.statics.hidden, cfg.seed + 13);
  rep.valve_loss = m.valve.fit(
      surrogate::sample_component(par, surrogate::StaticKind::Valve, cfg.static_samples, cfg.seed + 14), cfg.statics);
}

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ContractViolation("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ContractViolation(p.string() + ": " + e.what());
  }
}

inline void save_models(const Models& m, const fs::path& dir) {
  fs::create_directories(dir);
  write_json(dir / "condenser.json", m.cond.to_checkpoint());
  write_json(dir / "evaporator.json", m.evap.to_checkpoint());
  write_json(dir / "compressor.json", m.comp.to_checkpoint());
  write_json(dir / "valve.json", m.valve.to_checkpoint());
  if (m.corr) write_json(dir / "corrector.json", m.corr->to_checkpoint());
}

inline Models load_models(const fs::path& dir) {
  Models m;
  m.cond = pinode::PinodeModel::from_checkpoint(read_json(dir / "condenser.json"));
  m.evap = pinode::PinodeModel::from_checkpoint(read_json(dir / "evaporator.json"));
  m.comp = surrogate::StaticModel::from_checkpoint(read_json(dir / "compressor.json"));
  m.valve = surrogate::StaticModel::from_checkpoint(read_json(dir / "valve.json"));
  if (fs::exists(dir / "corrector.json"))
    m.corr = corrector::CorrectorNet::from_checkpoint(read_json(dir / "corrector.json"));
  return m;
}

// ---------------------------------------------------------------------------
// Closed-loop runs

struct StartPoint {
  Vec y0;
  std::vector<Mat> history;  // per exchanger, T_enc x 17 physical rows ending at the start
};

inline StartPoint start_point(const Scenario& s, long start, int T_enc) {
  require(start >= T_enc - 1 && start < s.data.steps(), "start_point: start outside the recorded data");
  StartPoint p;
  p.y0 = s.data.states.row(start).transpose();
  for (const auto& h : s.data.hx) {
    Mat w(T_enc, plant::kInputs + plant::kOutputs);
    w << h.X.middleRows(start - T_enc + 1, T_enc), h.Y.middleRows(start - T_enc + 1, T_enc);
    p.history.push_back(w);
  }
  return p;
}

struct RunScore {
  system::Trajectory tr;
  double seconds = 0.0;      // wall time of the simulation call
  double cpu_seconds = 0.0;
  double mape_all = 0.0;     // all 9 outputs of every exchanger
  double mape_rates = 0.0;   // decoder physics rates vs recorded flows
  double mape_me = 0.0;      // M_r and E_hx channels only
  int channels = 0;
};

inline std::vector<double> sample_times(const Scenario& s, long start, long count) {
  std::vector<double> t(count);
  for (long k = 0; k < count; ++k) t[k] = (start + k) * s.prof.dt;
  return t;
}

/// Scores a trajectory against the oracle series over `count` samples from
/// `start`. Channels are the 9 outputs of every exchanger, side by side.
/// Rates are compared in the model's rate units (normalized channel units
/// per second), so their floor is 1e-3 of those units.
inline void score_run(RunScore& r, const Scenario& s, const Models& m, long start, long count) {
  const int n = s.topo.n_hx();
  const auto times = sample_times(s, start, count);
  Mat P(count, n * plant::kOutputs), R(count, n * plant::kOutputs);
  Mat Pr(count, 2 * n), Rr(count, 2 * n), Pme(count, 2 * n), Rme(count, 2 * n);
  Vec floors(2 * n);
  for (int i = 0; i < n; ++i) {
    const ColumnScaler& sc = (s.topo.kind(i) == HxKind::Condenser ? m.cond : m.evap).scaler;
    floors(2 * i) = kMapeFloor / sc.rate_scale(plant::kInputs + plant::kChannelM);
    floors(2 * i + 1) = kMapeFloor / sc.rate_scale(plant::kInputs + plant::kChannelE);
    const Mat y = system::sample_outputs(r.tr, i, times);
    P.middleCols(i * plant::kOutputs, plant::kOutputs) = y;
    R.middleCols(i * plant::kOutputs, plant::kOutputs) = s.data.hx[i].Y.middleRows(start, count);
    Pr.middleCols(2 * i, 2) = system::sample_rates(r.tr, i, times);
    Rr.middleCols(2 * i, 2) = s.data.hx[i].true_rates().middleRows(start, count);
    Pme.col(2 * i) = y.col(plant::kChannelM);
    Pme.col(2 * i + 1) = y.col(plant::kChannelE);
    Rme.col(2 * i) = R.col(i * plant::kOutputs + plant::kChannelM);
    Rme.col(2 * i + 1) = R.col(i * plant::kOutputs + plant::kChannelE);
  }
  const MapeResult all = mape_detail(P, R);
  r.mape_all = all.percent;
  r.channels = all.channels_used;
  r.mape_rates = mape_detail(Pr, Rr, floors).percent;
  r.mape_me = mape(Pme, Rme);
}

inline double cpu_now() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

/// Simulates `count` samples from `start` (horizon count - 1) and scores it.
/// A failed run keeps its partial trajectory and is not scored.
inline RunScore run_closed_loop(const Scenario& s, const Models& m, const system::SystemConfig& sc, long start,
                                long count, const system::CorrectorHook* hook = nullptr) {
  system::Simulator sim(s.topo, m.set(s.par), s.prof, sc);
  const StartPoint sp = start_point(s, start, m.cond.cfg.T_enc);
  RunScore r;
  const double c0 = cpu_now();
  const auto t0 = std::chrono::steady_clock::now();
  r.tr = sim.simulate(sp.y0, sp.history, start, count - 1, hook);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.cpu_seconds = cpu_now() - c0;
  if (!r.tr.failed) score_run(r, s, m, start, count);
  return r;
}

// ---------------------------------------------------------------------------
// Corrector

/// Both condensers of the dual-compressor network (the first two exchangers
/// of any network with two or more condensers, else the first condenser and
/// evaporator).
inline std::vector<int> corrector_hx(const Topology& topo) {
  if (topo.n_c >= 2) return {0, 1};
  return {0, topo.n_c};
}

/// Collects pairs over the configured segment and trains a fresh network.
inline std::vector<double> train_corrector_model(Models& m, const Scenario& s, const PipelineConfig& cfg) {
  system::SystemConfig sc = cfg.system;
  sc.mode = system::SolverMode::Algebraic;
  system::Simulator sim(s.topo, m.set(s.par), s.prof, sc);
  const long start = cfg.corrector.segment_start, len = cfg.corrector.segment_length;
  const StartPoint sp = start_point(s, start, m.cond.cfg.T_enc);
  const std::vector<int> hx = corrector_hx(s.topo);
  // Normalization statistics over the whole benchmark run, so later parts of
  // the run stay inside the gate's range when the plant drifts.
  const int n = static_cast<int>(hx.size());
  Mat run(s.data.steps(), 2 * n);
  for (int q = 0; q < n; ++q) {
    run.col(q) = s.data.states.col(s.topo.energy_index(hx[q]));
    run.col(n + q) = s.data.states.col(s.topo.mass_index(hx[q]));
  }
  const ColumnScaler scaler = ColumnScaler::fit(run);
  const system::CorrectorData data = system::collect_training_pairs(
      sim, sp.y0, sp.history, start, len, s.data.states.middleRows(start, len), hx, &scaler);
  const int d_in = static_cast<int>(hx.size()) * (plant::kInputs + plant::kOutputs);
  corrector::CorrectorNet net =
      corrector::CorrectorNet::create(d_in, 2 * n, cfg.corrector.hidden, cfg.corrector.bound,
                                      cfg.corrector.seed);
  net.hx = hx;
  net.m_scaler = data.m_scaler;
  std::vector<double> hist = corrector::train_corrector(net, data.records, cfg.corrector);
  m.corr = std::move(net);
  return hist;
}

/// ME-channel MAPE of the corrected exchangers, with and without correction.
struct CorrectorScore {
  double uncorrected = 0.0, corrected = 0.0;
  long applied = 0, skipped = 0;
  double max_abs_gate = 0.0;  // largest |normalized corrected value| emitted
  bool failed = false;
  std::string failure;
};

inline CorrectorScore score_corrector(const Scenario& s, const Models& m, const PipelineConfig& cfg, long start,
                                      long count) {
  require(m.corr.has_value(), "score_corrector: no corrector model");
  system::SystemConfig sc = cfg.system;
  sc.mode = system::SolverMode::Algebraic;
  system::CorrectorHook hook;
  hook.net = &*m.corr;
  hook.kernel = cfg.corrector.kernel;
  hook.window = cfg.corrector.gp_window;
  hook.alpha = cfg.corrector.ema_alpha;
  const RunScore r = run_closed_loop(s, m, sc, start, count, &hook);
  CorrectorScore out;
  if (r.tr.failed) {
    out.failed = true;
    out.failure = r.tr.failure;
    return out;
  }
  out.applied = r.tr.metrics.corrector_applied;
  out.skipped = r.tr.metrics.corrector_skipped;
  const auto& hx = m.corr->hx;
  const int n = static_cast<int>(hx.size());
  const auto times = sample_times(s, start, count);
  // Corrected values come out as (E.., M..) in physical units.
  const Mat mc = system::sample_rows(r.tr, times, [](const system::TrajectoryRow& row) { return row.m_corr; });
  Mat ref(count, 2 * n), raw(count, 2 * n);
  for (int q = 0; q < n; ++q) {
    const Mat y = system::sample_outputs(r.tr, hx[q], times);
    raw.col(q) = y.col(plant::kChannelE);
    raw.col(n + q) = y.col(plant::kChannelM);
    ref.col(q) = s.data.states.col(s.topo.energy_index(hx[q])).segment(start, count);
    ref.col(n + q) = s.data.states.col(s.topo.mass_index(hx[q])).segment(start, count);
  }
  out.uncorrected = mape(raw, ref);
  out.corrected = mape(mc, ref);
  for (const auto& row : r.tr.rows) {
    const Vec z = m.corr->m_scaler.normalize(Mat(row.m_corr.transpose())).row(0).transpose();
    if (row.corrected) out.max_abs_gate = std::max(out.max_abs_gate, z.cwiseAbs().maxCoeff());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tuning

/// Objective for one solver mode: MAPE_all over the tuning window and the
/// wall time (or CPU time) of the simulation call.
inline bayesopt::Objective tuning_objective(const Scenario& s, const Models& m, const PipelineConfig& cfg,
                                            system::SolverMode mode, bool cpu_time = false) {
  return [&s, &m, cfg, mode, cpu_time](const std::vector<double>& theta) {
    system::SystemConfig sc = cfg.system;
    sc.mode = mode;
    bayesopt::apply_theta(sc, bayesopt::space_for(mode), theta);
    const RunScore r = run_closed_loop(s, m, sc, cfg.tune_start, cfg.tune_horizon + 1);
    bayesopt::EvalResult e;
    e.time = cpu_time ? r.cpu_seconds : r.seconds;
    e.failed = r.tr.failed;
    e.error = r.tr.failure;
    e.mape = e.failed ? 0.0 : r.mape_all;
    return e;
  };
}

// ---------------------------------------------------------------------------
// Scale study

struct ScaleRow {
  int n_c = 0, n_v = 0, n_p = 0;
  system::SolverMode mode = system::SolverMode::Algebraic;
  bool failed = false;
  std::string failure;
  double seconds = 0.0;
  long steps = 0;  // recorded samples reached
  long pressure_solves = 0, least_squares_solves = 0, size_switch_solves = 0, rhs_evals = 0;
};

/// One run per (n_c, mode) with n_v = n_c, the models shared across sizes.
inline std::vector<ScaleRow> scale_study(const PipelineConfig& cfg, const Models& m,
                                         const std::vector<system::SolverMode>& modes) {
  std::vector<ScaleRow> rows;
  for (int n : cfg.scale_nc) {
    const long start = m.cond.cfg.T_enc;
    const Scenario s = make_scenario(cfg, n, n, start + cfg.scale_steps + 1);
    for (system::SolverMode mode : modes) {
      system::SystemConfig sc = cfg.system;
      sc.mode = mode;
      ScaleRow row;
      row.n_c = n;
      row.n_v = n;
      row.n_p = s.topo.n_p();
      row.mode = mode;
      const RunScore r = run_closed_loop(s, m, sc, start, cfg.scale_steps);
      row.seconds = r.seconds;
      row.failed = r.tr.failed;
      row.failure = r.tr.failure;
      row.steps = static_cast<long>(std::floor(r.tr.rows.empty() ? 0.0 : r.tr.rows.back().t - start)) + 1;
      row.pressure_solves = r.tr.metrics.pressure_solves;
      row.least_squares_solves = r.tr.metrics.least_squares_solves;
      row.size_switch_solves = r.tr.metrics.size_switch_solves;
      row.rhs_evals = r.tr.metrics.rhs_evals;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace thermoloop::cli
