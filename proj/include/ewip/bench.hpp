#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "ewip/config.hpp"
#include "ewip/ddpg.hpp"
#include "ewip/environment.hpp"
#include "ewip/mpc.hpp"
#include "ewip/ppo.hpp"
#include "ewip/trace.hpp"

namespace ewip::bench {

/// Uniform evaluation-time policy interface. RL adapters read the
/// observation; the MPC adapter reads the state and builds its reference
/// window from the trajectory.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual ControlInput act(const Observation& obs, const State& state, double t) = 0;
  virtual std::string name() const = 0;
  virtual void reset() {}
};

class MpcAdapter : public Controller {
 public:
  MpcAdapter(const SystemParams& plant, const mpc::MpcConfig& config,
             ReferenceTrajectory trajectory)
      : inner_(plant, config), trajectory_(std::move(trajectory)) {}

  ControlInput act(const Observation&, const State& state, double t) override {
    return inner_.control(state, mpc::reference_window(trajectory_, t, inner_.config()));
  }
  std::string name() const override { return "mpc"; }
  void reset() override { inner_.reset(); }
  mpc::MpcController& controller() { return inner_; }

 private:
  mpc::MpcController inner_;
  ReferenceTrajectory trajectory_;
};

class DdpgAdapter : public Controller {
 public:
  DdpgAdapter(ddpg::DdpgAgent agent, std::string label)
      : agent_(std::move(agent)), label_(std::move(label)) {}

  ControlInput act(const Observation& obs, const State&, double) override {
    return agent_.act(ddpg::slice_observation(obs, agent_.config.obs_dim));
  }
  std::string name() const override { return label_; }

 private:
  ddpg::DdpgAgent agent_;
  std::string label_;
};

class PpoAdapter : public Controller {
 public:
  PpoAdapter(ppo::PpoAgent agent, std::string label)
      : agent_(std::move(agent)), label_(std::move(label)) {}

  ControlInput act(const Observation& obs, const State&, double) override {
    // deterministic evaluation: the policy mean
    return agent_.mean_action(ddpg::slice_observation(obs, agent_.config.obs_dim));
  }
  std::string name() const override { return label_; }

 private:
  ppo::PpoAgent agent_;
  std::string label_;
};

/// Instantiates the controller an experiment names. RL kinds require a
/// checkpoint path.
inline std::unique_ptr<Controller> make_controller(const ExperimentConfig& cfg,
                                                   const std::string& checkpoint_path = {}) {
  if (cfg.controller == "mpc")
    return std::make_unique<MpcAdapter>(cfg.plant, cfg.mpc, cfg.trajectory);
  if (checkpoint_path.empty())
    throw std::invalid_argument("controller '" + cfg.controller + "' needs a checkpoint");
  if (cfg.is_ddpg())
    return std::make_unique<DdpgAdapter>(ddpg::DdpgAgent::load(checkpoint_path), cfg.controller);
  return std::make_unique<PpoAdapter>(ppo::PpoAgent::load(checkpoint_path), cfg.controller);
}

struct EvaluationResult {
  std::vector<TraceRow> trace;
  MetricsReport metrics;
};

/// One deterministic episode on the configured trajectory. A fall flags the
/// metrics and keeps the partial trace.
inline EvaluationResult evaluate(Controller& controller, const SystemParams& plant,
                                 const EnvConfig& env_cfg, const ReferenceTrajectory& trajectory,
                                 std::uint64_t seed) {
  EvaluationResult result;
  if (trajectory.segments.empty()) {
    result.metrics = compute_metrics({}, true);
    return result;
  }
  Environment env(plant, env_cfg, trajectory);
  Observation obs = env.reset(seed);
  controller.reset();
  while (!env.finished()) {
    const ControlInput u = controller.act(obs, env.state(), env.time());
    const StepResult r = env.step(u);
    const State& s = env.state();
    TraceRow row;
    row.t = r.diagnostics.t;
    row.x = s.x;
    row.z = s.z;
    row.theta = s.theta;
    row.phi = s.phi;
    row.l = s.l;
    row.xd = s.xd;
    row.zd = s.zd;
    row.thetad = s.thetad;
    row.phid = s.phid;
    row.ld = s.ld;
    row.tau = r.diagnostics.applied.tau;
    row.f_in = r.diagnostics.applied.f_in;
    const auto [x_ref, z_ref] = trajectory.at(row.t);
    row.x_ref = x_ref;
    row.z_ref = z_ref;
    row.e_x = r.diagnostics.e_x;
    row.e_z = r.diagnostics.e_z;
    row.reward = r.reward;
    row.power = row.tau * row.phid;
    result.trace.push_back(row);
    obs = r.observation;
  }
  result.metrics = compute_metrics(result.trace, env.failed());
  return result;
}

inline json metrics_to_json(const MetricsReport& m) {
  return json{{"rmse_x", m.rmse_x},
              {"final_position_error", m.final_position_error},
              {"max_abs_theta", m.max_abs_theta},
              {"max_abs_xd", m.max_abs_xd},
              {"total_energy", m.total_energy},
              {"episode_return", m.episode_return},
              {"failed", m.failed}};
}

inline MetricsReport metrics_from_json(const json& j) {
  MetricsReport m;
  m.rmse_x = j.at("rmse_x").get<double>();
  m.final_position_error = j.at("final_position_error").get<double>();
  m.max_abs_theta = j.at("max_abs_theta").get<double>();
  m.max_abs_xd = j.at("max_abs_xd").get<double>();
  m.total_energy = j.at("total_energy").get<double>();
  m.episode_return = j.at("episode_return").get<double>();
  m.failed = j.at("failed").get<bool>();
  return m;
}

struct Report {
  std::string controller;
  std::uint64_t seed = 0;
  std::string trace_path;
  MetricsReport metrics;
  json trajectory;
};

inline void write_report(const std::string& path, const Report& report) {
  json j{{"controller", report.controller},
         {"seed", report.seed},
         {"trace", report.trace_path},
         {"metrics", metrics_to_json(report.metrics)},
         {"trajectory", report.trajectory}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << j.dump(2) << '\n';
}

inline Report read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report: " + path);
  const json j = json::parse(in);
  Report report;
  report.controller = j.at("controller").get<std::string>();
  report.seed = j.at("seed").get<std::uint64_t>();
  report.trace_path = j.at("trace").get<std::string>();
  report.metrics = metrics_from_json(j.at("metrics"));
  report.trajectory = j.at("trajectory");
  return report;
}

/// Aligned metric table over several evaluation reports. Refuses to compare
/// runs of different trajectories.
inline std::string compare_table(const std::vector<Report>& reports) {
  if (reports.size() < 2) throw std::invalid_argument("compare: need at least two reports");
  for (std::size_t i = 1; i < reports.size(); ++i)
    if (reports[i].trajectory != reports[0].trajectory)
      throw std::invalid_argument("compare: report '" + reports[i].controller +
                                  "' was evaluated on a different trajectory");

  std::ostringstream out;
  out << std::left << std::setw(22) << "metric";
  for (const Report& r : reports) out << std::right << std::setw(14) << r.controller;
  out << '\n';
  const auto row = [&](const std::string& label, auto getter) {
    out << std::left << std::setw(22) << label;
    for (const Report& r : reports)
      out << std::right << std::setw(14) << std::setprecision(5) << getter(r.metrics);
    out << '\n';
  };
  row("rmse_x [m]", [](const MetricsReport& m) { return m.rmse_x; });
  row("final_pos_error [m]", [](const MetricsReport& m) { return m.final_position_error; });
  row("max_abs_theta [rad]", [](const MetricsReport& m) { return m.max_abs_theta; });
  row("max_abs_xd [m/s]", [](const MetricsReport& m) { return m.max_abs_xd; });
  row("total_energy [J]", [](const MetricsReport& m) { return m.total_energy; });
  row("episode_return", [](const MetricsReport& m) { return m.episode_return; });
  out << std::left << std::setw(22) << "failed";
  for (const Report& r : reports)
    out << std::right << std::setw(14) << (r.metrics.failed ? "yes" : "no");
  out << '\n';
  return out.str();
}

/// Plain-text gnuplot scripts overlaying the traced quantities.
inline void write_plot_scripts(const std::string& dir, const std::vector<Report>& reports) {
  const auto write_one = [&](const std::string& file, const std::string& ylabel, int column) {
    std::ofstream out(std::filesystem::path(dir) / file);
    if (!out) throw std::runtime_error("cannot write plot script in " + dir);
    out << "set datafile separator ','\n";
    out << "set xlabel 't [s]'\n";
    out << "set ylabel '" << ylabel << "'\n";
    out << "plot ";
    for (std::size_t i = 0; i < reports.size(); ++i) {
      if (i) out << ", \\\n     ";
      out << "'" << reports[i].trace_path << "' using 1:" << column
          << " with lines title '" << reports[i].controller << "'";
    }
    out << "\n";
  };
  write_one("plot_states.gp", "x [m]", 2);
  write_one("plot_theta.gp", "theta [rad]", 4);
  write_one("plot_torque.gp", "tau [N m]", 12);
  write_one("plot_power.gp", "P [W]", 19);
}

enum class SweepGrid { x_theta, thetad_theta };

struct SweepPoint {
  double v1 = 0, v2 = 0;
  double tau = 0, f_in = 0;
};

/// Instantaneous controller effort over a grid of initial conditions, the
/// remaining states held at the reference.
inline std::vector<SweepPoint> effort_response_sweep(Controller& controller,
                                                     const SystemParams& plant,
                                                     const EnvConfig& env_cfg, SweepGrid grid,
                                                     double v1_max, double v2_max, int n) {
  if (n < 1) throw std::invalid_argument("sweep: grid size must be positive");
  std::vector<SweepPoint> points;
  points.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double v1 = n == 1 ? 0.0 : -v1_max + 2.0 * v1_max * i / (n - 1);
      const double v2 = n == 1 ? 0.0 : -v2_max + 2.0 * v2_max * j / (n - 1);
      State s;
      s.z = plant.R_w;
      s.l = plant.l_ref();
      if (grid == SweepGrid::x_theta) {
        s.x = v1;
        s.theta = v2;
      } else {
        s.thetad = v1;
        s.theta = v2;
      }
      const Observation obs =
          Environment::build_observation(s, {}, env_cfg.history_depth);
      controller.reset();
      const ControlInput u = controller.act(obs, s, 0.0);
      points.push_back({v1, v2, u.tau, u.f_in});
    }
  }
  return points;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& points,
                            SweepGrid grid) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write sweep: " + path);
  out << (grid == SweepGrid::x_theta ? "x,theta,tau,f_in" : "thetad,theta,tau,f_in") << '\n';
  for (const SweepPoint& p : points)
    out << format_double(p.v1) << ',' << format_double(p.v2) << ',' << format_double(p.tau)
        << ',' << format_double(p.f_in) << '\n';
}

struct TrainingOutcome {
  bool diverged = false;
  std::string divergence_reason;
  double best_eval_return = -std::numeric_limits<double>::infinity();
  int episodes_or_updates = 0;
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string log_path;
};

/// Deterministic evaluation episode used during training to retain the
/// best-return checkpoint.
inline double training_eval_return(const ExperimentConfig& cfg, Controller& controller,
                                   std::uint64_t eval_seed) {
  return evaluate(controller, cfg.plant, cfg.env, cfg.trajectory, eval_seed)
      .metrics.episode_return;
}

/// Dispatches to the matching trainer, logging per-episode (ddpg) or
/// per-update (ppo) rows, evaluating with exploration disabled every
/// eval_period, and retaining the best-return checkpoint.
inline TrainingOutcome run_training(const ExperimentConfig& cfg) {
  if (!cfg.is_rl()) throw std::invalid_argument("run_training: controller must be an RL kind");
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  TrainingOutcome outcome;
  outcome.log_path = (fs::path(cfg.output_dir) / "training_log.csv").string();
  outcome.best_checkpoint = (fs::path(cfg.output_dir) / "best.ckpt").string();
  outcome.last_checkpoint = (fs::path(cfg.output_dir) / "last.ckpt").string();
  std::ofstream log(outcome.log_path);
  if (!log) throw std::runtime_error("cannot write training log: " + outcome.log_path);

  Environment env(cfg.plant, cfg.env, cfg.trajectory);
  const std::uint64_t eval_seed = cfg.seed + 0x9e3779b97f4a7c15ull;

  if (cfg.is_ddpg()) {
    ddpg::DdpgAgent agent = ddpg::DdpgAgent::make(cfg.ddpg, cfg.plant, cfg.seed);
    log << "episode,steps,total_reward,critic_loss,actor_objective,noise_sigma\n";
    const auto hook = [&](const ddpg::EpisodeLog& ep, ddpg::DdpgAgent& a) {
      log << ep.episode << ',' << ep.steps << ',' << format_double(ep.total_reward) << ','
          << format_double(ep.critic_loss) << ',' << format_double(ep.actor_objective) << ','
          << format_double(ep.noise_sigma) << '\n';
      if (cfg.eval_period > 0 && (ep.episode + 1) % cfg.eval_period == 0) {
        DdpgAdapter probe(a, cfg.controller);
        const double ret = training_eval_return(cfg, probe, eval_seed);
        if (ret > outcome.best_eval_return) {
          outcome.best_eval_return = ret;
          a.save(outcome.best_checkpoint);
        }
      }
      if (cfg.checkpoint_period > 0 && (ep.episode + 1) % cfg.checkpoint_period == 0)
        a.save(outcome.last_checkpoint);
    };
    const ddpg::TrainLog tl = ddpg::train(env, agent, cfg.seed, hook);
    agent.save(outcome.last_checkpoint);
    if (!fs::exists(outcome.best_checkpoint)) agent.save(outcome.best_checkpoint);
    outcome.diverged = tl.diverged;
    outcome.divergence_reason = tl.divergence_reason;
    outcome.episodes_or_updates = static_cast<int>(tl.episodes.size());
  } else {
    ppo::PpoAgent agent = ppo::PpoAgent::make(cfg.ppo, cfg.plant, cfg.seed);
    log << "update_index,mean_ratio,clip_fraction,surrogate,value_loss,entropy,"
           "mean_episode_reward\n";
    const auto hook = [&](const ppo::UpdateStats& st, ppo::PpoAgent& a) {
      log << st.update_index << ',' << format_double(st.mean_ratio) << ','
          << format_double(st.clip_fraction) << ',' << format_double(st.surrogate) << ','
          << format_double(st.value_loss) << ',' << format_double(st.entropy) << ','
          << format_double(st.mean_episode_reward) << '\n';
      if (cfg.eval_period > 0 && (st.update_index + 1) % cfg.eval_period == 0) {
        PpoAdapter probe(a, cfg.controller);
        const double ret = training_eval_return(cfg, probe, eval_seed);
        if (ret > outcome.best_eval_return) {
          outcome.best_eval_return = ret;
          a.save(outcome.best_checkpoint);
        }
      }
      if (cfg.checkpoint_period > 0 && (st.update_index + 1) % cfg.checkpoint_period == 0)
        a.save(outcome.last_checkpoint);
    };
    const ppo::TrainLog tl = ppo::train(env, agent, cfg.seed, hook);
    agent.save(outcome.last_checkpoint);
    if (!fs::exists(outcome.best_checkpoint)) agent.save(outcome.best_checkpoint);
    outcome.diverged = tl.diverged;
    outcome.divergence_reason = tl.divergence_reason;
    outcome.episodes_or_updates = static_cast<int>(tl.updates.size());
  }
  return outcome;
}

/// Full evaluation flow: run the episode, emit trace CSV and report JSON.
inline Report run_evaluation(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                             std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  auto controller = make_controller(cfg, checkpoint_path);
  const EvaluationResult result =
      evaluate(*controller, cfg.plant, cfg.env, cfg.trajectory, seed);
  Report report;
  report.controller = controller->name();
  report.seed = seed;
  report.trace_path = (fs::path(cfg.output_dir) / "trace.csv").string();
  report.metrics = result.metrics;
  report.trajectory = trajectory_to_json(cfg.trajectory);
  write_trace_csv(report.trace_path, result.trace);
  write_report((fs::path(cfg.output_dir) / "report.json").string(), report);
  return report;
}

}  // namespace ewip::bench
