#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ewip/ddpg.hpp"
#include "ewip/environment.hpp"
#include "ewip/mpc.hpp"
#include "ewip/ppo.hpp"
#include "ewip/trajectory.hpp"

namespace ewip {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SystemParams, m_w, m_p, R_w, I, g, l_min, l_max,
                                                mu, tau_max, f_max)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EnvConfig, sample_time, integrator_dt,
                                                episode_length, history_depth, w_theta,
                                                w_theta_rate, w_input, w_error_x, w_error_z,
                                                w_prev_rates, reward_offset, angle_penalty,
                                                position_penalty, theta_fail, x_fail,
                                                init_theta_noise)

namespace ddpg {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DdpgConfig, obs_dim, actor_hidden, critic_hidden,
                                                actor_lr, critic_lr, l2, adam_eps, grad_clip,
                                                gamma, soft_mix, minibatch, buffer_capacity,
                                                warmup_transitions, updates_per_step, noise_sigma0,
                                                noise_decay, episodes)
}  // namespace ddpg

namespace ppo {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PpoConfig, obs_dim, actor_hidden, critic_hidden,
                                                actor_lr, critic_lr, l2, adam_eps, grad_clip,
                                                gamma, clip_epsilon, epochs, minibatch, horizon,
                                                entropy_coef, value_coef, init_sigma_frac, updates)
}  // namespace ppo

namespace mpc {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MpcConfig, sample_time, prediction_horizon,
                                                control_horizon, w_tau, w_f_in, w_dtau, w_df_in,
                                                w_x, w_zp, theta_bound, slack_penalty)
}  // namespace mpc

namespace bench {

using nlohmann::json;

inline json trajectory_to_json(const ReferenceTrajectory& traj) {
  json j;
  j["z_ref"] = traj.z_ref;
  j["segments"] = json::array();
  for (const auto& seg : traj.segments)
    j["segments"].push_back({seg.t_start, seg.t_end, seg.x_target});
  return j;
}

inline ReferenceTrajectory trajectory_from_json(const json& j) {
  ReferenceTrajectory traj = ReferenceTrajectory::point_to_point();
  if (j.contains("z_ref")) traj.z_ref = j.at("z_ref").get<double>();
  if (j.contains("segments")) {
    traj.segments.clear();
    for (const auto& seg : j.at("segments")) {
      if (!seg.is_array() || seg.size() != 3)
        throw std::invalid_argument("trajectory segment must be [t_start, t_end, x_target]");
      traj.segments.push_back(
          {seg[0].get<double>(), seg[1].get<double>(), seg[2].get<double>()});
    }
  }
  return traj;
}

/// One experiment: controller kind, seed, plant, task, per-controller
/// settings, and output location. Loaded from a JSON document; an "include"
/// key pulls in a base document (shared plant parameters), with the including
/// file's keys taking precedence.
struct ExperimentConfig {
  std::string controller = "mpc";  ///< ddpg | ddpg-eh | ppo | ppo-eh | mpc
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  int eval_period = 25;        ///< episodes (ddpg) or updates (ppo) between eval runs
  int checkpoint_period = 0;   ///< periodic checkpoint cadence; 0 disables
  SystemParams plant;
  EnvConfig env;
  ddpg::DdpgConfig ddpg;
  ppo::PpoConfig ppo;
  mpc::MpcConfig mpc;
  ReferenceTrajectory trajectory = ReferenceTrajectory::point_to_point();

  bool is_rl() const { return controller != "mpc"; }
  bool uses_error_history() const {
    return controller == "ddpg-eh" || controller == "ppo-eh";
  }
  bool is_ddpg() const { return controller == "ddpg" || controller == "ddpg-eh"; }
  bool is_ppo() const { return controller == "ppo" || controller == "ppo-eh"; }

  static json load_merged_json(const std::filesystem::path& path,
                               std::set<std::filesystem::path>* seen = nullptr) {
    std::set<std::filesystem::path> local;
    if (!seen) seen = &local;
    const auto canonical = std::filesystem::weakly_canonical(path);
    if (!seen->insert(canonical).second)
      throw std::invalid_argument("config include cycle at " + path.string());
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config: " + path.string());
    json j = json::parse(in);
    if (j.contains("include")) {
      const std::filesystem::path base =
          path.parent_path() / j.at("include").get<std::string>();
      json merged = load_merged_json(base, seen);
      j.erase("include");
      merged.merge_patch(j);
      return merged;
    }
    return j;
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig cfg;
    if (j.contains("controller")) cfg.controller = j.at("controller").get<std::string>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("eval_period")) cfg.eval_period = j.at("eval_period").get<int>();
    if (j.contains("checkpoint_period"))
      cfg.checkpoint_period = j.at("checkpoint_period").get<int>();
    if (j.contains("plant")) cfg.plant = j.at("plant").get<SystemParams>();
    if (j.contains("env")) cfg.env = j.at("env").get<EnvConfig>();
    if (j.contains("ddpg")) cfg.ddpg = j.at("ddpg").get<ddpg::DdpgConfig>();
    if (j.contains("ppo")) cfg.ppo = j.at("ppo").get<ppo::PpoConfig>();
    if (j.contains("mpc")) cfg.mpc = j.at("mpc").get<mpc::MpcConfig>();
    if (j.contains("trajectory")) cfg.trajectory = trajectory_from_json(j.at("trajectory"));

    // observation width follows the controller kind unless pinned explicitly
    const bool eh = cfg.uses_error_history();
    const int expected = eh ? 10 + 2 * cfg.env.history_depth : 10;
    if (cfg.is_ddpg()) {
      const bool pinned = j.contains("ddpg") && j.at("ddpg").contains("obs_dim");
      if (pinned && cfg.ddpg.obs_dim != expected)
        throw std::invalid_argument("config: ddpg obs_dim " + std::to_string(cfg.ddpg.obs_dim) +
                                    " conflicts with controller '" + cfg.controller + "'");
      cfg.ddpg.obs_dim = expected;
    }
    if (cfg.is_ppo()) {
      const bool pinned = j.contains("ppo") && j.at("ppo").contains("obs_dim");
      if (pinned && cfg.ppo.obs_dim != expected)
        throw std::invalid_argument("config: ppo obs_dim " + std::to_string(cfg.ppo.obs_dim) +
                                    " conflicts with controller '" + cfg.controller + "'");
      cfg.ppo.obs_dim = expected;
    }
    return cfg;
  }

  static ExperimentConfig load(const std::string& path) {
    return from_json(load_merged_json(path));
  }

  /// Throws on hard errors; returns human-readable warnings.
  std::vector<std::string> validate() const {
    static const std::set<std::string> kinds{"ddpg", "ddpg-eh", "ppo", "ppo-eh", "mpc"};
    if (!kinds.count(controller))
      throw std::invalid_argument("config: unknown controller '" + controller + "'");
    plant.validate();
    env.validate();
    trajectory.validate();
    if (is_ddpg()) ddpg.validate();
    if (is_ppo()) ppo.validate();
    if (controller == "mpc") mpc.validate();

    std::vector<std::string> warnings;
    if (is_ppo() && std::abs(env.sample_time - 0.01) > 1e-12)
      warnings.push_back("ppo sample_time is " + std::to_string(env.sample_time) +
                         " s; the reference setup uses 0.01 s");
    if (is_ddpg() && std::abs(env.sample_time - 0.05) > 1e-12)
      warnings.push_back("ddpg sample_time is " + std::to_string(env.sample_time) +
                         " s; the reference setup uses 0.05 s");
    return warnings;
  }
};

}  // namespace bench
}  // namespace ewip
