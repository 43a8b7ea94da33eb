#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ewip/checkpoint.hpp"
#include "ewip/environment.hpp"
#include "ewip/neural.hpp"
#include "ewip/replay_buffer.hpp"

namespace ewip::ddpg {

using neural::Matrix;
using neural::Vector;

struct DdpgConfig {
  int obs_dim = 22;  ///< 22 with error history, 10 without
  std::vector<int> actor_hidden = {128, 128};
  std::vector<int> critic_hidden = {128, 128};
  double actor_lr = 1e-5;
  double critic_lr = 1e-4;
  double l2 = 1e-4;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  double gamma = 0.99;
  double soft_mix = 0.001;
  int minibatch = 64;
  std::size_t buffer_capacity = 1000000;
  int warmup_transitions = 1000;
  int updates_per_step = 1;
  double noise_sigma0 = 0.2;  ///< initial exploration noise, fraction of each actuator limit
  double noise_decay = 0.995;
  int episodes = 2000;

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("DdpgConfig: " + what); };
    if (obs_dim != 10 && obs_dim != 22) fail("obs_dim must be 10 or 22");
    if (!(gamma > 0.0 && gamma < 1.0)) fail("gamma must lie in (0, 1)");
    if (minibatch < 1) fail("minibatch must be positive");
    if (buffer_capacity == 0) fail("buffer capacity must be positive");
    if (episodes < 0) fail("episodes must be nonnegative");
    if (noise_sigma0 < 0.0 || noise_decay <= 0.0) fail("bad exploration noise settings");
  }
};

/// Truncate the full environment observation to the agent's input width
/// (the first 10 entries are the raw state).
inline std::vector<double> slice_observation(const Observation& obs, int dim) {
  if (dim > static_cast<int>(obs.size()))
    throw std::invalid_argument("slice_observation: requested width exceeds observation");
  return {obs.begin(), obs.begin() + dim};
}

struct DdpgAgent {
  DdpgConfig config;
  double tau_max = 0.0;
  double f_max = 0.0;
  neural::Mlp actor, critic, target_actor, target_critic;
  neural::AdamState actor_adam, critic_adam;
  neural::RunningNorm obs_norm;
  std::mt19937_64 rng;
  double noise_sigma = 0.0;  ///< current fraction of limit
  long long episodes_trained = 0;

  static DdpgAgent make(const DdpgConfig& cfg, const SystemParams& plant, std::uint64_t seed) {
    cfg.validate();
    plant.validate();
    DdpgAgent agent;
    agent.config = cfg;
    agent.tau_max = plant.tau_max;
    agent.f_max = plant.f_max;

    Vector limits(2);
    limits << plant.tau_max, plant.f_max;
    std::vector<int> actor_sizes{cfg.obs_dim};
    actor_sizes.insert(actor_sizes.end(), cfg.actor_hidden.begin(), cfg.actor_hidden.end());
    actor_sizes.push_back(2);
    std::vector<int> critic_sizes{cfg.obs_dim + 2};
    critic_sizes.insert(critic_sizes.end(), cfg.critic_hidden.begin(), cfg.critic_hidden.end());
    critic_sizes.push_back(1);

    agent.actor = neural::Mlp::init(actor_sizes, seed, neural::OutputActivation::bounded_tanh, limits);
    agent.critic = neural::Mlp::init(critic_sizes, seed + 1, neural::OutputActivation::linear);
    agent.target_actor = agent.actor;
    agent.target_critic = agent.critic;

    neural::AdamConfig actor_cfg{.lr = cfg.actor_lr, .eps = cfg.adam_eps, .l2 = cfg.l2, .clip = cfg.grad_clip};
    neural::AdamConfig critic_cfg{.lr = cfg.critic_lr, .eps = cfg.adam_eps, .l2 = cfg.l2, .clip = cfg.grad_clip};
    agent.actor_adam = neural::AdamState::make(agent.actor, actor_cfg);
    agent.critic_adam = neural::AdamState::make(agent.critic, critic_cfg);
    agent.obs_norm = neural::RunningNorm(cfg.obs_dim);
    agent.rng.seed(seed + 2);
    agent.noise_sigma = cfg.noise_sigma0;
    return agent;
  }

  Vector normalized(const std::vector<double>& obs) const {
    return obs_norm.normalize(Eigen::Map<const Vector>(obs.data(), obs.size()));
  }

  // actions are scaled by the actuator limits before the concatenation so the
  // critic sees inputs of comparable magnitude
  Matrix critic_input(const Matrix& normalized_obs, const Matrix& actions) const {
    Matrix in(normalized_obs.rows() + 2, normalized_obs.cols());
    in.topRows(normalized_obs.rows()) = normalized_obs;
    in.row(normalized_obs.rows()) = actions.row(0) / tau_max;
    in.row(normalized_obs.rows() + 1) = actions.row(1) / f_max;
    return in;
  }

  /// Deterministic policy.
  ControlInput act(const std::vector<double>& obs) const {
    const Vector a = actor.evaluate(normalized(obs));
    return ControlInput{a(0), a(1)};
  }

  /// Policy plus decaying Gaussian noise, clamped to the actuator box.
  ControlInput exploration_action(const std::vector<double>& obs) {
    ControlInput a = act(obs);
    a.tau += noise_sigma * tau_max * neural::draw_normal(rng);
    a.f_in += noise_sigma * f_max * neural::draw_normal(rng);
    a.tau = std::clamp(a.tau, -tau_max, tau_max);
    a.f_in = std::clamp(a.f_in, -f_max, f_max);
    return a;
  }

  void save(const std::string& path) const {
    io::BinaryWriter w(path);
    io::write_header(w, "ddpg", 1);
    w.u32(static_cast<std::uint32_t>(config.obs_dim));
    w.f64(config.actor_lr);
    w.f64(config.critic_lr);
    w.f64(config.l2);
    w.f64(config.adam_eps);
    w.f64(config.grad_clip);
    w.f64(config.gamma);
    w.f64(config.soft_mix);
    w.u32(static_cast<std::uint32_t>(config.minibatch));
    w.u64(config.buffer_capacity);
    w.u32(static_cast<std::uint32_t>(config.warmup_transitions));
    w.u32(static_cast<std::uint32_t>(config.updates_per_step));
    w.f64(config.noise_sigma0);
    w.f64(config.noise_decay);
    w.u32(static_cast<std::uint32_t>(config.episodes));
    w.f64(tau_max);
    w.f64(f_max);
    io::write_mlp(w, actor);
    io::write_mlp(w, critic);
    io::write_mlp(w, target_actor);
    io::write_mlp(w, target_critic);
    io::write_adam(w, actor_adam);
    io::write_adam(w, critic_adam);
    io::write_norm(w, obs_norm);
    io::write_rng(w, rng);
    w.f64(noise_sigma);
    w.i64(episodes_trained);
    w.close();
  }

  static DdpgAgent load(const std::string& path) {
    io::BinaryReader r(path);
    const auto [kind, version] = io::read_header(r);
    if (kind != "ddpg") throw std::runtime_error("checkpoint kind mismatch: expected ddpg, got " + kind);
    if (version != 1) throw std::runtime_error("unsupported ddpg checkpoint version");
    DdpgAgent agent;
    agent.config.obs_dim = static_cast<int>(r.u32());
    agent.config.actor_lr = r.f64();
    agent.config.critic_lr = r.f64();
    agent.config.l2 = r.f64();
    agent.config.adam_eps = r.f64();
    agent.config.grad_clip = r.f64();
    agent.config.gamma = r.f64();
    agent.config.soft_mix = r.f64();
    agent.config.minibatch = static_cast<int>(r.u32());
    agent.config.buffer_capacity = r.u64();
    agent.config.warmup_transitions = static_cast<int>(r.u32());
    agent.config.updates_per_step = static_cast<int>(r.u32());
    agent.config.noise_sigma0 = r.f64();
    agent.config.noise_decay = r.f64();
    agent.config.episodes = static_cast<int>(r.u32());
    agent.tau_max = r.f64();
    agent.f_max = r.f64();
    agent.actor = io::read_mlp(r);
    agent.critic = io::read_mlp(r);
    agent.target_actor = io::read_mlp(r);
    agent.target_critic = io::read_mlp(r);
    agent.actor_adam = io::read_adam(r);
    agent.critic_adam = io::read_adam(r);
    agent.obs_norm = io::read_norm(r);
    agent.rng = io::read_rng(r);
    agent.noise_sigma = r.f64();
    agent.episodes_trained = r.i64();
    // hidden sizes for bookkeeping only; the nets carry the real shapes
    agent.config.actor_hidden.assign(agent.actor.layer_sizes().begin() + 1,
                                     agent.actor.layer_sizes().end() - 1);
    agent.config.critic_hidden.assign(agent.critic.layer_sizes().begin() + 1,
                                      agent.critic.layer_sizes().end() - 1);
    return agent;
  }
};

/// Raw columns gathered from sampled transitions.
struct MiniBatch {
  Matrix obs;        ///< obs_dim x M
  Matrix actions;    ///< 2 x M
  Vector rewards;    ///< M
  Matrix next_obs;   ///< obs_dim x M
  std::vector<char> terminal;

  static MiniBatch gather(const ReplayBuffer& buffer, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("MiniBatch: empty index set");
    const int dim = static_cast<int>(buffer[idx[0]].s.size());
    MiniBatch b;
    const int m = static_cast<int>(idx.size());
    b.obs.resize(dim, m);
    b.actions.resize(2, m);
    b.rewards.resize(m);
    b.next_obs.resize(dim, m);
    b.terminal.resize(m);
    for (int c = 0; c < m; ++c) {
      const Transition& t = buffer[idx[c]];
      b.obs.col(c) = Eigen::Map<const Vector>(t.s.data(), dim);
      b.actions(0, c) = t.a.tau;
      b.actions(1, c) = t.a.f_in;
      b.rewards(c) = t.r;
      b.next_obs.col(c) = Eigen::Map<const Vector>(t.s_next.data(), dim);
      b.terminal[c] = t.terminal ? 1 : 0;
    }
    return b;
  }

  int size() const { return static_cast<int>(rewards.size()); }
};

/// Bootstrapped regression targets: y = r + gamma * Q'(s', mu'(s')), with the
/// bootstrap dropped on terminal transitions.
inline Vector target_values(const MiniBatch& batch, const DdpgAgent& agent) {
  if (batch.size() == 0) throw std::invalid_argument("target_values: empty batch");
  const Matrix next_norm = agent.obs_norm.normalize_batch(batch.next_obs);
  const Matrix next_actions = agent.target_actor.forward(next_norm);
  const Matrix q_next = agent.target_critic.forward(agent.critic_input(next_norm, next_actions));
  Vector y(batch.size());
  for (int i = 0; i < batch.size(); ++i)
    y(i) = batch.terminal[i] ? batch.rewards(i)
                             : batch.rewards(i) + agent.config.gamma * q_next(0, i);
  return y;
}

/// Mean squared Bellman error over the minibatch; optionally accumulates the
/// critic gradient of that loss.
inline double critic_loss(const MiniBatch& batch, const DdpgAgent& agent,
                          neural::Gradients* grads_out = nullptr) {
  const Vector y = target_values(batch, agent);
  const Matrix obs_norm = agent.obs_norm.normalize_batch(batch.obs);
  neural::Mlp::Tape tape;
  const Matrix q = agent.critic.forward(agent.critic_input(obs_norm, batch.actions), tape);
  const Matrix diff = q - y.transpose();
  const double m = static_cast<double>(batch.size());
  if (grads_out) agent.critic.backward(tape, (2.0 / m) * diff, *grads_out);
  return diff.squaredNorm() / m;
}

/// Deterministic policy gradient of the mean critic value with respect to the
/// actor parameters (an ascent direction), plus the mean Q it evaluated.
inline double actor_gradient(const MiniBatch& batch, const DdpgAgent& agent,
                             neural::Gradients& grads_out) {
  const Matrix obs_norm = agent.obs_norm.normalize_batch(batch.obs);
  neural::Mlp::Tape actor_tape;
  const Matrix actions = agent.actor.forward(obs_norm, actor_tape);
  neural::Mlp::Tape critic_tape;
  const Matrix q = agent.critic.forward(agent.critic_input(obs_norm, actions), critic_tape);

  const double m = static_cast<double>(batch.size());
  neural::Gradients critic_scratch = agent.critic.zero_gradients();
  const Matrix dinput =
      agent.critic.backward(critic_tape, Matrix::Constant(1, batch.size(), 1.0 / m), critic_scratch);
  Matrix action_seed = dinput.bottomRows(2);  // w.r.t. the scaled action inputs
  action_seed.row(0) /= agent.tau_max;
  action_seed.row(1) /= agent.f_max;
  agent.actor.backward(actor_tape, action_seed, grads_out);
  return q.mean();
}

struct UpdateStats {
  double critic_loss = 0.0;
  double actor_objective = 0.0;
};

/// One full learning step: critic regression, deterministic policy ascent,
/// soft target refresh. Throws on non-finite gradients.
inline UpdateStats one_update(DdpgAgent& agent, const MiniBatch& batch) {
  UpdateStats stats;
  neural::Gradients critic_grads = agent.critic.zero_gradients();
  stats.critic_loss = critic_loss(batch, agent, &critic_grads);
  if (!std::isfinite(stats.critic_loss)) throw std::runtime_error("ddpg: non-finite critic loss");
  neural::adam_update(agent.critic, critic_grads, agent.critic_adam);

  neural::Gradients ascent = agent.actor.zero_gradients();
  stats.actor_objective = actor_gradient(batch, agent, ascent);
  ascent.scale(-1.0);  // maximize mean Q with a minimizing optimizer
  neural::adam_update(agent.actor, ascent, agent.actor_adam);

  neural::soft_update(agent.target_actor, agent.actor, agent.config.soft_mix);
  neural::soft_update(agent.target_critic, agent.critic, agent.config.soft_mix);
  return stats;
}

struct EpisodeLog {
  int episode = 0;
  int steps = 0;
  double total_reward = 0.0;
  double critic_loss = 0.0;      ///< mean over the episode's updates
  double actor_objective = 0.0;  ///< mean over the episode's updates
  double noise_sigma = 0.0;
};

struct TrainLog {
  std::vector<EpisodeLog> episodes;
  bool diverged = false;
  std::string divergence_reason;
};

using EpisodeHook = std::function<void(const EpisodeLog&, DdpgAgent&)>;

/// Rollout/update loop. Episode e resets the environment with run_seed + e,
/// so a (config, seed) pair pins the whole run. On divergence the loop stops
/// and the log carries the reason; the hook may checkpoint.
inline TrainLog train(Environment& env, DdpgAgent& agent, std::uint64_t run_seed,
                      const EpisodeHook& on_episode = {}) {
  agent.config.validate();
  ReplayBuffer buffer(agent.config.buffer_capacity);
  TrainLog log;

  for (int episode = 0; episode < agent.config.episodes; ++episode) {
    Observation raw = env.reset(run_seed + static_cast<std::uint64_t>(episode));
    std::vector<double> obs = slice_observation(raw, agent.config.obs_dim);
    agent.obs_norm.observe(Eigen::Map<const Vector>(obs.data(), obs.size()));

    EpisodeLog ep;
    ep.episode = episode;
    ep.noise_sigma = agent.noise_sigma;
    int updates = 0;

    while (!env.finished()) {
      const ControlInput action = agent.exploration_action(obs);
      const StepResult result = env.step(action);
      std::vector<double> next_obs = slice_observation(result.observation, agent.config.obs_dim);
      agent.obs_norm.observe(Eigen::Map<const Vector>(next_obs.data(), next_obs.size()));

      buffer.push(Transition{obs, result.diagnostics.applied, result.reward, next_obs,
                             result.done || result.diagnostics.truncated});
      obs = std::move(next_obs);
      ep.total_reward += result.reward;
      ++ep.steps;

      if (buffer.size() >= static_cast<std::size_t>(agent.config.warmup_transitions)) {
        for (int u = 0; u < agent.config.updates_per_step; ++u) {
          const auto idx = buffer.sample_indices(
              std::min<std::size_t>(agent.config.minibatch, buffer.size()), agent.rng);
          try {
            const UpdateStats stats = one_update(agent, MiniBatch::gather(buffer, idx));
            ep.critic_loss += stats.critic_loss;
            ep.actor_objective += stats.actor_objective;
            ++updates;
          } catch (const std::runtime_error& e) {
            log.diverged = true;
            log.divergence_reason = e.what();
            break;
          }
        }
      }
      if (log.diverged) break;
    }

    if (updates > 0) {
      ep.critic_loss /= updates;
      ep.actor_objective /= updates;
    }
    log.episodes.push_back(ep);
    agent.noise_sigma *= agent.config.noise_decay;
    ++agent.episodes_trained;
    if (on_episode) on_episode(ep, agent);
    if (log.diverged) break;
  }
  return log;
}

}  // namespace ewip::ddpg
