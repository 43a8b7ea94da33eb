#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ewip/checkpoint.hpp"
#include "ewip/ddpg.hpp"  // slice_observation
#include "ewip/environment.hpp"
#include "ewip/neural.hpp"

namespace ewip::ppo {

using neural::Matrix;
using neural::Vector;

struct PpoConfig {
  int obs_dim = 22;
  std::vector<int> actor_hidden = {128, 128};
  std::vector<int> critic_hidden = {128, 128};
  double actor_lr = 1e-4;
  double critic_lr = 1e-4;
  double l2 = 1e-4;
  double adam_eps = 1e-8;
  double grad_clip = 10.0;
  double gamma = 0.99;
  double clip_epsilon = 0.2;
  int epochs = 10;
  int minibatch = 128;
  int horizon = 1000;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double init_sigma_frac = 0.1;  ///< initial std as a fraction of each actuator limit
  int updates = 500;

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("PpoConfig: " + what); };
    if (obs_dim != 10 && obs_dim != 22) fail("obs_dim must be 10 or 22");
    if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
    if (!(clip_epsilon >= 0.0 && clip_epsilon < 1.0)) fail("clip epsilon must lie in [0, 1)");
    if (epochs < 1 || minibatch < 1 || horizon < 1) fail("epochs, minibatch, horizon must be positive");
    if (updates < 0) fail("updates must be nonnegative");
    if (!(init_sigma_frac > 0.0)) fail("initial sigma must be positive");
  }
};

struct RolloutStep {
  std::vector<double> s;  ///< raw observation slice
  ControlInput a;         ///< sampled action (pre-clamp; the plant clamps on ingest)
  double log_prob = 0.0;
  double r = 0.0;
  double v = 0.0;
  bool terminal = false;
};

struct Rollout {
  std::vector<RolloutStep> steps;
  double bootstrap_value = 0.0;  ///< V(s_T); unused past a terminal final step
  std::vector<double> completed_episode_returns;
};

struct PpoAgent {
  PpoConfig config;
  double tau_max = 0.0;
  double f_max = 0.0;
  neural::Mlp actor_mean;
  neural::Mlp critic;
  Vector log_std;  ///< per-dimension, state-independent
  neural::AdamState actor_adam, critic_adam;
  neural::AdamVector log_std_adam;
  neural::RunningNorm obs_norm;
  std::mt19937_64 rng;
  long long updates_done = 0;

  static PpoAgent make(const PpoConfig& cfg, const SystemParams& plant, std::uint64_t seed) {
    cfg.validate();
    plant.validate();
    PpoAgent agent;
    agent.config = cfg;
    agent.tau_max = plant.tau_max;
    agent.f_max = plant.f_max;

    Vector limits(2);
    limits << plant.tau_max, plant.f_max;
    std::vector<int> actor_sizes{cfg.obs_dim};
    actor_sizes.insert(actor_sizes.end(), cfg.actor_hidden.begin(), cfg.actor_hidden.end());
    actor_sizes.push_back(2);
    std::vector<int> critic_sizes{cfg.obs_dim};
    critic_sizes.insert(critic_sizes.end(), cfg.critic_hidden.begin(), cfg.critic_hidden.end());
    critic_sizes.push_back(1);

    agent.actor_mean =
        neural::Mlp::init(actor_sizes, seed, neural::OutputActivation::bounded_tanh, limits);
    agent.critic = neural::Mlp::init(critic_sizes, seed + 1, neural::OutputActivation::linear);
    agent.log_std = (cfg.init_sigma_frac * limits.array()).log().matrix();

    neural::AdamConfig actor_cfg{.lr = cfg.actor_lr, .eps = cfg.adam_eps, .l2 = cfg.l2, .clip = cfg.grad_clip};
    neural::AdamConfig critic_cfg{.lr = cfg.critic_lr, .eps = cfg.adam_eps, .l2 = cfg.l2, .clip = cfg.grad_clip};
    neural::AdamConfig std_cfg = actor_cfg;
    std_cfg.l2 = 0.0;  // no shrinkage toward sigma = 1
    agent.actor_adam = neural::AdamState::make(agent.actor_mean, actor_cfg);
    agent.critic_adam = neural::AdamState::make(agent.critic, critic_cfg);
    agent.log_std_adam = neural::AdamVector::make(agent.log_std, std_cfg);
    agent.obs_norm = neural::RunningNorm(cfg.obs_dim);
    agent.rng.seed(seed + 2);
    return agent;
  }

  Vector normalized(const std::vector<double>& obs) const {
    return obs_norm.normalize(Eigen::Map<const Vector>(obs.data(), obs.size()));
  }

  Vector sigma() const { return log_std.array().exp().matrix(); }

  /// Deterministic evaluation policy: the mean network output.
  ControlInput mean_action(const std::vector<double>& obs) const {
    const Vector m = actor_mean.evaluate(normalized(obs));
    return ControlInput{m(0), m(1)};
  }

  double state_value(const std::vector<double>& obs) const {
    return critic.evaluate(normalized(obs))(0);
  }

  /// Diagonal Gaussian log density of action a at the mean for this state.
  double log_prob(const std::vector<double>& obs, const ControlInput& a) const {
    const Vector m = actor_mean.evaluate(normalized(obs));
    const Vector sd = sigma();
    double lp = 0.0;
    const double a_arr[2] = {a.tau, a.f_in};
    for (int d = 0; d < 2; ++d) {
      const double z = (a_arr[d] - m(d)) / sd(d);
      lp += -0.5 * z * z - log_std(d) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    return lp;
  }

  std::pair<ControlInput, double> sample_action(const std::vector<double>& obs) {
    const Vector m = actor_mean.evaluate(normalized(obs));
    const Vector sd = sigma();
    ControlInput a{m(0) + sd(0) * neural::draw_normal(rng),
                   m(1) + sd(1) * neural::draw_normal(rng)};
    return {a, log_prob(obs, a)};
  }

  double entropy() const {
    return log_std.sum() + 0.5 * 2.0 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  }

  void save(const std::string& path) const {
    io::BinaryWriter w(path);
    io::write_header(w, "ppo", 1);
    w.u32(static_cast<std::uint32_t>(config.obs_dim));
    w.f64(config.actor_lr);
    w.f64(config.critic_lr);
    w.f64(config.l2);
    w.f64(config.adam_eps);
    w.f64(config.grad_clip);
    w.f64(config.gamma);
    w.f64(config.clip_epsilon);
    w.u32(static_cast<std::uint32_t>(config.epochs));
    w.u32(static_cast<std::uint32_t>(config.minibatch));
    w.u32(static_cast<std::uint32_t>(config.horizon));
    w.f64(config.entropy_coef);
    w.f64(config.value_coef);
    w.f64(config.init_sigma_frac);
    w.u32(static_cast<std::uint32_t>(config.updates));
    w.f64(tau_max);
    w.f64(f_max);
    io::write_mlp(w, actor_mean);
    io::write_mlp(w, critic);
    w.vec(log_std);
    io::write_adam(w, actor_adam);
    io::write_adam(w, critic_adam);
    io::write_adam_vector(w, log_std_adam);
    io::write_norm(w, obs_norm);
    io::write_rng(w, rng);
    w.i64(updates_done);
    w.close();
  }

  static PpoAgent load(const std::string& path) {
    io::BinaryReader r(path);
    const auto [kind, version] = io::read_header(r);
    if (kind != "ppo") throw std::runtime_error("checkpoint kind mismatch: expected ppo, got " + kind);
    if (version != 1) throw std::runtime_error("unsupported ppo checkpoint version");
    PpoAgent agent;
    agent.config.obs_dim = static_cast<int>(r.u32());
    agent.config.actor_lr = r.f64();
    agent.config.critic_lr = r.f64();
    agent.config.l2 = r.f64();
    agent.config.adam_eps = r.f64();
    agent.config.grad_clip = r.f64();
    agent.config.gamma = r.f64();
    agent.config.clip_epsilon = r.f64();
    agent.config.epochs = static_cast<int>(r.u32());
    agent.config.minibatch = static_cast<int>(r.u32());
    agent.config.horizon = static_cast<int>(r.u32());
    agent.config.entropy_coef = r.f64();
    agent.config.value_coef = r.f64();
    agent.config.init_sigma_frac = r.f64();
    agent.config.updates = static_cast<int>(r.u32());
    agent.tau_max = r.f64();
    agent.f_max = r.f64();
    agent.actor_mean = io::read_mlp(r);
    agent.critic = io::read_mlp(r);
    agent.log_std = r.vec();
    agent.actor_adam = io::read_adam(r);
    agent.critic_adam = io::read_adam(r);
    agent.log_std_adam = io::read_adam_vector(r);
    agent.obs_norm = io::read_norm(r);
    agent.rng = io::read_rng(r);
    agent.updates_done = r.i64();
    agent.config.actor_hidden.assign(agent.actor_mean.layer_sizes().begin() + 1,
                                     agent.actor_mean.layer_sizes().end() - 1);
    agent.config.critic_hidden.assign(agent.critic.layer_sizes().begin() + 1,
                                      agent.critic.layer_sizes().end() - 1);
    return agent;
  }
};

/// Finite-horizon advantage by backward recursion: the discounted tail of
/// rewards plus the bootstrap value at the horizon, minus the state value.
/// Terminal steps drop the bootstrap and cut the recursion.
inline Vector advantages(const Rollout& rollout, double gamma) {
  const int n = static_cast<int>(rollout.steps.size());
  Vector adv(n);
  double tail = rollout.bootstrap_value;
  for (int t = n - 1; t >= 0; --t) {
    const RolloutStep& step = rollout.steps[t];
    const double ret = step.terminal ? step.r : step.r + gamma * tail;
    adv(t) = ret - step.v;
    tail = ret;
  }
  return adv;
}

/// Ratio of the current policy density to the stored behavior density.
inline double probability_ratio(const RolloutStep& step, const PpoAgent& agent) {
  return std::exp(agent.log_prob(step.s, step.a) - step.log_prob);
}

/// Flattened rollout columns prepared for minibatch updates.
struct UpdateBatch {
  Matrix norm_obs;   ///< obs_dim x T
  Matrix actions;    ///< 2 x T
  Vector old_log_prob;
  Vector advantage;  ///< normalized
  Vector returns;    ///< advantage (raw) + value
  int size() const { return static_cast<int>(old_log_prob.size()); }
};

struct SurrogateStats {
  double objective = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
};

/// Clipped surrogate objective over the given columns. Accumulates the
/// gradients of the OBJECTIVE (an ascent direction) into the actor-mean
/// gradients and the log-std gradient when provided.
inline SurrogateStats clipped_surrogate(const UpdateBatch& batch, const std::vector<int>& cols,
                                        const PpoAgent& agent, double epsilon,
                                        neural::Gradients* mean_grads = nullptr,
                                        Vector* log_std_grad = nullptr) {
  if (cols.empty()) throw std::invalid_argument("clipped_surrogate: empty minibatch");
  const int m = static_cast<int>(cols.size());
  Matrix obs(batch.norm_obs.rows(), m);
  Matrix acts(2, m);
  for (int i = 0; i < m; ++i) {
    obs.col(i) = batch.norm_obs.col(cols[i]);
    acts.col(i) = batch.actions.col(cols[i]);
  }

  neural::Mlp::Tape tape;
  const Matrix mean = agent.actor_mean.forward(obs, tape);
  const Vector sd = agent.sigma();

  SurrogateStats stats;
  Matrix mean_seed = Matrix::Zero(2, m);
  Vector std_grad = Vector::Zero(2);
  const double log_2pi = std::log(2.0 * std::numbers::pi);

  for (int i = 0; i < m; ++i) {
    double new_lp = 0.0;
    Vector z(2);
    for (int d = 0; d < 2; ++d) {
      z(d) = (acts(d, i) - mean(d, i)) / sd(d);
      new_lp += -0.5 * z(d) * z(d) - agent.log_std(d) - 0.5 * log_2pi;
    }
    const double ratio = std::exp(new_lp - batch.old_log_prob(cols[i]));
    const double a_hat = batch.advantage(cols[i]);
    const double unclipped = ratio * a_hat;
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * a_hat;
    stats.objective += std::min(unclipped, clipped);
    stats.mean_ratio += ratio;
    if (std::abs(ratio - 1.0) > epsilon) stats.clip_fraction += 1.0;

    // the min is differentiable a.e.; the clipped branch has zero gradient
    // outside the trust band
    const double dobj_dlp = (unclipped <= clipped) ? unclipped : 0.0;
    if (mean_grads || log_std_grad) {
      for (int d = 0; d < 2; ++d) {
        mean_seed(d, i) = (dobj_dlp / m) * z(d) / sd(d);       // d lp / d mean
        std_grad(d) += (dobj_dlp / m) * (z(d) * z(d) - 1.0);   // d lp / d log_std
      }
    }
  }
  stats.objective /= m;
  stats.mean_ratio /= m;
  stats.clip_fraction /= m;

  if (mean_grads) agent.actor_mean.backward(tape, mean_seed, *mean_grads);
  if (log_std_grad) *log_std_grad += std_grad;
  return stats;
}

/// Mean squared error of the critic against returns-to-go.
inline double value_loss(const UpdateBatch& batch, const std::vector<int>& cols,
                         const PpoAgent& agent, neural::Gradients* grads_out = nullptr) {
  if (cols.empty()) throw std::invalid_argument("value_loss: empty minibatch");
  const int m = static_cast<int>(cols.size());
  Matrix obs(batch.norm_obs.rows(), m);
  Vector target(m);
  for (int i = 0; i < m; ++i) {
    obs.col(i) = batch.norm_obs.col(cols[i]);
    target(i) = batch.returns(cols[i]);
  }
  neural::Mlp::Tape tape;
  const Matrix v = agent.critic.forward(obs, tape);
  const Matrix diff = v - target.transpose();
  if (grads_out) agent.critic.backward(tape, (2.0 / m) * diff, *grads_out);
  return diff.squaredNorm() / m;
}

/// Bookkeeping that persists across rollouts inside one training run.
struct RolloutContext {
  std::uint64_t run_seed = 0;
  long long reset_count = 0;
  double episode_reward_acc = 0.0;
  bool needs_reset = true;
  std::vector<double> current_obs;
};

/// Collect exactly config.horizon steps, spanning episode boundaries. Values
/// and log densities are computed after the normalizer has absorbed the new
/// observations, so the stored behavior density matches what the first
/// update epoch recomputes.
inline Rollout collect_rollout(Environment& env, PpoAgent& agent, RolloutContext& ctx) {
  Rollout rollout;
  rollout.steps.reserve(agent.config.horizon);

  std::vector<std::vector<double>> raw_obs;
  raw_obs.reserve(agent.config.horizon);

  for (int t = 0; t < agent.config.horizon; ++t) {
    if (ctx.needs_reset) {
      const Observation obs = env.reset(ctx.run_seed + static_cast<std::uint64_t>(ctx.reset_count++));
      ctx.current_obs = ddpg::slice_observation(obs, agent.config.obs_dim);
      ctx.episode_reward_acc = 0.0;
      ctx.needs_reset = false;
    }
    RolloutStep step;
    step.s = ctx.current_obs;
    auto [action, lp] = agent.sample_action(step.s);
    (void)lp;  // recomputed below with post-batch normalizer statistics
    step.a = action;
    const StepResult result = env.step(action);
    step.r = result.reward;
    step.terminal = result.done || result.diagnostics.truncated;
    ctx.episode_reward_acc += result.reward;
    if (step.terminal) {
      rollout.completed_episode_returns.push_back(ctx.episode_reward_acc);
      ctx.needs_reset = true;
    }
    ctx.current_obs = ddpg::slice_observation(result.observation, agent.config.obs_dim);
    raw_obs.push_back(step.s);
    rollout.steps.push_back(std::move(step));
  }

  for (const auto& o : raw_obs)
    agent.obs_norm.observe(Eigen::Map<const Vector>(o.data(), o.size()));

  for (auto& step : rollout.steps) {
    step.v = agent.state_value(step.s);
    step.log_prob = agent.log_prob(step.s, step.a);
  }
  rollout.bootstrap_value = agent.state_value(ctx.current_obs);
  return rollout;
}

struct UpdateStats {
  long long update_index = 0;
  double first_minibatch_mean_ratio = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double surrogate = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double mean_episode_reward = std::numeric_limits<double>::quiet_NaN();
};

/// One PPO update: advantages, normalization, then epochs of shuffled
/// minibatches maximizing the clipped surrogate plus entropy bonus while
/// regressing the critic. Throws on non-finite losses.
inline UpdateStats update(const Rollout& rollout, PpoAgent& agent) {
  const int n = static_cast<int>(rollout.steps.size());
  if (n == 0) throw std::invalid_argument("ppo::update: empty rollout");

  UpdateBatch batch;
  batch.norm_obs.resize(agent.config.obs_dim, n);
  batch.actions.resize(2, n);
  batch.old_log_prob.resize(n);
  Vector raw_adv = advantages(rollout, agent.config.gamma);
  batch.returns.resize(n);
  for (int t = 0; t < n; ++t) {
    const RolloutStep& step = rollout.steps[t];
    batch.norm_obs.col(t) = agent.normalized(step.s);
    batch.actions(0, t) = step.a.tau;
    batch.actions(1, t) = step.a.f_in;
    batch.old_log_prob(t) = step.log_prob;
    batch.returns(t) = raw_adv(t) + step.v;
  }
  const double adv_mean = raw_adv.mean();
  const double adv_std =
      std::sqrt((raw_adv.array() - adv_mean).square().sum() / std::max(1, n));
  batch.advantage = ((raw_adv.array() - adv_mean) / (adv_std + 1e-8)).matrix();

  UpdateStats stats;
  stats.update_index = agent.updates_done;
  if (!rollout.completed_episode_returns.empty())
    stats.mean_episode_reward =
        std::accumulate(rollout.completed_episode_returns.begin(),
                        rollout.completed_episode_returns.end(), 0.0) /
        static_cast<double>(rollout.completed_episode_returns.size());

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  int minibatches = 0;
  bool first = true;

  for (int epoch = 0; epoch < agent.config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), agent.rng);
    for (int start = 0; start < n; start += agent.config.minibatch) {
      const int end = std::min(n, start + agent.config.minibatch);
      const std::vector<int> cols(order.begin() + start, order.begin() + end);

      neural::Gradients mean_grads = agent.actor_mean.zero_gradients();
      Vector std_grad = Vector::Zero(2);
      const SurrogateStats s =
          clipped_surrogate(batch, cols, agent, agent.config.clip_epsilon, &mean_grads, &std_grad);
      if (!std::isfinite(s.objective)) throw std::runtime_error("ppo: non-finite surrogate");
      if (first) {
        stats.first_minibatch_mean_ratio = s.mean_ratio;
        first = false;
      }
      stats.mean_ratio += s.mean_ratio;
      stats.clip_fraction += s.clip_fraction;
      stats.surrogate += s.objective;

      // maximize surrogate + entropy bonus with a minimizing optimizer
      mean_grads.scale(-1.0);
      Vector lsg = -(std_grad + Vector::Constant(2, agent.config.entropy_coef));
      neural::adam_update(agent.actor_mean, mean_grads, agent.actor_adam);
      neural::adam_update(agent.log_std, lsg, agent.log_std_adam);
      // keep the exploration scale in a sane band relative to the actuators
      agent.log_std(0) = std::clamp(agent.log_std(0), std::log(1e-5 * agent.tau_max),
                                    std::log(2.0 * agent.tau_max));
      agent.log_std(1) = std::clamp(agent.log_std(1), std::log(1e-5 * agent.f_max),
                                    std::log(2.0 * agent.f_max));

      neural::Gradients critic_grads = agent.critic.zero_gradients();
      const double vl = value_loss(batch, cols, agent, &critic_grads);
      if (!std::isfinite(vl)) throw std::runtime_error("ppo: non-finite value loss");
      critic_grads.scale(agent.config.value_coef);
      neural::adam_update(agent.critic, critic_grads, agent.critic_adam);
      stats.value_loss += vl;
      ++minibatches;
    }
  }

  stats.mean_ratio /= minibatches;
  stats.clip_fraction /= minibatches;
  stats.surrogate /= minibatches;
  stats.value_loss /= minibatches;
  stats.entropy = agent.entropy();
  ++agent.updates_done;
  return stats;
}

struct TrainLog {
  std::vector<UpdateStats> updates;
  bool diverged = false;
  std::string divergence_reason;
};

using UpdateHook = std::function<void(const UpdateStats&, PpoAgent&)>;

inline TrainLog train(Environment& env, PpoAgent& agent, std::uint64_t run_seed,
                      const UpdateHook& on_update = {}) {
  agent.config.validate();
  TrainLog log;
  RolloutContext ctx;
  ctx.run_seed = run_seed;
  for (int u = 0; u < agent.config.updates; ++u) {
    const Rollout rollout = collect_rollout(env, agent, ctx);
    try {
      const UpdateStats stats = update(rollout, agent);
      log.updates.push_back(stats);
      if (on_update) on_update(stats, agent);
    } catch (const std::runtime_error& e) {
      log.diverged = true;
      log.divergence_reason = e.what();
      break;
    }
  }
  return log;
}

}  // namespace ewip::ppo
