#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ewip/dynamics.hpp"
#include "ewip/trajectory.hpp"

namespace ewip {

struct EnvConfig {
  double sample_time = 0.05;     ///< controller update period [s]
  double integrator_dt = 0.002;  ///< inner RK4 step [s]
  double episode_length = 10.0;  ///< horizon [s]
  int history_depth = 6;         ///< delayed error pairs in the observation

  // shaped-penalty weights
  double w_theta = 0.2;
  double w_theta_rate = 0.25;
  double w_input = 0.02;
  double w_error_x = 0.75;
  double w_error_z = 0.05;
  double w_prev_rates = 0.5;
  double reward_offset = 0.3;

  // violation penalties and bounds
  double angle_penalty = 50.0;
  double position_penalty = 100.0;
  double theta_fail = std::numbers::pi / 4.0;
  double x_fail = 4.0;

  double init_theta_noise = 0.05;  ///< uniform bound on the initial lean [rad]

  int substeps() const { return static_cast<int>(std::round(sample_time / integrator_dt)); }
  int observation_size() const { return 10 + 2 * history_depth; }

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("EnvConfig: " + what); };
    if (!(sample_time > 0.0)) fail("sample_time must be positive");
    if (!(integrator_dt > 0.0)) fail("integrator_dt must be positive");
    const int n = substeps();
    if (n < 1 || std::abs(sample_time - n * integrator_dt) > 1e-9)
      fail("sample_time must be a multiple of integrator_dt");
    if (history_depth < 0) fail("history_depth must be nonnegative");
    if (!(episode_length > 0.0)) fail("episode_length must be positive");
    if (!(theta_fail > 0.0 && x_fail > 0.0)) fail("failure bounds must be positive");
    if (init_theta_noise < 0.0) fail("init_theta_noise must be nonnegative");
  }
};

/// Reward decomposition: shaped penalty, violation penalty, total.
struct RewardTerms {
  double r_f = 0.0;
  double r_v = 0.0;
  double r_t = 0.0;
};

using Observation = std::vector<double>;

struct StepDiagnostics {
  double normal_force = 0.0;
  double e_x = 0.0;
  double e_z = 0.0;
  double t = 0.0;
  ControlInput applied;
  RewardTerms reward_terms;
  bool angle_failure = false;
  bool position_failure = false;
  bool truncated = false;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool done = false;  ///< failure termination (not horizon truncation)
  StepDiagnostics diagnostics;
};

/// Failure test: the episode dies when the lean or the excursion leaves the
/// healthy region.
inline bool episode_failed(const State& s, const EnvConfig& cfg) {
  return std::abs(s.theta) > cfg.theta_fail || std::abs(s.x) > cfg.x_fail;
}

/// RL task wrapper around the plant: reference tracking, error-history
/// observation, shaped reward, termination, episode lifecycle.
class Environment {
 public:
  Environment(SystemParams params, EnvConfig config, ReferenceTrajectory trajectory)
      : params_(params), config_(config), trajectory_(std::move(trajectory)) {
    params_.validate();
    config_.validate();
    trajectory_.validate();
  }

  static Observation build_observation(const State& s,
                                       const std::deque<std::pair<double, double>>& history,
                                       int history_depth) {
    Observation obs;
    obs.reserve(10 + 2 * history_depth);
    for (double v : s.to_array()) obs.push_back(v);
    for (int k = 0; k < history_depth; ++k) {
      if (k < static_cast<int>(history.size())) {
        obs.push_back(history[k].first);
        obs.push_back(history[k].second);
      } else {
        obs.push_back(0.0);
        obs.push_back(0.0);
      }
    }
    return obs;
  }

  static RewardTerms reward(const State& s, const ControlInput& applied, double e_x, double e_z,
                            double prev_xd, double prev_zd, const EnvConfig& cfg) {
    RewardTerms r;
    r.r_f = -(cfg.w_theta * s.theta * s.theta + cfg.w_theta_rate * s.thetad * s.thetad +
              cfg.w_input * (std::abs(applied.tau) + std::abs(applied.f_in)) +
              cfg.w_error_x * std::abs(e_x) + cfg.w_error_z * std::abs(e_z) +
              cfg.w_prev_rates * (std::abs(prev_xd) + std::abs(prev_zd)));
    if (std::abs(s.theta) > cfg.theta_fail) r.r_v -= cfg.angle_penalty;
    if (std::abs(s.x) > cfg.x_fail) r.r_v -= cfg.position_penalty;
    r.r_t = r.r_f + r.r_v + cfg.reward_offset;
    return r;
  }

  /// Reseed the internal stream and start a fresh episode.
  Observation reset(std::uint64_t seed) {
    rng_.seed(seed);
    return reset();
  }

  /// Start a fresh episode, drawing the initial lean from the current stream.
  Observation reset() {
    state_ = State{};
    state_.z = params_.R_w;
    state_.l = params_.l_ref();
    state_.theta =
        std::uniform_real_distribution<double>(-config_.init_theta_noise,
                                               config_.init_theta_noise)(rng_);
    history_.clear();
    t_ = 0.0;
    steps_ = 0;
    failed_ = truncated_ = false;
    return build_observation(state_, history_, config_.history_depth);
  }

  StepResult step(const ControlInput& action) {
    if (failed_ || truncated_)
      throw std::logic_error("Environment::step: episode finished; call reset first");

    const ControlInput applied = action.clamped(params_);
    const double prev_xd = state_.xd, prev_zd = state_.zd;

    const int n = config_.substeps();
    for (int i = 0; i < n; ++i)
      state_ = ewip::step(state_, applied, params_, config_.integrator_dt);
    t_ += config_.sample_time;
    ++steps_;

    const auto [x_ref, z_ref] = trajectory_.at(t_);
    const auto [xp, zp] = bob_position(state_);
    (void)xp;
    const double e_x = x_ref - state_.x;
    const double e_z = z_ref - zp;

    StepResult result;
    result.diagnostics.reward_terms =
        reward(state_, applied, e_x, e_z, prev_xd, prev_zd, config_);
    result.reward = result.diagnostics.reward_terms.r_t;

    failed_ = episode_failed(state_, config_);
    truncated_ = !failed_ && t_ >= config_.episode_length - 1e-9;

    history_.emplace_front(e_x, e_z);
    while (static_cast<int>(history_.size()) > config_.history_depth) history_.pop_back();

    result.observation = build_observation(state_, history_, config_.history_depth);
    result.done = failed_;
    result.diagnostics.normal_force = normal_force(state_, applied, params_);
    result.diagnostics.e_x = e_x;
    result.diagnostics.e_z = e_z;
    result.diagnostics.t = t_;
    result.diagnostics.applied = applied;
    result.diagnostics.angle_failure = std::abs(state_.theta) > config_.theta_fail;
    result.diagnostics.position_failure = std::abs(state_.x) > config_.x_fail;
    result.diagnostics.truncated = truncated_;
    return result;
  }

  const State& state() const { return state_; }
  double time() const { return t_; }
  int steps_taken() const { return steps_; }
  bool failed() const { return failed_; }
  bool truncated() const { return truncated_; }
  bool finished() const { return failed_ || truncated_; }
  int max_steps() const {
    return static_cast<int>(std::round(config_.episode_length / config_.sample_time));
  }
  const SystemParams& params() const { return params_; }
  const EnvConfig& config() const { return config_; }
  const ReferenceTrajectory& trajectory() const { return trajectory_; }

 private:
  SystemParams params_;
  EnvConfig config_;
  ReferenceTrajectory trajectory_;
  State state_;
  std::deque<std::pair<double, double>> history_;
  std::mt19937_64 rng_;
  double t_ = 0.0;
  int steps_ = 0;
  bool failed_ = false;
  bool truncated_ = false;
};

}  // namespace ewip
