#pragma once

#include <cmath>
#include <random>

#include "ewip/dynamics.hpp"

namespace ewip::test {

// errors smaller than this are ignored
inline constexpr double kAbsoluteTolerance = 1e-9;

// corrected relative error
inline double relative_error(double a, double b) {
  const double nominator = std::max(0.0, std::abs(a - b) - kAbsoluteTolerance);
  const double denominator = std::abs(a) + std::abs(b) + kAbsoluteTolerance;
  return nominator / denominator;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// admissible state away from the degenerate l = 0 geometry
inline State random_state(std::mt19937_64& rng, const SystemParams& p) {
  State s;
  s.x = uniform(rng, -4.0, 4.0);
  s.z = p.R_w;
  s.theta = uniform(rng, -1.0, 1.0);
  s.phi = uniform(rng, -20.0, 20.0);
  s.l = uniform(rng, p.l_min, p.l_max);
  s.xd = uniform(rng, -2.0, 2.0);
  s.zd = 0.0;
  s.thetad = uniform(rng, -3.0, 3.0);
  s.phid = uniform(rng, -20.0, 20.0);
  s.ld = uniform(rng, -1.0, 1.0);
  return s;
}

inline ControlInput random_input(std::mt19937_64& rng, const SystemParams& p) {
  return {uniform(rng, -p.tau_max, p.tau_max), uniform(rng, -p.f_max, p.f_max)};
}

}  // namespace ewip::test
