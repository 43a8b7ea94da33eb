#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace ewip {

/// Physical parameters of the extendable wheeled inverted pendulum.
struct SystemParams {
  double m_w = 0.25;     ///< wheel mass [kg]
  double m_p = 0.125;    ///< bob mass [kg]
  double R_w = 0.10;     ///< wheel radius [m]
  double I = 0.00125;    ///< wheel moment of inertia [kg m^2], uniform disc
  double g = 9.81;       ///< gravitational acceleration [m/s^2]
  double l_min = 0.25;   ///< link length lower limit [m]
  double l_max = 0.50;   ///< link length upper limit [m]
  double mu = 0.6;       ///< ground friction coefficient (recorded only; the model has no friction term)
  double tau_max = 5.0;  ///< wheel torque saturation [N m]
  double f_max = 20.0;   ///< link force saturation [N]

  /// Mid-range link length, used as the nominal operating length.
  double l_ref() const { return 0.5 * (l_min + l_max); }

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("SystemParams: " + what); };
    if (!(m_w > 0.0)) fail("wheel mass must be positive");
    if (!(m_p > 0.0)) fail("bob mass must be positive");
    if (!(R_w > 0.0)) fail("wheel radius must be positive");
    if (!(I > 0.0)) fail("wheel inertia must be positive");
    if (!(g > 0.0)) fail("gravity must be positive");
    if (!(l_min > 0.0 && l_min < l_max)) fail("link limits must satisfy 0 < l_min < l_max");
    if (!(mu >= 0.0 && mu <= 1.0)) fail("friction coefficient must lie in [0, 1]");
    if (!(tau_max > 0.0)) fail("torque saturation must be positive");
    if (!(f_max > 0.0)) fail("link force saturation must be positive");
  }
};

/// Generalized coordinates (x, z, theta, phi, l) and their rates.
struct State {
  double x = 0.0;       ///< wheel x displacement [m]
  double z = 0.0;       ///< wheel z displacement [m]
  double theta = 0.0;   ///< pendulum angle from the normal [rad]
  double phi = 0.0;     ///< wheel rotation [rad]
  double l = 0.0;       ///< link length, wheel center to bob [m]
  double xd = 0.0;
  double zd = 0.0;
  double thetad = 0.0;
  double phid = 0.0;
  double ld = 0.0;

  bool finite() const {
    for (double v : {x, z, theta, phi, l, xd, zd, thetad, phid, ld})
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::array<double, 10> to_array() const { return {x, z, theta, phi, l, xd, zd, thetad, phid, ld}; }

  static State from_array(const std::array<double, 10>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[9]};
  }
};

/// Wheel torque and link force. Saturation clamps rather than rejects.
struct ControlInput {
  double tau = 0.0;   ///< wheel torque [N m]
  double f_in = 0.0;  ///< link force [N]

  ControlInput clamped(const SystemParams& p) const {
    return {std::clamp(tau, -p.tau_max, p.tau_max), std::clamp(f_in, -p.f_max, p.f_max)};
  }
};

/// Second derivatives of the five coordinates.
struct Accelerations {
  double xdd = 0.0;
  double zdd = 0.0;
  double thetadd = 0.0;
  double phidd = 0.0;
  double ldd = 0.0;
};

struct DegenerateGeometry : std::domain_error {
  explicit DegenerateGeometry(const std::string& what) : std::domain_error(what) {}
};

struct IntegrationBlowup : std::runtime_error {
  State state;
  explicit IntegrationBlowup(State s) : std::runtime_error("integration produced a non-finite state"), state(s) {}
};

/// Bob position (x_p, z_p) from the wheel pose and link extension.
inline std::pair<double, double> bob_position(const State& s) {
  return {s.x + s.l * std::sin(s.theta), s.z + s.l * std::cos(s.theta)};
}

/// Bob velocity (x_p_dot, z_p_dot).
inline std::pair<double, double> bob_velocity(const State& s) {
  const double st = std::sin(s.theta), ct = std::cos(s.theta);
  return {s.xd + s.ld * st + s.l * ct * s.thetad, s.zd + s.ld * ct - s.l * st * s.thetad};
}

/// Total kinetic and potential energy {T, V} of the wheel-link-bob assembly.
inline std::pair<double, double> energies(const State& s, const SystemParams& p) {
  const auto [xpd, zpd] = bob_velocity(s);
  const auto [xp, zp] = bob_position(s);
  const double T = 0.5 * p.m_w * (s.xd * s.xd + s.zd * s.zd) +
                   0.5 * p.m_p * (xpd * xpd + zpd * zpd) + 0.5 * p.I * s.phid * s.phid;
  const double V = p.m_w * p.g * s.z + p.m_p * p.g * zp;
  return {T, V};
}

/// Ground normal force under flat-ground contact (z pinned at the wheel
/// radius, zero vertical acceleration). Solves the vertical equation of
/// motion for N.
inline double normal_force(const State& s, const ControlInput& u, const SystemParams& p) {
  if (s.l == 0.0) throw DegenerateGeometry("normal_force: zero link length");
  return p.g * p.m_p + 2.0 * p.g * p.m_w + u.tau * std::sin(s.theta) / s.l;
}

/// Nonlinear accelerations of the five coordinates. zdd is identically zero
/// under the flat-ground closure; the other four follow the model equations
/// verbatim. Inputs are assumed pre-clamped.
inline Accelerations accelerations(const State& s, const ControlInput& u, const SystemParams& p) {
  if (s.l == 0.0) throw DegenerateGeometry("accelerations: zero link length");
  if (p.I == 0.0) throw DegenerateGeometry("accelerations: zero wheel inertia");

  const double N = normal_force(s, u, p);
  const double st = std::sin(s.theta), ct = std::cos(s.theta);
  const double l = s.l;

  Accelerations a;
  a.xdd = u.tau * (p.I * ct + p.R_w * l) / (p.I * p.m_w * l);
  a.zdd = 0.0;  // N is chosen so the vertical equation closes on flat ground
  a.thetadd = (-p.I * p.m_p * p.m_w * (p.g * st + 2.0 * s.ld * s.thetad) * l +
               p.I * p.m_p * (-p.g * p.m_p + N) * l * st -
               p.I * p.m_p * u.tau - p.I * p.m_w * u.tau -
               p.R_w * p.m_p * l * u.tau * ct) /
              (p.I * p.m_p * p.m_w * l * l);
  a.phidd = u.tau / p.I;
  a.ldd = p.g * p.m_p * ct / p.m_w + p.g * ct + l * s.thetad * s.thetad -
          N * ct / p.m_w + u.f_in - p.R_w * u.tau * st / (p.I * p.m_w);
  return a;
}

namespace detail {

inline std::array<double, 10> state_derivative(const std::array<double, 10>& y,
                                               const ControlInput& u, const SystemParams& p) {
  const State s = State::from_array(y);
  const Accelerations a = accelerations(s, u, p);
  return {y[5], y[6], y[7], y[8], y[9], a.xdd, a.zdd, a.thetadd, a.phidd, a.ldd};
}

}  // namespace detail

/// One classical RK4 step of length dt with the input held constant.
/// Afterwards the link length is clamped to its travel limits (an inelastic
/// stop zeroes ld at a hit limit) and z is pinned to the wheel radius.
inline State step(const State& s0, const ControlInput& u, const SystemParams& p, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");

  const auto y0 = s0.to_array();
  const auto k1 = detail::state_derivative(y0, u, p);
  std::array<double, 10> y{};
  for (int i = 0; i < 10; ++i) y[i] = y0[i] + 0.5 * dt * k1[i];
  const auto k2 = detail::state_derivative(y, u, p);
  for (int i = 0; i < 10; ++i) y[i] = y0[i] + 0.5 * dt * k2[i];
  const auto k3 = detail::state_derivative(y, u, p);
  for (int i = 0; i < 10; ++i) y[i] = y0[i] + dt * k3[i];
  const auto k4 = detail::state_derivative(y, u, p);
  for (int i = 0; i < 10; ++i)
    y[i] = y0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);

  State s = State::from_array(y);
  if (s.l <= p.l_min) {
    s.l = p.l_min;
    if (s.ld < 0.0) s.ld = 0.0;
  } else if (s.l >= p.l_max) {
    s.l = p.l_max;
    if (s.ld > 0.0) s.ld = 0.0;
  }
  s.z = p.R_w;
  s.zd = 0.0;
  if (!s.finite()) throw IntegrationBlowup(s);
  return s;
}

}  // namespace ewip
