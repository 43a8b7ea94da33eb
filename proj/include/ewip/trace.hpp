#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ewip::bench {

struct TraceRow {
  double t = 0, x = 0, z = 0, theta = 0, phi = 0, l = 0;
  double xd = 0, zd = 0, thetad = 0, phid = 0, ld = 0;
  double tau = 0, f_in = 0;
  double x_ref = 0, z_ref = 0, e_x = 0, e_z = 0;
  double reward = 0, power = 0;
};

inline constexpr const char* kTraceCsvHeader =
    "t,x,z,theta,phi,l,xd,zd,thetad,phid,ld,tau,f_in,x_ref,z_ref,e_x,e_z,reward,power";

// shortest representation that round-trips exactly
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_trace_csv(const std::string& path, const std::vector<TraceRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trace: " + path);
  out << kTraceCsvHeader << '\n';
  for (const TraceRow& r : rows) {
    const double cols[] = {r.t,  r.x,   r.z,    r.theta, r.phi,  r.l,   r.xd,
                           r.zd, r.thetad, r.phid, r.ld,    r.tau,  r.f_in, r.x_ref,
                           r.z_ref, r.e_x, r.e_z,  r.reward, r.power};
    for (std::size_t i = 0; i < std::size(cols); ++i) {
      if (i) out << ',';
      out << format_double(cols[i]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("trace write failed: " + path);
}

inline std::vector<TraceRow> read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read trace: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kTraceCsvHeader)
    throw std::runtime_error("trace header mismatch in " + path);
  std::vector<TraceRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    double cols[19];
    std::string cell;
    for (int i = 0; i < 19; ++i) {
      if (!std::getline(ss, cell, ',')) throw std::runtime_error("short trace row in " + path);
      cols[i] = std::stod(cell);
    }
    TraceRow r;
    r.t = cols[0];
    r.x = cols[1];
    r.z = cols[2];
    r.theta = cols[3];
    r.phi = cols[4];
    r.l = cols[5];
    r.xd = cols[6];
    r.zd = cols[7];
    r.thetad = cols[8];
    r.phid = cols[9];
    r.ld = cols[10];
    r.tau = cols[11];
    r.f_in = cols[12];
    r.x_ref = cols[13];
    r.z_ref = cols[14];
    r.e_x = cols[15];
    r.e_z = cols[16];
    r.reward = cols[17];
    r.power = cols[18];
    rows.push_back(r);
  }
  return rows;
}

/// Aggregate tracking/effort metrics, computed identically for every
/// controller.
struct MetricsReport {
  double rmse_x = std::numeric_limits<double>::quiet_NaN();
  double final_position_error = std::numeric_limits<double>::quiet_NaN();
  double max_abs_theta = std::numeric_limits<double>::quiet_NaN();
  double max_abs_xd = std::numeric_limits<double>::quiet_NaN();
  double total_energy = std::numeric_limits<double>::quiet_NaN();  ///< trapezoid of |power| [J]
  double episode_return = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
};

inline MetricsReport compute_metrics(const std::vector<TraceRow>& rows, bool fell) {
  MetricsReport m;
  if (rows.empty()) {
    m.failed = true;  // degenerate input: NaN metrics, flagged
    return m;
  }
  m.failed = fell;
  double sq = 0.0, ret = 0.0, worst_theta = 0.0, worst_xd = 0.0, energy = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const TraceRow& r = rows[i];
    sq += (r.x - r.x_ref) * (r.x - r.x_ref);
    ret += r.reward;
    worst_theta = std::max(worst_theta, std::abs(r.theta));
    worst_xd = std::max(worst_xd, std::abs(r.xd));
    if (i > 0)
      energy += 0.5 * (std::abs(rows[i - 1].power) + std::abs(r.power)) * (r.t - rows[i - 1].t);
  }
  m.rmse_x = std::sqrt(sq / static_cast<double>(rows.size()));
  m.final_position_error = std::abs(rows.back().x - rows.back().x_ref);
  m.max_abs_theta = worst_theta;
  m.max_abs_xd = worst_xd;
  m.total_energy = energy;
  m.episode_return = ret;
  return m;
}

}  // namespace ewip::bench
