#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include "ewip/neural.hpp"

namespace ewip::io {

// Versioned binary container for agent checkpoints. Layout is host-endian;
// checkpoints are an artifact of one machine, not an interchange format.
inline constexpr char kMagic[8] = {'E', 'W', 'I', 'P', 'C', 'K', 'P', 'T'};

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  }

  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }

  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void vec(const neural::Vector& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    raw(v.data(), sizeof(double) * v.size());
  }

  void mat(const neural::Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    raw(m.data(), sizeof(double) * m.size());
  }

  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("checkpoint write failed on close");
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("checkpoint write failed");
  }

  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open for reading: " + path);
  }

  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  double f64() { return get<double>(); }

  std::string str() {
    const auto n = u64();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  neural::Vector vec() {
    const auto n = u64();
    neural::Vector v(static_cast<Eigen::Index>(n));
    raw(v.data(), sizeof(double) * n);
    return v;
  }

  neural::Matrix mat() {
    const auto r = u64();
    const auto c = u64();
    neural::Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    raw(m.data(), sizeof(double) * r * c);
    return m;
  }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }

  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw std::runtime_error("checkpoint truncated or unreadable");
  }

  std::ifstream in_;
};

inline void write_header(BinaryWriter& w, const std::string& kind, std::uint32_t version) {
  for (char c : kMagic) w.u32(static_cast<std::uint32_t>(c));
  w.str(kind);
  w.u32(version);
}

inline std::pair<std::string, std::uint32_t> read_header(BinaryReader& r) {
  for (char c : kMagic)
    if (r.u32() != static_cast<std::uint32_t>(c))
      throw std::runtime_error("not a checkpoint file (bad magic)");
  std::string kind = r.str();
  const std::uint32_t version = r.u32();
  return {kind, version};
}

inline void write_mlp(BinaryWriter& w, const neural::Mlp& net) {
  w.u64(net.layer_sizes().size());
  for (int n : net.layer_sizes()) w.u64(static_cast<std::uint64_t>(n));
  w.u32(net.output_activation() == neural::OutputActivation::bounded_tanh ? 1u : 0u);
  w.vec(net.output_limits());
  for (const auto& m : net.weights()) w.mat(m);
  for (const auto& b : net.biases()) w.vec(b);
}

inline neural::Mlp read_mlp(BinaryReader& r) {
  const auto n_layers = r.u64();
  std::vector<int> sizes(n_layers);
  for (auto& s : sizes) s = static_cast<int>(r.u64());
  const bool bounded = r.u32() == 1u;
  neural::Vector limits = r.vec();
  neural::Mlp net(sizes,
                  bounded ? neural::OutputActivation::bounded_tanh
                          : neural::OutputActivation::linear,
                  limits);
  for (auto& m : net.weights()) m = r.mat();
  for (auto& b : net.biases()) b = r.vec();
  return net;
}

inline void write_adam(BinaryWriter& w, const neural::AdamState& st) {
  w.f64(st.config.lr);
  w.f64(st.config.beta1);
  w.f64(st.config.beta2);
  w.f64(st.config.eps);
  w.f64(st.config.l2);
  w.f64(st.config.clip);
  w.i64(st.step_count);
  w.u64(st.m_w.size());
  for (std::size_t k = 0; k < st.m_w.size(); ++k) {
    w.mat(st.m_w[k]);
    w.mat(st.v_w[k]);
    w.vec(st.m_b[k]);
    w.vec(st.v_b[k]);
  }
}

inline neural::AdamState read_adam(BinaryReader& r) {
  neural::AdamState st;
  st.config.lr = r.f64();
  st.config.beta1 = r.f64();
  st.config.beta2 = r.f64();
  st.config.eps = r.f64();
  st.config.l2 = r.f64();
  st.config.clip = r.f64();
  st.step_count = r.i64();
  const auto n = r.u64();
  for (std::uint64_t k = 0; k < n; ++k) {
    st.m_w.push_back(r.mat());
    st.v_w.push_back(r.mat());
    st.m_b.push_back(r.vec());
    st.v_b.push_back(r.vec());
  }
  return st;
}

inline void write_adam_vector(BinaryWriter& w, const neural::AdamVector& st) {
  w.f64(st.config.lr);
  w.f64(st.config.beta1);
  w.f64(st.config.beta2);
  w.f64(st.config.eps);
  w.f64(st.config.l2);
  w.f64(st.config.clip);
  w.i64(st.step_count);
  w.vec(st.m);
  w.vec(st.v);
}

inline neural::AdamVector read_adam_vector(BinaryReader& r) {
  neural::AdamVector st;
  st.config.lr = r.f64();
  st.config.beta1 = r.f64();
  st.config.beta2 = r.f64();
  st.config.eps = r.f64();
  st.config.l2 = r.f64();
  st.config.clip = r.f64();
  st.step_count = r.i64();
  st.m = r.vec();
  st.v = r.vec();
  return st;
}

inline void write_norm(BinaryWriter& w, const neural::RunningNorm& norm) {
  w.i64(norm.count());
  w.vec(norm.mean());
  w.vec(norm.m2());
  w.u32(norm.frozen() ? 1u : 0u);
}

inline neural::RunningNorm read_norm(BinaryReader& r) {
  const auto count = r.i64();
  neural::Vector mean = r.vec();
  neural::Vector m2 = r.vec();
  const bool frozen = r.u32() == 1u;
  neural::RunningNorm norm(static_cast<int>(mean.size()));
  norm.restore(count, std::move(mean), std::move(m2), frozen);
  return norm;
}

// The engine's textual representation is exact (decimal integers), which
// keeps the round trip bit-faithful.
inline void write_rng(BinaryWriter& w, const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  w.str(ss.str());
}

inline std::mt19937_64 read_rng(BinaryReader& r) {
  std::istringstream ss(r.str());
  std::mt19937_64 rng;
  ss >> rng;
  if (!ss) throw std::runtime_error("checkpoint: bad RNG state");
  return rng;
}

}  // namespace ewip::io
