#pragma once

#include <cstddef>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "ewip/dynamics.hpp"

namespace ewip::ddpg {

/// One experience record: observation, action, reward, successor, terminal.
struct Transition {
  std::vector<double> s;
  ControlInput a;
  double r = 0.0;
  std::vector<double> s_next;
  bool terminal = false;
};

/// Fixed-capacity ring of transitions with uniform minibatch sampling.
/// Oldest entries are evicted first once the buffer is full.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw std::invalid_argument("ReplayBuffer: zero capacity");
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }

  void push(Transition t) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
  }

  const Transition& operator[](std::size_t i) const { return data_[i]; }

  /// Uniform sample of m distinct indices.
  std::vector<std::size_t> sample_indices(std::size_t m, std::mt19937_64& rng) const {
    if (m > data_.size())
      throw std::invalid_argument("ReplayBuffer: minibatch larger than stored transitions");
    std::vector<std::size_t> all(data_.size());
    std::iota(all.begin(), all.end(), 0u);
    std::vector<std::size_t> picked;
    picked.reserve(m);
    std::sample(all.begin(), all.end(), std::back_inserter(picked), m, rng);
    return picked;
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Transition> data_;
};

}  // namespace ewip::ddpg
