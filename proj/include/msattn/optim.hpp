#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msattn/tensor.hpp"

namespace msattn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Gradient-coupled L2: lambda * param is added to the gradient before the moment update.
  double l2 = 1e-5;
};

/// Adam with bias correction over a fixed list of named parameters.
class Adam {
 public:
  struct Slot {
    NamedTensor param;
    std::vector<float> first_moment;
    std::vector<float> second_moment;
  };

  Adam(std::vector<NamedTensor> params, AdamConfig config = {});

  /// Applies one update from the parameters' current gradient buffers.
  /// Throws DivergenceError naming the parameter on a non-finite gradient.
  void step();
  void zero_grad();

  double learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const AdamConfig& config() const { return config_; }

  std::uint64_t step_count() const { return steps_; }
  void set_step_count(std::uint64_t steps) { steps_ = steps; }

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  std::vector<Slot> slots_;
  AdamConfig config_;
  std::uint64_t steps_ = 0;
};

}  // namespace msattn
