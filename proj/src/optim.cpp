#include "msattn/optim.hpp"

#include <cmath>

namespace msattn {

Adam::Adam(std::vector<NamedTensor> params, AdamConfig config) : config_(config) {
  slots_.reserve(params.size());
  for (auto& p : params) {
    const std::size_t n = p.tensor.numel();
    slots_.push_back(Slot{std::move(p), std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)});
  }
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.tensor.zero_grad();
}

void Adam::step() {
  for (auto& s : slots_) {
    if (!s.param.tensor.has_grad()) continue;
    for (float g : s.param.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw DivergenceError("non-finite gradient in parameter '" + s.param.name + "'", s.param.name);
      }
    }
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (auto& s : slots_) {
    auto values = s.param.tensor.data();
    // A parameter the last forward pass did not reach has no gradient buffer;
    // it still decays under L2.
    const bool has = s.param.tensor.has_grad();
    auto grads = s.param.tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double raw = has ? static_cast<double>(grads[i]) : 0.0;
      const double g = raw + config_.l2 * static_cast<double>(values[i]);
      const double m = b1 * s.first_moment[i] + (1.0 - b1) * g;
      const double v = b2 * s.second_moment[i] + (1.0 - b2) * g * g;
      s.first_moment[i] = static_cast<float>(m);
      s.second_moment[i] = static_cast<float>(v);
      const double update = config_.learning_rate * (m / correction1) / (std::sqrt(v / correction2) + config_.epsilon);
      values[i] = static_cast<float>(values[i] - update);
    }
  }
}

}  // namespace msattn
