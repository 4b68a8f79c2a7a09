#pragma once

#include <cmath>
#include <vector>

#include "msattn/random.hpp"
#include "msattn/tensor.hpp"

namespace testutil {

template <typename T = float>
msattn::BasicTensor<T> random_tensor(msattn::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                                     bool grad = false) {
  auto rng = msattn::rnd::derive(seed, 17);
  std::vector<T> v(msattn::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(msattn::rnd::uniform(rng, lo, hi));
  return msattn::BasicTensor<T>(std::move(shape), std::move(v), grad);
}

template <typename T>
std::vector<T> values(const msattn::BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <typename T>
double max_abs_diff(const msattn::BasicTensor<T>& a, const msattn::BasicTensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

}  // namespace testutil
