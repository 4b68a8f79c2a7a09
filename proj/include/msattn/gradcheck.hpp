#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "msattn/tensor.hpp"

namespace msattn {

struct GradCheckOptions {
  double tolerance = 1e-3;  // max relative error
  double step = 1e-6;       // central-difference step
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // number of scalar inputs compared
  bool passed = false;
};

/// Scalar function of double tensors; it must rebuild its graph on each call.
using ScalarFn = std::function<Tensor64(const std::vector<Tensor64>&)>;

/// Compares reverse-mode gradients of f with central differences for every
/// element of every input that requires grad. The relative error of one
/// element is |a - n| / max(|a|, |n|, floor), with floor = 1e-3 * the
/// largest gradient magnitude of that input (and at least 1e-8), so entries
/// that are numerically zero do not dominate.
GradCheckResult check_gradient(const std::string& name, const ScalarFn& f, std::vector<Tensor64> inputs,
                               const GradCheckOptions& opts);

/// Every differentiable op plus an end-to-end toy attention model (C=3, R=9)
/// and the fusion combinators.
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opts = {});

/// A ReLU whose backward rule is deliberately wrong (scaled by 1.5); used as
/// the negative control of the suite.
Tensor64 corrupted_relu(const Tensor64& x);
GradCheckResult corrupted_backward_check(const GradCheckOptions& opts = {});

void write_gradcheck_report(std::ostream& os, const std::vector<GradCheckResult>& results, double tolerance);

}  // namespace msattn
