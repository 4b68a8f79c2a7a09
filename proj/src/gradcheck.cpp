#include "msattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "msattn/attention.hpp"
#include "msattn/ops.hpp"
#include "msattn/random.hpp"
#include "msattn/reference_cnn.hpp"

namespace msattn {

GradCheckResult check_gradient(const std::string& name, const ScalarFn& f, std::vector<Tensor64> inputs,
                               const GradCheckOptions& opts) {
  GradCheckResult res;
  res.name = name;
  res.seed = opts.seed;
  for (auto& t : inputs) t.zero_grad();
  {
    Tensor64 y = f(inputs);
    if (y.numel() != 1) throw DimensionError("gradient check of '" + name + "' needs a scalar function");
    y.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.requires_grad() && t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  NoGradGuard guard;
  const double h = opts.step;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor64& t = inputs[i];
    if (!t.requires_grad()) continue;
    double largest = 0.0;
    for (double a : analytic[i]) largest = std::max(largest, std::abs(a));
    const double floor = std::max(1e-3 * largest, 1e-8);
    for (std::size_t j = 0; j < t.numel(); ++j) {
      const double orig = t.raw()[j];
      t.raw()[j] = orig + h;
      const double up = f(inputs).item();
      t.raw()[j] = orig - h;
      const double down = f(inputs).item();
      t.raw()[j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][j];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      res.max_rel_error = std::max(res.max_rel_error, rel);
      ++res.checked;
    }
  }
  res.passed = res.max_rel_error <= opts.tolerance;
  return res;
}

Tensor64 corrupted_relu(const Tensor64& x) {
  Buffer<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.raw()[i]);
  return Tensor64::make_result(x.shape(), std::move(out), {x}, [](Tensor64::NodeT& self) {
    auto& in = *self.parents[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] > 0.0) g[i] += 1.5 * self.grad[i];
    }
  });
}

namespace {

Tensor64 random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor64 t(std::move(shape), 0.0, true);
  for (auto& v : t.data()) v = rnd::uniform(rng, lo, hi);
  return t;
}

// Values bounded away from zero so ReLU kinks are never crossed by the probe step.
Tensor64 kink_free(Shape shape, Rng& rng) {
  Tensor64 t = random_tensor(std::move(shape), rng);
  for (auto& v : t.data()) v = (v < 0 ? -1.0 : 1.0) * (0.1 + std::abs(v));
  return t;
}

// Reduces an arbitrary output to a scalar with fixed random weights.
struct Projector {
  Tensor64 weights;
  Tensor64 operator()(const Tensor64& y) {
    if (!weights.defined() || weights.shape() != y.shape()) {
      Rng r(0xC0FFEE);
      weights = Tensor64(y.shape(), 0.0);
      for (auto& v : weights.data()) v = rnd::uniform(r, -1.0, 1.0);
    }
    return ops::sum_all(ops::mul(y, weights));
  }
};

template <typename F>
ScalarFn projected(F op) {
  auto proj = std::make_shared<Projector>();
  return [op, proj](const std::vector<Tensor64>& in) { return (*proj)(op(in)); };
}

}  // namespace

GradCheckResult corrupted_backward_check(const GradCheckOptions& opts) {
  Rng rng = rnd::derive(opts.seed, 99);
  return check_gradient("corrupted_relu",
                        projected([](const std::vector<Tensor64>& in) { return corrupted_relu(in[0]); }),
                        {kink_free({3, 4}, rng)}, opts);
}

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opts) {
  std::vector<GradCheckResult> out;
  Rng rng = rnd::derive(opts.seed, 0);
  auto run = [&](const std::string& name, ScalarFn f, std::vector<Tensor64> inputs) {
    out.push_back(check_gradient(name, f, std::move(inputs), opts));
  };
  using In = std::vector<Tensor64>;

  run("conv2d pad=1", projected([](const In& in) { return ops::conv2d(in[0], in[1], in[2], 1); }),
      {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  run("conv2d pad=0", projected([](const In& in) { return ops::conv2d(in[0], in[1], in[2], 0); }),
      {random_tensor({1, 3, 6, 6}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({2}, rng)});
  run("conv2d 5x5 pad=2", projected([](const In& in) { return ops::conv2d(in[0], in[1], in[2], 2); }),
      {random_tensor({1, 2, 6, 6}, rng), random_tensor({2, 2, 5, 5}, rng), random_tensor({2}, rng)});
  run("maxpool2d", projected([](const In& in) { return ops::maxpool2d(in[0], 2, 2); }),
      {random_tensor({2, 2, 6, 6}, rng)});
  run("maxpool2d odd side", projected([](const In& in) { return ops::maxpool2d(in[0], 2, 2); }),
      {random_tensor({1, 2, 5, 5}, rng)});
  run("linear", projected([](const In& in) { return ops::linear(in[0], in[1], in[2]); }),
      {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)});
  run("relu", projected([](const In& in) { return ops::relu(in[0]); }), {kink_free({3, 4}, rng)});
  run("dropout", projected([](const In& in) {
        Rng r(123);
        return ops::dropout(in[0], 0.3, &r);
      }),
      {random_tensor({4, 5}, rng)});
  run("softmax axis=0", projected([](const In& in) { return ops::softmax(in[0], 0); }), {random_tensor({3, 4}, rng)});
  run("softmax axis=1", projected([](const In& in) { return ops::softmax(in[0], 1); }),
      {random_tensor({2, 3, 4}, rng)});
  run("log_softmax", projected([](const In& in) { return ops::log_softmax(in[0], 1); }),
      {random_tensor({3, 4}, rng)});
  run("mul", projected([](const In& in) { return ops::mul(in[0], in[1]); }),
      {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("add", projected([](const In& in) { return ops::add(in[0], in[1]); }),
      {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("sub", projected([](const In& in) { return ops::sub(in[0], in[1]); }),
      {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("add_bias", projected([](const In& in) { return ops::add_bias(in[0], in[1]); }),
      {random_tensor({2, 3, 4}, rng), random_tensor({4}, rng)});
  run("scale", projected([](const In& in) { return ops::scale(in[0], 2.5); }), {random_tensor({3, 4}, rng)});
  run("add_scalar", projected([](const In& in) { return ops::add_scalar(in[0], -0.7); }),
      {random_tensor({3, 4}, rng)});
  run("mul_scalar", projected([](const In& in) { return ops::mul_scalar(in[0], in[1]); }),
      {random_tensor({3, 4}, rng), random_tensor({1}, rng)});
  run("element", projected([](const In& in) { return ops::element(in[0], 2); }), {random_tensor({4}, rng)});
  run("sum_axis", projected([](const In& in) { return ops::sum_axis(in[0], 1); }), {random_tensor({2, 3, 4}, rng)});
  run("mean_axis", projected([](const In& in) { return ops::mean_axis(in[0], 2); }),
      {random_tensor({2, 3, 4}, rng)});
  run("sum_all", [](const In& in) { return ops::sum_all(in[0]); }, {random_tensor({2, 3}, rng)});
  run("reshape", projected([](const In& in) { return ops::reshape(in[0], {4, 3}); }), {random_tensor({2, 6}, rng)});
  run("concat", projected([](const In& in) { return ops::concat(in[0], in[1], 1); }),
      {random_tensor({2, 3, 2}, rng), random_tensor({2, 1, 2}, rng)});
  run("repeat_axis", projected([](const In& in) { return ops::repeat_axis(in[0], 1, 3); }),
      {random_tensor({2, 4}, rng)});
  run("extract_windows", projected([](const In& in) { return ops::extract_windows(in[0], 3); }),
      {random_tensor({2, 2, 5, 5}, rng)});
  run("inverse_sigmoid", projected([](const In& in) { return ops::inverse_sigmoid(in[0], 1e-6); }),
      {random_tensor({3, 4}, rng, 0.05, 0.95)});
  {
    const std::vector<int> labels{0, 2, 1, 2};
    run("cross_entropy", [labels](const In& in) { return ops::cross_entropy(in[0], labels); },
        {random_tensor({4, 3}, rng)});
  }

  // End-to-end toy attention model: C = 3, N = 5, W = 3 -> R = 9.
  {
    Rng init = rnd::derive(opts.seed, 1);
    const SourceGeometry geo{2, 5, 3};
    auto model = std::make_shared<AttentionModel<double>>(geo, EncoderSpec::preset(EncoderStyle::Ms, 1.0, 3, 4), 3,
                                                          0.5, init);
    Tensor64 x = random_tensor({2, 2, 5, 5}, rng);
    x.set_requires_grad(false);
    const std::vector<int> labels{1, 2};
    std::vector<Tensor64> params;
    for (auto& p : model->parameters("toy")) params.push_back(p.tensor);
    run("attention model C=3 R=9",
        [model, x, labels](const In&) {
          const auto o = model->forward(x, nullptr);
          return ops::cross_entropy(ops::scale(o.logits, 1.0 / model->temperature()), labels);
        },
        params);
    model->head.classification_only = true;
    run("attention model cls-only",
        [model, x, labels](const In&) {
          return ops::cross_entropy(ops::scale(model->forward(x, nullptr).logits, 2.0), labels);
        },
        params);
  }

  // Holistic CNN with pooling (reference branch / baseline).
  {
    Rng init = rnd::derive(opts.seed, 2);
    auto net = std::make_shared<HolisticCnn<double>>(EncoderSpec::preset(EncoderStyle::Reference, 1.0, 2, 4), 2, 8,
                                                     3, init);
    Tensor64 x = random_tensor({2, 2, 8, 8}, rng);
    x.set_requires_grad(false);
    const std::vector<int> labels{0, 2};
    std::vector<Tensor64> params;
    for (auto& p : net->parameters("cnn")) params.push_back(p.tensor);
    run("holistic cnn", [net, x, labels](const In&) { return ops::cross_entropy(net->logits(x, nullptr), labels); },
        params);
  }

  // Logit-level combination: softmax(beta) weights, inverse sigmoid, temperature.
  run("logit fusion combination",
      [](const In& in) {
        const Tensor64 alpha = ops::softmax(in[0], 0);
        Tensor64 comb = ops::mul_scalar(in[1], ops::element(alpha, 0));
        const Tensor64 lifted = ops::scale(ops::inverse_sigmoid(in[2], 1e-6), 4.0);
        comb = ops::add(comb, ops::mul_scalar(lifted, ops::element(alpha, 1)));
        const std::vector<int> labels{1, 0};
        return ops::cross_entropy(comb, labels);
      },
      {random_tensor({2}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng, 0.1, 0.9)});

  // Feature-level fusion: reference features replicated over regions and
  // prepended to each region feature, scored by a fresh head.
  {
    Rng init = rnd::derive(opts.seed, 3);
    auto head = std::make_shared<AttentionHead<double>>(5, 3, init);
    std::vector<Tensor64> params{random_tensor({2, 2}, rng), random_tensor({2, 4, 3}, rng)};
    for (auto& p : head->parameters("head")) params.push_back(p.tensor);
    run("feature fusion head",
        [head](const In& in) {
          const Tensor64 fused = ops::concat(ops::repeat_axis(in[0], 1, 4), in[1], 2);
          const std::vector<int> labels{2, 1};
          return ops::cross_entropy(ops::scale(head->forward(fused).logits, 3.0), labels);
        },
        params);
  }
  return out;
}

void write_gradcheck_report(std::ostream& os, const std::vector<GradCheckResult>& results, double tolerance) {
  char buf[256];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-4s %-28s seed=%llu checked=%zu max_rel_err=%.3e (tol %.0e)\n",
                  r.passed ? "ok" : "FAIL", r.name.c_str(), static_cast<unsigned long long>(r.seed), r.checked,
                  r.max_rel_error, tolerance);
    os << buf;
  }
}

}  // namespace msattn
