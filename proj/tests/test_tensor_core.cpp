#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "msattn/gradcheck.hpp"
#include "msattn/ops.hpp"
#include "msattn/optim.hpp"

using namespace msattn;
using testutil::random_tensor;
using testutil::values;

TEST_CASE("conv2d of ones with a single 2x kernel") {
  Tensor x({1, 1, 3, 3}, 1.0f);
  Tensor k({1, 1, 1, 1}, std::vector<float>{2.0f});
  Tensor b({1}, 0.0f);
  const Tensor y = ops::conv2d(x, k, b);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (float v : y.data()) CHECK(v == 2.0f);
}

TEST_CASE("conv2d of a 2x2 patch with itself is its dot product") {
  Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor b({1}, 0.0f);
  const Tensor y = ops::conv2d(x, x, b);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 30.0f);
}

TEST_CASE("conv2d rejects mismatched channels and naming the axis") {
  Tensor x({1, 2, 4, 4}, 1.0f);
  Tensor k({1, 3, 3, 3}, 1.0f);
  Tensor b({1}, 0.0f);
  CHECK_THROWS_AS(ops::conv2d(x, k, b), DimensionError);
  try {
    ops::conv2d(x, k, b);
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  Tensor big({1, 2, 5, 5}, 1.0f);
  CHECK_THROWS_AS(ops::conv2d(x, big, b), DimensionError);
}

TEST_CASE("conv2d kernel gradient of the sum matches central differences at h=1e-3") {
  GradCheckOptions opts;
  opts.step = 1e-3;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto x = random_tensor<double>({1, 2, 5, 5}, seed);
    auto k = random_tensor<double>({3, 2, 3, 3}, seed + 100, -1, 1, true);
    auto b = random_tensor<double>({3}, seed + 200, -1, 1, true);
    const auto r = check_gradient(
        "conv2d", [](const std::vector<Tensor64>& in) { return ops::sum_all(ops::conv2d(in[0], in[1], in[2])); },
        {x, k, b}, opts);
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-3);
  }
}

TEST_CASE("maxpool2d windows") {
  Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  CHECK(ops::maxpool2d(x, 2, 2).item() == 4.0f);

  std::vector<float> asc(16);
  for (int i = 0; i < 16; ++i) asc[i] = float(i);
  const Tensor y = ops::maxpool2d(Tensor({1, 1, 4, 4}, asc), 2, 2);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(values(y) == std::vector<float>{5, 7, 13, 15});

  CHECK_THROWS_AS(ops::maxpool2d(x, 0, 2), InvalidParameter);
  CHECK_THROWS_AS(ops::maxpool2d(x, 2, 0), InvalidParameter);
}

TEST_CASE("maxpool2d routes ties to the first element of each window") {
  Tensor x({1, 1, 4, 4}, 3.0f, true);
  ops::sum_all(ops::maxpool2d(x, 2, 2)).backward();
  const std::vector<float> expect{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
  CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == expect);
}

TEST_CASE("fully connected") {
  const Tensor x = random_tensor({4, 3}, 1);
  Tensor eye({3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(values(ops::linear(x, eye, Tensor({3}, 0.0f))) == values(x));

  const Tensor y = ops::linear(Tensor({1, 2}, std::vector<float>{2, 3}), Tensor({1, 2}, std::vector<float>{1, 1}),
                               Tensor({1}, std::vector<float>{1}));
  CHECK(y.item() == 6.0f);

  CHECK_THROWS_AS(ops::linear(x, Tensor({2, 4}, 0.0f), Tensor({2}, 0.0f)), DimensionError);

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = check_gradient(
        "linear", [](const std::vector<Tensor64>& in) { return ops::sum_all(ops::linear(in[0], in[1], in[2])); },
        {random_tensor<double>({3, 4}, seed, -1, 1, true), random_tensor<double>({2, 4}, seed + 1, -1, 1, true),
         random_tensor<double>({2}, seed + 2, -1, 1, true)},
        {1e-3, 1e-3, seed});
    CHECK(r.passed);
  }
}

TEST_CASE("softmax closed forms") {
  const Tensor u = ops::softmax(Tensor({3}, 0.0f), 0);
  for (float v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));

  const Tensor p = ops::softmax(Tensor({3}, std::vector<float>{float(std::log(2.0)), 0.0f, 0.0f}), 0);
  CHECK(p.data()[0] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(p.data()[1] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(p.data()[2] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("softmax slices sum to one and are shift invariant per slice") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Tensor x = random_tensor({4, 5, 6}, seed, -20, 20);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor s = ops::softmax(x, axis);
      const Tensor sums = ops::sum_axis(s, axis);
      for (float v : sums.data()) CHECK(std::abs(v - 1.0f) <= 1e-6f);
    }
    // add a different constant to every row of axis 1
    Tensor shifted = x.clone();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < 6; ++k)
        for (std::size_t j = 0; j < 5; ++j) shifted.at({i, j, k}) += float(i * 6 + k) - 7.5f;
    CHECK(testutil::max_abs_diff(ops::softmax(x, 1), ops::softmax(shifted, 1)) <= 1e-6);
  }
  const Tensor extreme = ops::softmax(Tensor({2}, std::vector<float>{1e30f, -1e30f}), 0);
  for (float v : extreme.data()) CHECK(std::isfinite(v));
}

TEST_CASE("relu, dropout, hadamard and sum_axis") {
  CHECK(values(ops::relu(Tensor({3}, std::vector<float>{-1, 0, 2}))) == std::vector<float>{0, 0, 2});

  Rng rng(3);
  const Tensor x = random_tensor({10, 10}, 4);
  CHECK(values(ops::dropout(x, 0.0, &rng)) == values(x));
  CHECK(values(ops::dropout(x, 0.7, nullptr)) == values(x));
  CHECK_THROWS_AS(ops::dropout(x, 1.0, &rng), InvalidParameter);
  CHECK_THROWS_AS(ops::dropout(x, -0.1, &rng), InvalidParameter);

  const Tensor d = ops::dropout(Tensor({1000}, 1.0f), 0.25, &rng);
  std::size_t kept = 0;
  for (float v : d.data()) {
    CHECK((v == 0.0f || v == doctest::Approx(1.0 / 0.75)));
    kept += v != 0.0f;
  }
  CHECK(kept > 650);
  CHECK(kept < 850);

  const Tensor ones({2, 3}, 1.0f);
  CHECK(values(ops::sum_axis(ops::mul(ones, ones), 1)) == std::vector<float>{3, 3});
}

TEST_CASE("adam closed forms") {
  Tensor p({1}, 0.0f, true);
  Adam opt({{"p", p}}, AdamConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});
  p.grad()[0] = 0.0f;
  opt.step();
  CHECK(p.item() == 0.0f);

  Tensor q({1}, 0.0f, true);
  Adam opt2({{"q", q}}, AdamConfig{1e-3, 0.9, 0.999, 1e-8, 0.0});
  q.grad()[0] = 1.0f;
  opt2.step();
  CHECK(q.item() == doctest::Approx(-1e-3).epsilon(1e-4));
  CHECK(opt2.step_count() == 1);
}

TEST_CASE("adam adds the L2 term before the moments") {
  // zero data gradient, param 1, l2 0.5: effective gradient 0.5 -> first step -lr
  Tensor p({1}, 1.0f, true);
  Adam opt({{"p", p}}, AdamConfig{1e-2, 0.9, 0.999, 1e-8, 0.5});
  p.grad()[0] = 0.0f;
  opt.step();
  CHECK(p.item() == doctest::Approx(1.0 - 1e-2).epsilon(1e-5));
}

TEST_CASE("adam is deterministic and names a diverging parameter") {
  auto run = [] {
    Tensor w = random_tensor({3, 4}, 9, -1, 1, true);
    Adam opt({{"w", w}});
    for (int s = 0; s < 5; ++s) {
      opt.zero_grad();
      ops::sum_all(ops::mul(w, w)).backward();
      opt.step();
    }
    return values(w);
  };
  CHECK(run() == run());

  Tensor bad({2}, 0.0f, true);
  Adam opt({{"layer.bad", bad}});
  bad.grad()[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    opt.step();
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.parameter() == "layer.bad");
  }
}

TEST_CASE("backward is deterministic and leaves finite gradients") {
  auto grads = [] {
    Tensor x = random_tensor({2, 3, 6, 6}, 5, -1, 1, true);
    Tensor k = random_tensor({4, 3, 3, 3}, 6, -1, 1, true);
    Tensor b = random_tensor({4}, 7, -1, 1, true);
    const Tensor h = ops::relu(ops::conv2d(x, k, b, 1));
    const Tensor p = ops::maxpool2d(h, 2, 2);
    const Tensor f = ops::reshape(p, {2, 4 * 9});
    const std::vector<int> labels{1, 3};
    Tensor w = random_tensor({5, 36}, 8, -1, 1, true);
    ops::cross_entropy(ops::linear(f, w, Tensor({5}, 0.0f)), labels).backward();
    std::vector<float> out(k.grad().begin(), k.grad().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  const auto g1 = grads();
  CHECK(g1 == grads());
  for (float v : g1) CHECK(std::isfinite(v));
}

TEST_CASE("no-grad guard builds no graph") {
  Tensor x({3}, 1.0f, true);
  NoGradGuard guard;
  const Tensor y = ops::scale(x, 2.0f);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gradient suite passes and the corrupted control fails") {
  for (const auto& r : run_gradcheck_suite()) {
    INFO(r.name);
    CHECK(r.passed);
  }
  const auto bad = corrupted_backward_check();
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 0.1);
}
