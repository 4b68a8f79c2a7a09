#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <numeric>

#include "helpers.hpp"
#include "msattn/attention.hpp"
#include "msattn/ops.hpp"

using namespace msattn;
using testutil::random_tensor;
using testutil::values;

namespace {

AttentionModel<float> small_model(std::size_t n, std::size_t w, std::size_t classes, std::uint64_t seed,
                                  double t = 1.0 / 60.0) {
  Rng rng(seed);
  auto spec = EncoderSpec::preset(EncoderStyle::Ms, 1.0, 6, 10);
  return AttentionModel<float>({3, n, w}, spec, classes, t, rng);
}

Tensor permute_regions(const Tensor& omega, const std::vector<std::size_t>& perm) {
  const std::size_t b = omega.dim(0), r = omega.dim(1), f = omega.dim(2);
  Tensor out(omega.shape());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < r; ++j)
      std::copy_n(omega.raw() + (i * r + perm[j]) * f, f, out.raw() + (i * r + j) * f);
  return out;
}

}  // namespace

TEST_CASE("encoder output sizes for the default widths") {
  Rng rng(1);
  const auto ms = EncoderSpec::preset(EncoderStyle::Ms);
  ConvEncoder<float> enc(ms, 8, 5, rng);
  const RegionGrid grid = extract_proposals(random_tensor({8, 12, 12}, 3), 5);
  CHECK(encode_regions(grid, enc).shape() == Shape{64, 128});

  ConvEncoder<float> wide(EncoderSpec::preset(EncoderStyle::Ms, 2.0), 8, 5, rng);
  CHECK(encode_regions(grid, wide).shape() == Shape{64, 256});
  CHECK(wide.spec().kernels_at(0) == 128);
}

TEST_CASE("lidar encoder needs W >= 8 and rejects collapse") {
  auto lidar = EncoderSpec::preset(EncoderStyle::Lidar);
  CHECK(lidar.output_side(8) >= 1);
  CHECK_THROWS_AS(lidar.output_side(4), ArchitectureError);
  Rng rng(1);
  CHECK_THROWS_AS(ConvEncoder<float>(lidar, 1, 3, rng), ArchitectureError);
}

TEST_CASE("permuting proposals permutes region features") {
  Rng rng(2);
  ConvEncoder<float> enc(EncoderSpec::preset(EncoderStyle::Ms, 1.0, 4, 8), 2, 3, rng);
  RegionGrid grid = extract_proposals(random_tensor({2, 6, 6}, 4), 3);
  const Tensor omega = encode_regions(grid, enc);
  const std::size_t r = grid.origins.size(), per = 2 * 9;
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 3, perm.end());
  RegionGrid shuffled = grid;
  shuffled.windows = Tensor(grid.windows.shape());
  for (std::size_t j = 0; j < r; ++j)
    std::copy_n(grid.windows.raw() + perm[j] * per, per, shuffled.windows.raw() + j * per);
  const Tensor omega2 = encode_regions(shuffled, enc);
  for (std::size_t j = 0; j < r; ++j)
    for (std::size_t f = 0; f < 8; ++f) CHECK(omega2.at({j, f}) == omega.at({perm[j], f}));
}

TEST_CASE("localization and classification branches normalise on different axes") {
  Rng rng(3);
  AttentionHead<float> head(10, 4, rng);
  const Tensor omega = random_tensor({2, 9, 10}, 5, -3, 3);
  const auto out = head.forward(omega);
  CHECK(out.loc_scores.shape() == Shape{2, 9, 4});
  for (float v : testutil::values(ops::sum_axis(out.loc_scores, 1))) CHECK(std::abs(v - 1.0f) <= 1e-6f);
  for (float v : testutil::values(ops::sum_axis(out.cls_scores, 2))) CHECK(std::abs(v - 1.0f) <= 1e-6f);
}

TEST_CASE("single region and single class degenerate to ones") {
  Rng rng(4);
  AttentionHead<float> head(6, 3, rng);
  const auto one_region = head.forward(random_tensor({2, 1, 6}, 6));
  for (float v : one_region.loc_scores.data()) CHECK(v == 1.0f);

  AttentionHead<float> single(6, 1, rng);
  const auto one_class = single.forward(random_tensor({2, 5, 6}, 7));
  for (float v : one_class.cls_scores.data()) CHECK(v == 1.0f);
}

TEST_CASE("zero branch weights give uniform scores and logits of 1/C") {
  Rng rng(5);
  AttentionHead<float> head(6, 4, rng);
  for (auto* l : {&head.loc, &head.cls}) {
    std::fill(l->weight.data().begin(), l->weight.data().end(), 0.0f);
    std::fill(l->bias.data().begin(), l->bias.data().end(), 0.0f);
  }
  const auto out = head.forward(random_tensor({3, 16, 6}, 8));
  for (float v : out.loc_scores.data()) CHECK(v == 1.0f / 16.0f);
  for (float v : out.cls_scores.data()) CHECK(v == 0.25f);
  for (float v : out.logits.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("aggregate is the sum over regions of loc*cls plus bias") {
  const Tensor loc = random_tensor({2, 5, 3}, 9, 0, 1);
  const Tensor cls = random_tensor({2, 5, 3}, 10, 0, 1);
  const Tensor bias({3}, std::vector<float>{0.5f, -1.0f, 2.0f});
  const Tensor logits = aggregate_regions(loc, cls, bias);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = bias.data()[c];
      for (std::size_t r = 0; r < 5; ++r) s += double(loc.at({b, r, c})) * cls.at({b, r, c});
      CHECK(logits.at({b, c}) == doctest::Approx(s).epsilon(1e-6));
    }
}

TEST_CASE("pre-bias logits stay in [0,1] and are invariant to region order") {
  Rng rng(6);
  AttentionHead<float> head(8, 5, rng);
  head.class_bias.data()[0] = 3.0f;
  head.class_bias.data()[4] = -2.0f;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Tensor omega = random_tensor({2, 12, 8}, seed, -10, 10);
    const auto out = head.forward(omega);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 5; ++c) {
        const float pre = out.logits.at({b, c}) - head.class_bias.data()[c];
        CHECK(pre >= -1e-6f);
        CHECK(pre <= 1.0f + 1e-6f);
      }
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    Rng prng(seed);
    std::shuffle(perm.begin(), perm.end(), prng);
    CHECK(testutil::max_abs_diff(head.forward(permute_regions(omega, perm)).logits, out.logits) <= 1e-6);
  }
}

TEST_CASE("with one region the logits are cls[:,0] + bias and the ablation agrees") {
  auto m = small_model(5, 5, 4, 11);
  m.head.class_bias.data()[1] = 0.75f;
  const Tensor x = random_tensor({3, 3, 5, 5}, 12);
  const auto full = m.forward(x, nullptr);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(full.logits.at({b, c}) == full.cls_scores.at({b, 0, c}) + m.head.class_bias.data()[c]);
  m.head.classification_only = true;
  CHECK(values(m.forward(x, nullptr).logits) == values(full.logits));
}

TEST_CASE("uniform localisation reproduces the classification-only ablation exactly") {
  for (std::size_t w : {3u, 4u}) {  // R = 64 and 49
    auto m = small_model(10, w, 5, 13);
    std::fill(m.head.loc.weight.data().begin(), m.head.loc.weight.data().end(), 0.0f);
    std::fill(m.head.loc.bias.data().begin(), m.head.loc.bias.data().end(), 0.0f);
    const Tensor x = random_tensor({2, 3, 10, 10}, 14);
    const auto full = m.forward(x, nullptr);
    m.head.classification_only = true;
    const auto ablated = m.forward(x, nullptr);
    CHECK(values(ablated.logits) == values(full.logits));
    CHECK(values(ablated.probs) == values(full.probs));
    // and equals the mean over regions of the class scores
    const Tensor mean = ops::add_bias(ops::mean_axis(ablated.cls_scores, 1), m.head.class_bias);
    CHECK(testutil::max_abs_diff(mean, ablated.logits) <= 1e-6);
  }
}

TEST_CASE("temperature sharpens without moving the argmax") {
  auto m = small_model(7, 3, 6, 15);
  const Tensor x = random_tensor({4, 3, 7, 7}, 16);
  const auto cold = m.forward(x, nullptr);
  m.set_temperature(1e6);
  const auto hot = m.forward(x, nullptr);
  for (float v : hot.probs.data()) CHECK(std::abs(v - 1.0f / 6.0f) <= 1e-4f);
  for (double t : {1.0 / 60.0, 0.5, 3.0}) {
    m.set_temperature(t);
    const auto o = m.forward(x, nullptr);
    for (std::size_t b = 0; b < 4; ++b) {
      auto row = [&](const Tensor& p) {
        const float* r = p.raw() + b * 6;
        return std::max_element(r, r + 6) - r;
      };
      CHECK(row(o.probs) == row(cold.logits));
    }
    for (float v : testutil::values(ops::sum_axis(o.probs, 1))) CHECK(std::abs(v - 1.0f) <= 1e-6f);
  }
  CHECK_THROWS_AS(m.set_temperature(0.0), InvalidParameter);
}

TEST_CASE("default temperature is 1/60") {
  auto m = small_model(7, 3, 2, 17);
  CHECK(m.temperature() == doctest::Approx(1.0 / 60.0));
}

TEST_CASE("region score map is min-max normalised") {
  auto m = small_model(8, 3, 3, 18);
  const auto out = m.forward(random_tensor({1, 3, 8, 8}, 19), nullptr);
  const auto map = region_score_map(out, 0, 2);
  CHECK(map.size() == 36);
  CHECK(*std::min_element(map.begin(), map.end()) == 0.0f);
  CHECK(*std::max_element(map.begin(), map.end()) == 1.0f);
}
