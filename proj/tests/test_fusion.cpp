#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "msattn/ops.hpp"
#include "msattn/pipeline.hpp"

using namespace msattn;
using testutil::values;

namespace {

struct Fixture {
  Dataset data;
  std::unique_ptr<ModelBank> bank;
  SourceBatch batch;

  explicit Fixture(std::size_t kernels = 4, std::size_t features = 8, double scale = 1.0) {
    GeneratorConfig g;
    g.classes = 3;
    g.max_per_class = 10;
    g.imbalance = 2.0;
    g.seed = 5;
    data = generate_dataset(g);
    PipelineConfig pc;
    pc.assemble_only = true;
    pc.widths = {kernels, features};
    pc.scale = scale;
    bank = std::make_unique<ModelBank>(data, 42, pc);
    std::vector<std::size_t> idx{0, 1, 2, 3};
    for (std::size_t s = 0; s < 3; ++s) batch.push_back(data.val.gather(s, idx));
  }
  std::shared_ptr<const Classifier> build(const std::string& kind) { return bank->build(kind, {0, 1, 2}); }
};

void check_distribution(const Tensor& p) {
  for (float v : testutil::values(ops::sum_axis(p, 1))) CHECK(std::abs(v - 1.0f) <= 1e-6f);
}

}  // namespace

TEST_CASE("default fusion settings") {
  const auto e1 = FusionConfig::defaults(FusionScheme::ProbLevel);
  CHECK(e1.temperatures == std::vector<double>{1.0 / 48.0, 1.0 / 18.0});
  const auto e2 = FusionConfig::defaults(FusionScheme::LogitLevel);
  CHECK(e2.beta == std::vector<double>{1.0, 2.5, 1.5});
  CHECK(e2.temperatures == std::vector<double>{0.25, 0.25});
  const auto e3 = FusionConfig::defaults(FusionScheme::FeatureLevel);
  CHECK(e3.alpha == std::vector<double>{0.74, 0.26});
  CHECK(e3.temperatures == std::vector<double>{0.05, 0.025});
  CHECK(e3.frozen_conv_dropout == std::vector<double>{0.5, 0.1});
  CHECK(e3.frozen_fc_dropout == std::vector<double>{0.1, 0.5});
  const auto e4 = FusionConfig::defaults(FusionScheme::PixelLevel);
  CHECK(e4.alpha == std::vector<double>{0.76, 0.24});
  for (auto s : {FusionScheme::ProbLevel, FusionScheme::LogitLevel, FusionScheme::FeatureLevel,
                 FusionScheme::PixelLevel})
    CHECK_NOTHROW(FusionConfig::defaults(s).validate(2));
}

TEST_CASE("fusion config validation") {
  auto c = FusionConfig::defaults(FusionScheme::FeatureLevel);
  c.alpha = {0.7, 0.2};
  CHECK_THROWS_AS(c.validate(2), ConfigError);
  c.alpha = {1.2, -0.2};
  CHECK_THROWS_AS(c.validate(2), ConfigError);
  auto e = FusionConfig::defaults(FusionScheme::LogitLevel);
  e.epsilon = 0.5;
  CHECK_THROWS_AS(e.validate(2), ConfigError);
  e.epsilon = 1e-6;
  e.temperatures = {0.25};
  CHECK_THROWS_AS(e.validate(2), ConfigError);
}

TEST_CASE("softmax weights") {
  CHECK(softmax_weights({0.0, 0.0}) == std::vector<double>{0.5, 0.5});
  const auto a = softmax_weights({1.0, 2.5, 1.5});
  CHECK(std::accumulate(a.begin(), a.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(a[1] > a[2]);
  CHECK(a[2] > a[0]);
}

TEST_CASE("inverse sigmoid") {
  const Tensor64 half({1}, std::vector<double>{0.5});
  CHECK(ops::inverse_sigmoid(half, 1e-6).item() == 0.0);
  const double eps = 1e-6;
  std::vector<double> z;
  for (double v = -12.0; v <= 12.0; v += 0.37) z.push_back(v);
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-z[i]));
  const Tensor64 back = ops::inverse_sigmoid(Tensor64({p.size()}, p), eps);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (p[i] > eps && p[i] < 1 - eps) CHECK(std::abs(back.data()[i] - z[i]) <= 1e-6);
  }
  // clamping keeps everything finite, including logits pushed past [0,1] by the bias
  const Tensor outside({4}, std::vector<float>{-0.5f, 0.0f, 1.0f, 1.7f});
  for (float v : testutil::values(ops::inverse_sigmoid(outside, 1e-6f))) CHECK(std::isfinite(v));
}

TEST_CASE("every scheme outputs a distribution") {
  Fixture f;
  for (const char* kind : {"ext1", "ext2", "ext3", "ext4"}) {
    INFO(kind);
    const auto m = f.build(kind);
    const Tensor s = m->scores(f.batch, nullptr);
    CHECK(s.shape() == Shape{4, 3});
    check_distribution(ops::softmax(s, 1));
    CHECK(m->region_scores(f.batch).size() == 2);
  }
}

TEST_CASE("ext1 averages the branch distributions") {
  Fixture f;
  auto ref = f.bank->baseline(0);
  auto a = f.bank->attention(1);
  auto b = f.bank->attention(2);
  ProbFusion fused(ref, {a, b}, {1.0 / 48.0, 1.0 / 18.0});
  const auto out = fused.forward(f.batch, nullptr);
  check_distribution(out.probs);
  const Tensor pr = ops::softmax(ref->scores(f.batch, nullptr), 1);
  const Tensor pa = ops::softmax(ops::scale(a->forward(f.batch, nullptr).logits, 48.0f), 1);
  const Tensor pb = ops::softmax(ops::scale(b->forward(f.batch, nullptr).logits, 18.0f), 1);
  for (std::size_t i = 0; i < out.probs.numel(); ++i)
    CHECK(out.probs.data()[i] ==
          doctest::Approx((pr.data()[i] + pa.data()[i] + pb.data()[i]) / 3.0).epsilon(1e-6));

  // branch order does not matter beyond float summation order
  ProbFusion swapped(ref, {b, a}, {1.0 / 18.0, 1.0 / 48.0});
  CHECK(testutil::max_abs_diff(swapped.forward(f.batch, nullptr).probs, out.probs) <= 1e-6);
  // softmax of the scores reproduces the averaged distribution
  CHECK(testutil::max_abs_diff(ops::softmax(fused.scores(f.batch, nullptr), 1), out.probs) <= 1e-6);
  CHECK(fused.trainable().empty());
}

TEST_CASE("ext1 of opposite certain branches is a coin flip") {
  Fixture f;
  auto ref = std::const_pointer_cast<BaselineClassifier>(f.bank->baseline(0));
  auto a = std::const_pointer_cast<AttentionClassifier>(f.bank->attention(1));
  HolisticCnn<float> r = clone_model(ref->net);
  std::fill(r.output.weight.data().begin(), r.output.weight.data().end(), 0.0f);
  r.output.bias.data()[0] = 100.0f;
  r.output.bias.data()[1] = -100.0f;
  r.output.bias.data()[2] = -100.0f;
  AttentionModel<float> am = clone_model(a->model);
  am.head.class_bias.data()[0] = -100.0f;
  am.head.class_bias.data()[1] = 100.0f;
  am.head.class_bias.data()[2] = -100.0f;
  auto rc = std::make_shared<BaselineClassifier>(0, "r", r);
  auto ac = std::make_shared<AttentionClassifier>(1, "a", am);
  const auto p = ProbFusion(rc, {ac}, {1.0 / 48.0}).forward(f.batch, nullptr).probs;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(p.at({i, 0}) == doctest::Approx(0.5));
    CHECK(p.at({i, 1}) == doctest::Approx(0.5));
  }
}

TEST_CASE("ext2 with only the reference is the reference softmax") {
  Fixture f;
  const auto ref = f.bank->baseline(0);
  LogitFusion only(*ref, {}, {0.0}, {}, 1e-6);
  const auto out = only.forward(f.batch, nullptr);
  CHECK(values(out.probs) == values(ops::softmax(ref->scores(f.batch, nullptr), 1)));
}

TEST_CASE("ext2 combines clamped inverse-sigmoid logits with softmax(beta)") {
  Fixture f;
  const auto m = std::dynamic_pointer_cast<const LogitFusion>(f.build("ext2"));
  REQUIRE(m);
  const auto alpha = m->alpha();
  CHECK(alpha == softmax_weights({1.0, 2.5, 1.5}));
  const auto out = m->forward(f.batch, nullptr);
  const Tensor ref = m->reference.scores(f.batch, nullptr);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      double expect = alpha[0] * ref.at({i, c});
      for (std::size_t b = 0; b < 2; ++b) {
        double y = out.branches[b].logits.at({i, c});
        y = std::clamp(y, 1e-6, 1 - 1e-6);
        expect += alpha[b + 1] * std::log(y / (1 - y)) / 0.25;
      }
      CHECK(out.combined.at({i, c}) == doctest::Approx(expect).epsilon(1e-4));
    }
  bool beta_trainable = false;
  for (const auto& p : m->trainable()) beta_trainable |= p.name == "fusion.beta";
  CHECK(beta_trainable);
}

TEST_CASE("ext3 fused region features and frozen pretrained layers") {
  Fixture f(64, 128);
  const auto combined = f.build("ext3");
  // pairwise parts: each FeatureFusion has one branch whose head reads 128 + 128 features
  const auto pair = std::dynamic_pointer_cast<const FeatureFusion>(f.bank->fusion(FusionScheme::FeatureLevel, {1}));
  REQUIRE(pair);
  CHECK(pair->branches.front().head.features() == 256);
  const Tensor fused = pair->fused_regions(f.batch, 0, nullptr);
  CHECK(fused.shape() == Shape{4, 64, 256});
  for (const auto& p : pair->trainable())
    CHECK((p.name.find("fused_head") != std::string::npos || p.name.find(".enc.fc") != std::string::npos));
  CHECK(pair->trainable().size() < pair->parameters().size());
}

TEST_CASE("ext3 with a zero reference feature is a plain attention head over the source features") {
  Fixture f;
  const auto pair = std::dynamic_pointer_cast<const FeatureFusion>(f.bank->fusion(FusionScheme::FeatureLevel, {1}));
  REQUIRE(pair);
  const auto& br = pair->branches.front();
  const std::size_t fref = pair->reference.feature_size(), fm = br.encoder.feature_size();
  Tensor fused = pair->fused_regions(f.batch, 0, nullptr).detach().clone();
  const std::size_t b = fused.dim(0), r = fused.dim(1);
  for (std::size_t i = 0; i < b * r; ++i) std::fill_n(fused.raw() + i * (fref + fm), fref, 0.0f);
  const auto full = br.head.forward(fused);

  Rng rng(1);
  AttentionHead<float> small(fm, 3, rng);
  for (auto [dst, src] : {std::pair{&small.loc, &br.head.loc}, std::pair{&small.cls, &br.head.cls}}) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < fm; ++j) dst->weight.at({c, j}) = src->weight.at({c, fref + j});
    copy_values(dst->bias, src->bias);
  }
  copy_values(small.class_bias, br.head.class_bias);
  Tensor omega({b, r, fm});
  for (std::size_t i = 0; i < b * r; ++i) std::copy_n(fused.raw() + i * (fref + fm) + fref, fm, omega.raw() + i * fm);
  CHECK(testutil::max_abs_diff(small.forward(omega).logits, full.logits) <= 1e-6);
}

TEST_CASE("ext3 head is invariant to region order") {
  Fixture f;
  const auto pair = std::dynamic_pointer_cast<const FeatureFusion>(f.bank->fusion(FusionScheme::FeatureLevel, {2}));
  const Tensor fused = pair->fused_regions(f.batch, 0, nullptr);
  const std::size_t b = fused.dim(0), r = fused.dim(1), w = fused.dim(2);
  Tensor rev({b, r, w});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < r; ++j) std::copy_n(fused.raw() + (i * r + j) * w, w, rev.raw() + (i * r + r - 1 - j) * w);
  const auto& head = pair->branches.front().head;
  CHECK(testutil::max_abs_diff(head.forward(rev).logits, head.forward(fused).logits) <= 1e-6);
}

TEST_CASE("ext4 widened input and the folded first convolution") {
  Fixture f(64, 128);
  const auto pair = std::dynamic_pointer_cast<const PixelFusion>(f.bank->fusion(FusionScheme::PixelLevel, {1}));
  REQUIRE(pair);
  CHECK(pair->branches.front().widened_channels() == 136);
  const Tensor wide = pair->widened_input(f.batch, 0, nullptr);
  CHECK(wide.shape() == Shape{4, 136, 12, 12});
  // every pixel carries the identical reference feature vector
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 8; c < 136; c += 17)
      for (std::size_t y = 0; y < 12; ++y)
        for (std::size_t x = 0; x < 12; ++x) CHECK(wide.at({i, c, y, x}) == wide.at({i, c, 0, 0}));
}

TEST_CASE("ext4 folded computation matches the explicit widened network") {
  Fixture f;
  for (std::size_t s : {1u, 2u}) {
    const auto pair = std::dynamic_pointer_cast<const PixelFusion>(f.bank->fusion(FusionScheme::PixelLevel, {s}));
    const auto folded = pair->forward(f.batch, nullptr).branches.front();
    const auto explicit_ = pair->forward_explicit(f.batch, 0);
    const double scale = std::max(1.0, double(*std::max_element(folded.logits.data().begin(), folded.logits.data().end())));
    CHECK(testutil::max_abs_diff(folded.logits, explicit_.logits) <= 1e-5 * scale);
    CHECK(testutil::max_abs_diff(folded.loc_scores, explicit_.loc_scores) <= 1e-5);
  }
}

TEST_CASE("pairwise combination") {
  Fixture f;
  const auto p1 = f.bank->fusion(FusionScheme::FeatureLevel, {1});
  const auto p2 = f.bank->fusion(FusionScheme::FeatureLevel, {2});
  const auto only_first = pairwise_then_combine(p1, p2, {1.0, 0.0}, "ext3");
  CHECK(values(only_first->scores(f.batch, nullptr)) == values(p1->scores(f.batch, nullptr)));

  const auto c = pairwise_then_combine(p1, p2, {0.74, 0.26}, "ext3");
  const Tensor s1 = p1->scores(f.batch, nullptr), s2 = p2->scores(f.batch, nullptr);
  const Tensor sc = c->scores(f.batch, nullptr);
  for (std::size_t i = 0; i < sc.numel(); ++i)
    CHECK(sc.data()[i] == doctest::Approx(0.74 * s1.data()[i] + 0.26 * s2.data()[i]).epsilon(1e-5));
  check_distribution(c->forward(f.batch, nullptr).probs);

  // scaling the weights before renormalisation leaves the prediction unchanged
  const double k = 3.7;
  const std::vector<double> scaled{0.74 * k / (0.74 * k + 0.26 * k), 0.26 * k / (0.74 * k + 0.26 * k)};
  const auto c2 = pairwise_then_combine(p1, p2, scaled, "ext3");
  const Tensor sc2 = c2->scores(f.batch, nullptr);
  for (std::size_t i = 0; i < 4; ++i) {
    const float* a = sc.raw() + i * 3;
    const float* b = sc2.raw() + i * 3;
    CHECK(std::max_element(a, a + 3) - a == std::max_element(b, b + 3) - b);
  }
  CHECK_THROWS_AS(pairwise_then_combine(p1, p2, {0.5, 0.6}, "ext3"), ConfigError);
}

TEST_CASE("class-space mismatch is rejected") {
  Fixture f;
  Rng rng(3);
  HolisticCnn<float> other(EncoderSpec::preset(EncoderStyle::Reference, 1.0, 4, 8), 3, 25, 5, rng);
  auto ref = std::make_shared<BaselineClassifier>(0, "ref", other);
  CHECK_THROWS_AS(ProbFusion(ref, {f.bank->attention(1)}, {0.1}), ConfigError);
  const auto p1 = f.bank->fusion(FusionScheme::FeatureLevel, {1});
  CHECK_THROWS_AS(pairwise_then_combine(p1, ref, {0.5, 0.5}, "ext3"), ConfigError);
}
