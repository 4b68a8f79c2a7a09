#include "msattn/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "msattn/ops.hpp"

namespace msattn {

namespace {

Tensor zeros(std::size_t n) { return Tensor({n}, 0.0f); }

void append(std::vector<NamedTensor>& out, std::vector<NamedTensor> more) {
  out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
}

void freeze(const std::vector<NamedTensor>& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(false);
  }
}

Tensor clone_param(const Tensor& t) { return t.clone(); }

void append_regions(std::vector<RegionScores>& out, std::vector<RegionScores> more) {
  out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
}

}  // namespace

Tensor AttentionClassifier::scores(const SourceBatch& x, Rng* rng) const {
  auto out = model.forward(x.at(source_), rng);
  return ops::scale(out.logits, static_cast<float>(1.0 / model.temperature()));
}

FusionScheme parse_fusion_scheme(const std::string& name) {
  if (name == "ext1") return FusionScheme::ProbLevel;
  if (name == "ext2") return FusionScheme::LogitLevel;
  if (name == "ext3") return FusionScheme::FeatureLevel;
  if (name == "ext4") return FusionScheme::PixelLevel;
  throw ConfigError("unknown fusion scheme '" + name + "'");
}

std::string to_string(FusionScheme s) {
  switch (s) {
    case FusionScheme::ProbLevel: return "ext1";
    case FusionScheme::LogitLevel: return "ext2";
    case FusionScheme::FeatureLevel: return "ext3";
    case FusionScheme::PixelLevel: return "ext4";
  }
  return "?";
}

FusionConfig FusionConfig::defaults(FusionScheme scheme) {
  FusionConfig c;
  c.scheme = scheme;
  switch (scheme) {
    case FusionScheme::ProbLevel:
      c.temperatures = {1.0 / 48.0, 1.0 / 18.0};
      break;
    case FusionScheme::LogitLevel:
      c.beta = {1.0, 2.5, 1.5};
      c.temperatures = {0.25, 0.25};
      break;
    case FusionScheme::FeatureLevel:
      c.alpha = {0.74, 0.26};
      c.temperatures = {0.05, 0.025};
      c.frozen_conv_dropout = {0.5, 0.1};
      c.frozen_fc_dropout = {0.1, 0.5};
      break;
    case FusionScheme::PixelLevel:
      c.alpha = {0.76, 0.24};
      c.temperatures = {1.0 / 60.0, 1.0 / 60.0};
      break;
  }
  return c;
}

void FusionConfig::validate(std::size_t additional) const {
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw ConfigError("inverse-sigmoid epsilon must lie in (0, 0.5)");
  if (temperatures.size() != additional) {
    throw ConfigError("expected " + std::to_string(additional) + " temperatures, got " +
                      std::to_string(temperatures.size()));
  }
  for (double t : temperatures) {
    if (!(t > 0.0)) throw ConfigError("temperatures must be positive");
  }
  if (scheme == FusionScheme::LogitLevel && beta.size() != additional + 1) {
    throw ConfigError("ext2 needs one beta per source including the reference");
  }
  if (scheme == FusionScheme::FeatureLevel || scheme == FusionScheme::PixelLevel) {
    if (alpha.size() != additional) throw ConfigError("need one alpha per additional source");
    double sum = 0.0;
    for (double a : alpha) {
      if (a < 0.0) throw ConfigError("alpha weights must be nonnegative");
      sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("alpha weights must sum to 1");
  }
  if (scheme == FusionScheme::FeatureLevel) {
    if (frozen_conv_dropout.size() != additional || frozen_fc_dropout.size() != additional) {
      throw ConfigError("ext3 needs frozen-layer dropout rates per additional source");
    }
  }
}

std::vector<double> softmax_weights(const std::vector<double>& beta) {
  if (beta.empty()) return {};
  const double mx = *std::max_element(beta.begin(), beta.end());
  std::vector<double> a(beta.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] = std::exp(beta[i] - mx));
  for (auto& x : a) x /= sum;
  return a;
}

// ---- ext1 ----

ProbFusion::ProbFusion(std::shared_ptr<const BaselineClassifier> reference,
                       std::vector<std::shared_ptr<const AttentionClassifier>> branches,
                       std::vector<double> temperatures)
    : reference_(std::move(reference)), branches_(std::move(branches)), temperatures_(std::move(temperatures)) {
  if (temperatures_.size() != branches_.size()) throw ConfigError("ext1: one temperature per branch required");
  for (double t : temperatures_) {
    if (!(t > 0.0)) throw ConfigError("ext1: temperatures must be positive");
  }
  for (const auto& b : branches_) {
    if (b->classes() != reference_->classes()) throw ConfigError("ext1: branches disagree on the class count");
  }
}

std::vector<std::size_t> ProbFusion::inputs() const {
  std::set<std::size_t> s{reference_->source()};
  for (const auto& b : branches_) s.insert(b->source());
  return {s.begin(), s.end()};
}

FusionOutput ProbFusion::forward(const SourceBatch& x, Rng* rng) const {
  FusionOutput out;
  Tensor sum = ops::softmax(reference_->scores(x, rng), 1);
  for (std::size_t m = 0; m < branches_.size(); ++m) {
    auto br = branches_[m]->forward(x, rng);
    br.probs = ops::softmax(ops::scale(br.logits, static_cast<float>(1.0 / temperatures_[m])), 1);
    sum = ops::add(sum, br.probs);
    out.branches.push_back(br);
  }
  out.combined = ops::scale(sum, 1.0f / static_cast<float>(branches_.size() + 1));
  out.probs = out.combined;
  return out;
}

Tensor ProbFusion::scores(const SourceBatch& x, Rng* rng) const {
  const Tensor p = forward(x, rng).probs;
  std::vector<float> logp(p.numel());
  for (std::size_t i = 0; i < logp.size(); ++i) logp[i] = std::log(std::max(p.data()[i], 1e-30f));
  return Tensor(p.shape(), std::move(logp));
}

std::vector<NamedTensor> ProbFusion::parameters() const {
  auto out = reference_->parameters();
  for (const auto& b : branches_) append(out, b->parameters());
  return out;
}

// ---- ext2 ----

LogitFusion::LogitFusion(BaselineClassifier ref, std::vector<AttentionClassifier> brs, std::vector<double> beta0,
                         std::vector<double> temperatures, double epsilon)
    : reference(std::move(ref)), branches(std::move(brs)), temperatures_(std::move(temperatures)), epsilon_(epsilon) {
  if (beta0.size() != branches.size() + 1) throw ConfigError("ext2: need one beta per source");
  if (temperatures_.size() != branches.size()) throw ConfigError("ext2: one temperature per branch required");
  if (!(epsilon_ > 0.0 && epsilon_ < 0.5)) throw ConfigError("ext2: epsilon must lie in (0, 0.5)");
  for (const auto& b : branches) {
    if (b.classes() != reference.classes()) throw ConfigError("ext2: branches disagree on the class count");
  }
  std::vector<float> b(beta0.begin(), beta0.end());
  const std::size_t n = b.size();
  beta = Tensor({n}, std::move(b), true);
}

std::vector<std::size_t> LogitFusion::inputs() const {
  std::set<std::size_t> s{reference.source()};
  for (const auto& b : branches) s.insert(b.source());
  return {s.begin(), s.end()};
}

FusionOutput LogitFusion::forward(const SourceBatch& x, Rng* rng) const {
  FusionOutput out;
  const Tensor alpha = ops::softmax(beta, 0);
  out.combined = ops::mul_scalar(reference.scores(x, rng), ops::element(alpha, 0));
  for (std::size_t m = 0; m < branches.size(); ++m) {
    auto br = branches[m].forward(x, rng);
    const Tensor lifted = ops::scale(ops::inverse_sigmoid(br.logits, static_cast<float>(epsilon_)),
                                     static_cast<float>(1.0 / temperatures_[m]));
    out.combined = ops::add(out.combined, ops::mul_scalar(lifted, ops::element(alpha, m + 1)));
    out.branches.push_back(br);
  }
  out.probs = ops::softmax(out.combined, 1);
  return out;
}

std::vector<NamedTensor> LogitFusion::parameters() const {
  auto out = reference.parameters();
  for (const auto& b : branches) append(out, b.parameters());
  out.push_back({"fusion.beta", beta});
  return out;
}

std::vector<double> LogitFusion::alpha() const {
  return softmax_weights(std::vector<double>(beta.data().begin(), beta.data().end()));
}

// ---- ext3 ----

FeatureFusion::FeatureFusion(HolisticCnn<float> ref, std::size_t reference_source, std::vector<Branch> brs,
                             bool freeze_pretrained)
    : reference(std::move(ref)), branches(std::move(brs)), reference_source_(reference_source),
      freeze_(freeze_pretrained) {
  if (branches.empty()) throw ConfigError("ext3 needs at least one additional source");
  double sum = 0.0;
  for (const auto& b : branches) {
    if (b.head.features() != reference.feature_size() + b.encoder.feature_size()) {
      throw ConfigError("ext3: head for " + b.name + " must take " +
                        std::to_string(reference.feature_size() + b.encoder.feature_size()) + " features");
    }
    if (b.head.classes() != reference.classes()) throw ConfigError("ext3: class-space mismatch");
    if (!(b.temperature > 0.0) || b.alpha < 0.0) throw ConfigError("ext3: invalid temperature or alpha");
    sum += b.alpha;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("ext3: alpha weights must sum to 1");
  if (freeze_) {
    freeze(reference.parameters("ref"));
    for (const auto& b : branches) freeze(b.encoder.conv_parameters(b.name));
  }
}

std::vector<std::size_t> FeatureFusion::inputs() const {
  std::set<std::size_t> s{reference_source_};
  for (const auto& b : branches) s.insert(b.source);
  return {s.begin(), s.end()};
}

Tensor FeatureFusion::fused_regions(const SourceBatch& x, std::size_t b, Rng* rng) const {
  const Branch& br = branches.at(b);
  const Tensor ref = reference.features(x.at(reference_source_), rng);
  const Tensor& xm = x.at(br.source);
  const std::size_t batch = xm.dim(0);
  const std::size_t regions = region_count(xm.dim(2), br.window);
  Tensor omega = br.encoder.forward(ops::extract_windows(xm, br.window), rng);
  omega = ops::reshape(omega, {batch, regions, br.encoder.feature_size()});
  return ops::concat(ops::repeat_axis(ref, 1, regions), omega, 2);
}

FusionOutput FeatureFusion::forward(const SourceBatch& x, Rng* rng) const {
  FusionOutput out;
  const Tensor ref = reference.features(x.at(reference_source_), rng);
  for (const auto& br : branches) {
    const Tensor& xm = x.at(br.source);
    const std::size_t batch = xm.dim(0);
    const std::size_t regions = region_count(xm.dim(2), br.window);
    Tensor omega = br.encoder.forward(ops::extract_windows(xm, br.window), rng);
    omega = ops::reshape(omega, {batch, regions, br.encoder.feature_size()});
    auto o = br.head.forward(ops::concat(ops::repeat_axis(ref, 1, regions), omega, 2));
    const Tensor scaled = ops::scale(o.logits, static_cast<float>(1.0 / br.temperature));
    o.probs = ops::softmax(scaled, 1);
    const Tensor weighted = ops::scale(scaled, static_cast<float>(br.alpha));
    out.combined = out.combined.defined() ? ops::add(out.combined, weighted) : weighted;
    out.branches.push_back(o);
  }
  out.probs = ops::softmax(out.combined, 1);
  return out;
}

std::vector<NamedTensor> FeatureFusion::parameters() const {
  auto out = reference.parameters("ref");
  for (const auto& b : branches) {
    append(out, b.encoder.parameters(b.name + ".enc"));
    append(out, b.head.parameters(b.name + ".fused_head"));
  }
  return out;
}

std::vector<NamedTensor> FeatureFusion::trainable() const {
  if (!freeze_) return parameters();
  std::vector<NamedTensor> out;
  for (const auto& b : branches) {
    // the branch FC is re-initialised because the head input changed size, so it trains
    auto enc = b.encoder.parameters(b.name + ".enc");
    out.insert(out.end(), enc.begin() + static_cast<long>(b.encoder.conv_parameters("").size()), enc.end());
    append(out, b.head.parameters(b.name + ".fused_head"));
  }
  return out;
}

// ---- ext4 ----

PixelFusion::PixelFusion(HolisticCnn<float> ref, std::size_t reference_source, std::vector<Branch> brs)
    : reference(std::move(ref)), branches(std::move(brs)), reference_source_(reference_source) {
  if (branches.empty()) throw ConfigError("ext4 needs at least one additional source");
  double sum = 0.0;
  for (const auto& b : branches) {
    const auto& c0 = b.model.encoder.convs().front();
    const std::size_t k = c0.kernels.dim(2);
    if (b.psi_kernels.rank() != 2 || b.psi_kernels.dim(0) != c0.kernels.dim(0) * k * k ||
        b.psi_kernels.dim(1) != reference.feature_size()) {
      throw ConfigError("ext4: replicated-channel kernels of " + b.name + " have shape " +
                        shape_str(b.psi_kernels.shape()) + ", expected [" +
                        std::to_string(c0.kernels.dim(0) * k * k) + "," +
                        std::to_string(reference.feature_size()) + "]");
    }
    if (b.model.head.classes() != reference.classes()) throw ConfigError("ext4: class-space mismatch");
    if (!(b.temperature > 0.0) || b.alpha < 0.0) throw ConfigError("ext4: invalid temperature or alpha");
    sum += b.alpha;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("ext4: alpha weights must sum to 1");
}

std::vector<std::size_t> PixelFusion::inputs() const {
  std::set<std::size_t> s{reference_source_};
  for (const auto& b : branches) s.insert(b.source);
  return {s.begin(), s.end()};
}

AttentionOutput<float> PixelFusion::branch_forward(const Tensor& xm, const Tensor& ref, const Branch& br,
                                                   Rng* rng) const {
  const auto& c0 = br.model.encoder.convs().front();
  const std::size_t kernels = c0.kernels.dim(0), k = c0.kernels.dim(2), pad = c0.pad;
  const std::size_t w = br.model.geometry().window, regions = br.model.geometry().regions();
  const std::size_t batch = xm.dim(0);

  // A channel that is constant (= f) over the window contributes
  // sum_{u,v valid at (i,j)} K[u,v] * f to output pixel (i,j); "valid" marks
  // taps that land inside the window rather than on the zero padding.
  std::vector<float> mask(w * w * k * k, 0.0f);
  for (std::size_t i = 0; i < w; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t u = 0; u < k; ++u) {
        for (std::size_t v = 0; v < k; ++v) {
          const long y = static_cast<long>(i + u) - static_cast<long>(pad);
          const long x = static_cast<long>(j + v) - static_cast<long>(pad);
          if (y >= 0 && y < static_cast<long>(w) && x >= 0 && x < static_cast<long>(w)) {
            mask[(i * w + j) * k * k + u * k + v] = 1.0f;
          }
        }
      }
    }
  }
  const Tensor mask_t({w * w, k * k}, std::move(mask));
  Tensor g = ops::linear(ref, br.psi_kernels, zeros(kernels * k * k));       // [B, K*k*k]
  g = ops::reshape(g, {batch * kernels, k * k});
  Tensor extra = ops::linear(g, mask_t, zeros(w * w));                       // [B*K, W*W]
  extra = ops::reshape(extra, {batch, kernels, w, w});
  extra = ops::reshape(ops::repeat_axis(extra, 1, regions), {batch * regions, kernels, w, w});
  return br.model.forward(xm, rng, &extra);
}

FusionOutput PixelFusion::forward(const SourceBatch& x, Rng* rng) const {
  FusionOutput out;
  const Tensor ref = reference.features(x.at(reference_source_), rng);
  for (const auto& br : branches) {
    auto o = branch_forward(x.at(br.source), ref, br, rng);
    const Tensor weighted = ops::scale(o.logits, static_cast<float>(br.alpha / br.temperature));
    out.combined = out.combined.defined() ? ops::add(out.combined, weighted) : weighted;
    out.branches.push_back(o);
  }
  out.probs = ops::softmax(out.combined, 1);
  return out;
}

Tensor PixelFusion::widened_input(const SourceBatch& x, std::size_t b, Rng* rng) const {
  const Branch& br = branches.at(b);
  const Tensor ref = reference.features(x.at(reference_source_), rng);
  const Tensor& xm = x.at(br.source);
  const std::size_t batch = xm.dim(0), n = xm.dim(2), f = ref.dim(1);
  const Tensor planes = ops::reshape(ops::repeat_axis(ref, 2, n * n), {batch, f, n, n});
  return ops::concat(xm, planes, 1);
}

AttentionOutput<float> PixelFusion::forward_explicit(const SourceBatch& x, std::size_t b) const {
  const Branch& br = branches.at(b);
  const Tensor widened = widened_input(x, b, nullptr);
  SourceGeometry geo = br.model.geometry();
  geo.channels = br.widened_channels();
  Rng dummy(0);
  AttentionModel<float> wide(geo, br.model.encoder.spec(), br.model.head.classes(), br.model.temperature(), dummy);
  wide.encoder.copy_convs_from(br.model.encoder, 1);
  wide.encoder.copy_fc_from(br.model.encoder);
  const auto& src0 = br.model.encoder.convs().front();
  auto& dst0 = wide.encoder.convs().front();
  const std::size_t kernels = src0.kernels.dim(0), own = src0.kernels.dim(1), k = src0.kernels.dim(2);
  const std::size_t f = br.psi_kernels.dim(1), total = own + f;
  for (std::size_t kk = 0; kk < kernels; ++kk) {
    for (std::size_t uv = 0; uv < k * k; ++uv) {
      for (std::size_t c = 0; c < own; ++c) {
        dst0.kernels.raw()[(kk * total + c) * k * k + uv] = src0.kernels.raw()[(kk * own + c) * k * k + uv];
      }
      for (std::size_t c = 0; c < f; ++c) {
        dst0.kernels.raw()[(kk * total + own + c) * k * k + uv] = br.psi_kernels.raw()[(kk * k * k + uv) * f + c];
      }
    }
  }
  copy_values(dst0.bias, src0.bias);
  copy_values(wide.head.loc.weight, br.model.head.loc.weight);
  copy_values(wide.head.loc.bias, br.model.head.loc.bias);
  copy_values(wide.head.cls.weight, br.model.head.cls.weight);
  copy_values(wide.head.cls.bias, br.model.head.cls.bias);
  copy_values(wide.head.class_bias, br.model.head.class_bias);
  wide.head.classification_only = br.model.head.classification_only;
  return wide.forward(widened, nullptr);
}

std::vector<NamedTensor> PixelFusion::parameters() const {
  auto out = reference.parameters("ref");
  for (const auto& b : branches) {
    append(out, b.model.parameters(b.name));
    out.push_back({b.name + ".psi", b.psi_kernels});
  }
  return out;
}

std::vector<NamedTensor> PixelFusion::trainable() const {
  // The reference output layer is not part of this model's forward pass.
  auto out = reference.encoder.parameters("ref.enc");
  for (const auto& b : branches) {
    append(out, b.model.parameters(b.name));
    out.push_back({b.name + ".psi", b.psi_kernels});
  }
  return out;
}

// ---- combination of independently trained models ----

CombinedClassifier::CombinedClassifier(std::string kind, std::vector<std::shared_ptr<const Classifier>> parts,
                                       std::vector<double> alpha)
    : kind_(std::move(kind)), parts_(std::move(parts)), alpha_(std::move(alpha)) {
  if (parts_.empty() || parts_.size() != alpha_.size()) throw ConfigError("combine: one alpha per model required");
  double sum = 0.0;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    if (alpha_[i] < 0.0) throw ConfigError("combine: alpha weights must be nonnegative");
    if (parts_[i]->classes() != parts_.front()->classes()) throw ConfigError("combine: class-space mismatch");
    sum += alpha_[i];
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("combine: alpha weights must sum to 1");
}

std::vector<std::size_t> CombinedClassifier::inputs() const {
  std::set<std::size_t> s;
  for (const auto& p : parts_) {
    for (auto i : p->inputs()) s.insert(i);
  }
  return {s.begin(), s.end()};
}

FusionOutput CombinedClassifier::forward(const SourceBatch& x, Rng* rng) const {
  FusionOutput out;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    if (alpha_[i] == 0.0) continue;
    const Tensor s = ops::scale(parts_[i]->scores(x, rng), static_cast<float>(alpha_[i]));
    out.combined = out.combined.defined() ? ops::add(out.combined, s) : s;
  }
  out.probs = ops::softmax(out.combined, 1);
  return out;
}

std::vector<NamedTensor> CombinedClassifier::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    for (auto& p : parts_[i]->parameters()) out.push_back({"part" + std::to_string(i) + "." + p.name, p.tensor});
  }
  return out;
}

std::shared_ptr<CombinedClassifier> pairwise_then_combine(std::shared_ptr<const Classifier> first,
                                                          std::shared_ptr<const Classifier> second,
                                                          std::vector<double> alpha, const std::string& kind) {
  return std::make_shared<CombinedClassifier>(kind, std::vector<std::shared_ptr<const Classifier>>{first, second},
                                              std::move(alpha));
}

// ---- deep copies ----

ConvEncoder<float> clone_model(const ConvEncoder<float>& m) {
  ConvEncoder<float> c = m;
  for (auto& conv : c.convs()) {
    conv.kernels = clone_param(conv.kernels);
    conv.bias = clone_param(conv.bias);
  }
  c.fc().weight = clone_param(c.fc().weight);
  c.fc().bias = clone_param(c.fc().bias);
  return c;
}

HolisticCnn<float> clone_model(const HolisticCnn<float>& m) {
  HolisticCnn<float> c = m;
  c.encoder = clone_model(m.encoder);
  c.output.weight = clone_param(m.output.weight);
  c.output.bias = clone_param(m.output.bias);
  return c;
}

AttentionModel<float> clone_model(const AttentionModel<float>& m) {
  AttentionModel<float> c = m;
  c.encoder = clone_model(m.encoder);
  c.head.loc.weight = clone_param(m.head.loc.weight);
  c.head.loc.bias = clone_param(m.head.loc.bias);
  c.head.cls.weight = clone_param(m.head.cls.weight);
  c.head.cls.bias = clone_param(m.head.cls.bias);
  c.head.class_bias = clone_param(m.head.class_bias);
  return c;
}

}  // namespace msattn

namespace msattn {

std::vector<RegionScores> ProbFusion::region_scores(const SourceBatch& x) const {
  std::vector<RegionScores> out;
  for (const auto& b : branches_) append_regions(out, b->region_scores(x));
  return out;
}

std::vector<RegionScores> LogitFusion::region_scores(const SourceBatch& x) const {
  std::vector<RegionScores> out;
  for (const auto& b : branches) append_regions(out, b.region_scores(x));
  return out;
}

std::vector<RegionScores> FeatureFusion::region_scores(const SourceBatch& x) const {
  const auto f = forward(x, nullptr);
  std::vector<RegionScores> out;
  for (std::size_t i = 0; i < branches.size(); ++i) out.push_back({branches[i].source, branches[i].window, f.branches[i]});
  return out;
}

std::vector<RegionScores> PixelFusion::region_scores(const SourceBatch& x) const {
  const auto f = forward(x, nullptr);
  std::vector<RegionScores> out;
  for (std::size_t i = 0; i < branches.size(); ++i) {
    out.push_back({branches[i].source, branches[i].model.geometry().window, f.branches[i]});
  }
  return out;
}

std::vector<RegionScores> CombinedClassifier::region_scores(const SourceBatch& x) const {
  std::vector<RegionScores> out;
  for (const auto& p : parts_) append_regions(out, p->region_scores(x));
  return out;
}

}  // namespace msattn
