#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "msattn/attention.hpp"
#include "msattn/reference_cnn.hpp"

namespace msattn {

/// Inconsistent fusion weights, temperatures or branch layout.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-source input batches indexed by dataset source; entries a model does not read may be empty.
using SourceBatch = std::vector<Tensor>;

/// Region scores of one attention branch, for diagnostics.
struct RegionScores {
  std::size_t source = 0;
  std::size_t window = 0;
  AttentionOutput<float> output;
};

/// Common interface for everything the trainer fits and the evaluator scores.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::string kind() const = 0;
  /// Dataset source indices this model reads.
  virtual std::vector<std::size_t> inputs() const = 0;
  virtual std::size_t classes() const = 0;
  /// Pre-softmax scores [B, C]; the predicted distribution is softmax(scores).
  /// Dropout is active iff rng is non-null.
  virtual Tensor scores(const SourceBatch& x, Rng* rng) const = 0;
  /// Every persisted tensor.
  virtual std::vector<NamedTensor> parameters() const = 0;
  /// The subset the optimizer updates.
  virtual std::vector<NamedTensor> trainable() const { return parameters(); }
  /// Per-branch region scores in evaluation mode; empty for models without attention branches.
  virtual std::vector<RegionScores> region_scores(const SourceBatch&) const { return {}; }
};

/// Holistic CNN on one source (the baseline, and the reference branch).
class BaselineClassifier : public Classifier {
 public:
  BaselineClassifier(std::size_t source, std::string name, HolisticCnn<float> net)
      : source_(source), name_(std::move(name)), net(std::move(net)) {}
  std::string kind() const override { return "baseline"; }
  std::vector<std::size_t> inputs() const override { return {source_}; }
  std::size_t classes() const override { return net.classes(); }
  Tensor scores(const SourceBatch& x, Rng* rng) const override { return net.logits(x.at(source_), rng); }
  std::vector<NamedTensor> parameters() const override { return net.parameters(name_); }
  std::size_t source() const { return source_; }

 private:
  std::size_t source_;
  std::string name_;

 public:
  HolisticCnn<float> net;
};

/// Single-source instance attention model; scores are logits / T.
class AttentionClassifier : public Classifier {
 public:
  AttentionClassifier(std::size_t source, std::string name, AttentionModel<float> model)
      : source_(source), name_(std::move(name)), model(std::move(model)) {}
  std::string kind() const override { return model.head.classification_only ? "attention-cls-only" : "attention"; }
  std::vector<std::size_t> inputs() const override { return {source_}; }
  std::size_t classes() const override { return model.head.classes(); }
  Tensor scores(const SourceBatch& x, Rng* rng) const override;
  std::vector<NamedTensor> parameters() const override { return model.parameters(name_); }
  AttentionOutput<float> forward(const SourceBatch& x, Rng* rng) const { return model.forward(x.at(source_), rng); }
  std::vector<RegionScores> region_scores(const SourceBatch& x) const override {
    return {{source_, model.geometry().window, forward(x, nullptr)}};
  }
  std::size_t source() const { return source_; }

 private:
  std::size_t source_;
  std::string name_;

 public:
  AttentionModel<float> model;
};

enum class FusionScheme { ProbLevel, LogitLevel, FeatureLevel, PixelLevel };

FusionScheme parse_fusion_scheme(const std::string& name);  // "ext1".."ext4"
std::string to_string(FusionScheme s);

struct FusionConfig {
  FusionScheme scheme = FusionScheme::ProbLevel;
  std::vector<double> temperatures;  // one per additional source
  std::vector<double> alpha;         // fixed combination weights over additional sources (ext3/ext4)
  std::vector<double> beta;          // ext2 initial logit weights, reference first
  double epsilon = 1e-6;             // inverse-sigmoid clamp
  // ext3: dropout kept on the frozen pretrained layers, per additional source
  std::vector<double> frozen_conv_dropout;
  std::vector<double> frozen_fc_dropout;
  bool joint = false;  // ext3/ext4: one jointly trained model instead of pairwise-then-combine

  /// Default settings for two additional sources (a spectral-like first, a height-like second).
  static FusionConfig defaults(FusionScheme scheme);
  void validate(std::size_t additional_sources) const;
};

/// softmax(beta) in double precision.
std::vector<double> softmax_weights(const std::vector<double>& beta);

struct FusionOutput {
  Tensor combined;  // combined logits, or averaged probabilities for ext1
  Tensor probs;     // [B, C]
  std::vector<AttentionOutput<float>> branches;
};

/// ext1: mean of the reference softmax and each additional softmax(logits / T_m).
class ProbFusion : public Classifier {
 public:
  ProbFusion(std::shared_ptr<const BaselineClassifier> reference,
             std::vector<std::shared_ptr<const AttentionClassifier>> branches, std::vector<double> temperatures);
  FusionOutput forward(const SourceBatch& x, Rng* rng) const;
  std::string kind() const override { return "ext1"; }
  std::vector<std::size_t> inputs() const override;
  std::size_t classes() const override { return reference_->classes(); }
  /// log of the averaged distribution, so softmax(scores) reproduces it exactly.
  Tensor scores(const SourceBatch& x, Rng* rng) const override;
  std::vector<RegionScores> region_scores(const SourceBatch& x) const override;
  std::vector<NamedTensor> parameters() const override;
  std::vector<NamedTensor> trainable() const override { return {}; }

 private:
  std::shared_ptr<const BaselineClassifier> reference_;
  std::vector<std::shared_ptr<const AttentionClassifier>> branches_;
  std::vector<double> temperatures_;
};

/// ext2: alpha = softmax(beta); combined = a_1 ref_logits + sum_m a_m S^-1(clamp(y_m)) / T_m.
class LogitFusion : public Classifier {
 public:
  LogitFusion(BaselineClassifier reference, std::vector<AttentionClassifier> branches, std::vector<double> beta,
              std::vector<double> temperatures, double epsilon);
  FusionOutput forward(const SourceBatch& x, Rng* rng) const;
  std::string kind() const override { return "ext2"; }
  std::vector<std::size_t> inputs() const override;
  std::size_t classes() const override { return reference.classes(); }
  Tensor scores(const SourceBatch& x, Rng* rng) const override { return forward(x, rng).combined; }
  std::vector<RegionScores> region_scores(const SourceBatch& x) const override;
  std::vector<NamedTensor> parameters() const override;
  std::vector<double> alpha() const;

  BaselineClassifier reference;
  std::vector<AttentionClassifier> branches;
  Tensor beta;  // [M], learnable

 private:
  std::vector<double> temperatures_;
  double epsilon_;
};

/// ext3: reference penultimate features are appended to every region feature
/// of each additional source; per-source heads score the fused regions.
/// combined = sum_m alpha_m logits_m / T_m.
class FeatureFusion : public Classifier {
 public:
  struct Branch {
    std::size_t source;
    std::string name;
    ConvEncoder<float> encoder;  // pretrained convs, fresh FC
    AttentionHead<float> head;   // sized F_ref + F_m
    std::size_t window;
    double temperature;
    double alpha;
  };
  FeatureFusion(HolisticCnn<float> reference, std::size_t reference_source, std::vector<Branch> branches,
                bool freeze_pretrained);
  FusionOutput forward(const SourceBatch& x, Rng* rng) const;
  std::string kind() const override { return "ext3"; }
  std::vector<std::size_t> inputs() const override;
  std::size_t classes() const override { return reference.classes(); }
  Tensor scores(const SourceBatch& x, Rng* rng) const override { return forward(x, rng).combined; }
  std::vector<RegionScores> region_scores(const SourceBatch& x) const override;
  std::vector<NamedTensor> parameters() const override;
  std::vector<NamedTensor> trainable() const override;

  /// Region features of branch b with the reference features appended: [B, R, F_ref + F_m].
  Tensor fused_regions(const SourceBatch& x, std::size_t b, Rng* rng) const;

  HolisticCnn<float> reference;
  std::vector<Branch> branches;

 private:
  std::size_t reference_source_;
  bool freeze_;
};

/// ext4: reference features are replicated over the pixels of each additional
/// source and stacked as extra input channels of that source's attention model.
/// The constant channels are folded into the first convolution analytically
/// (see PixelBranch), which is exact and avoids materialising B_m + F_ref channels.
class PixelFusion : public Classifier {
 public:
  struct Branch {
    std::size_t source;
    std::string name;
    AttentionModel<float> model;  // first conv sees the source's own B_m channels
    Tensor psi_kernels;           // [K * k * k, F_ref]: first-conv weights of the replicated channels
    double temperature;
    double alpha;
    std::size_t widened_channels() const { return model.geometry().channels + psi_kernels.dim(1); }
  };
  PixelFusion(HolisticCnn<float> reference, std::size_t reference_source, std::vector<Branch> branches);
  FusionOutput forward(const SourceBatch& x, Rng* rng) const;
  std::string kind() const override { return "ext4"; }
  std::vector<std::size_t> inputs() const override;
  std::size_t classes() const override { return reference.classes(); }
  Tensor scores(const SourceBatch& x, Rng* rng) const override { return forward(x, rng).combined; }
  std::vector<RegionScores> region_scores(const SourceBatch& x) const override;
  std::vector<NamedTensor> parameters() const override;
  std::vector<NamedTensor> trainable() const override;

  /// Reference path: explicitly widened [B, B_m + F_ref, N, N] input through a
  /// conventional first conv. Used to verify the folded computation.
  AttentionOutput<float> forward_explicit(const SourceBatch& x, std::size_t b) const;
  /// Explicitly widened input of branch b.
  Tensor widened_input(const SourceBatch& x, std::size_t b, Rng* rng) const;

  HolisticCnn<float> reference;
  std::vector<Branch> branches;

 private:
  AttentionOutput<float> branch_forward(const Tensor& xm, const Tensor& ref_features, const Branch& br,
                                        Rng* rng) const;
  std::size_t reference_source_;
};

/// Weighted sum of the scores of independently trained models.
class CombinedClassifier : public Classifier {
 public:
  CombinedClassifier(std::string kind, std::vector<std::shared_ptr<const Classifier>> parts,
                     std::vector<double> alpha);
  FusionOutput forward(const SourceBatch& x, Rng* rng) const;
  std::string kind() const override { return kind_; }
  std::vector<std::size_t> inputs() const override;
  std::size_t classes() const override { return parts_.front()->classes(); }
  Tensor scores(const SourceBatch& x, Rng* rng) const override { return forward(x, rng).combined; }
  std::vector<RegionScores> region_scores(const SourceBatch& x) const override;
  std::vector<NamedTensor> parameters() const override;
  std::vector<NamedTensor> trainable() const override { return {}; }

 private:
  std::string kind_;
  std::vector<std::shared_ptr<const Classifier>> parts_;
  std::vector<double> alpha_;
};

std::shared_ptr<CombinedClassifier> pairwise_then_combine(std::shared_ptr<const Classifier> first,
                                                          std::shared_ptr<const Classifier> second,
                                                          std::vector<double> alpha, const std::string& kind);

/// Copy of a model with fresh parameter storage (weights are shared otherwise).
HolisticCnn<float> clone_model(const HolisticCnn<float>& m);
AttentionModel<float> clone_model(const AttentionModel<float>& m);
ConvEncoder<float> clone_model(const ConvEncoder<float>& m);

}  // namespace msattn
