#pragma once

#include <cstddef>
#include <vector>

#include "msattn/layers.hpp"
#include "msattn/proposals.hpp"
#include "msattn/tensor.hpp"

namespace msattn {

/// Batched region scores of the two-branch head. Region-major layout:
/// per sample the [R, C] slice is the transpose of the per-class score matrix.
template <typename T>
struct AttentionOutput {
  BasicTensor<T> loc_scores;  // [B, R, C]  softmax over R for each class
  BasicTensor<T> cls_scores;  // [B, R, C]  softmax over C for each region
  BasicTensor<T> logits;      // [B, C]     sum_r loc * cls + class bias
  BasicTensor<T> probs;       // [B, C]     softmax(logits / T)
};

/// Localisation x classification head applied to per-region features.
template <typename T>
class AttentionHead {
 public:
  AttentionHead() = default;
  AttentionHead(std::size_t features, std::size_t classes, Rng& rng);

  /// omega [B, R, F] -> scores and logits (probs left empty).
  AttentionOutput<T> forward(const BasicTensor<T>& omega) const;

  BasicTensor<T> localization(const BasicTensor<T>& omega) const;
  BasicTensor<T> classification(const BasicTensor<T>& omega) const;

  std::vector<BasicNamedTensor<T>> parameters(const std::string& prefix) const;

  std::size_t classes() const { return classes_; }
  std::size_t features() const { return features_; }

  /// Ablation: the localisation branch is replaced by uniform 1/R weights.
  bool classification_only = false;

  LinearLayer<T> loc;
  LinearLayer<T> cls;
  BasicTensor<T> class_bias;  // [C], initialised to zero

 private:
  std::size_t features_ = 0;
  std::size_t classes_ = 0;
};

/// logits [B,C] = sum over regions of loc * cls, plus bias.
template <typename T>
BasicTensor<T> aggregate_regions(const BasicTensor<T>& loc, const BasicTensor<T>& cls, const BasicTensor<T>& bias);

struct SourceGeometry {
  std::size_t channels = 0;
  std::size_t neighborhood = 0;
  std::size_t window = 0;
  std::size_t regions() const { return region_count(neighborhood, window); }
};

/// Single-source weakly supervised instance attention model.
template <typename T>
class AttentionModel {
 public:
  AttentionModel() = default;
  AttentionModel(const SourceGeometry& geometry, const EncoderSpec& spec, std::size_t classes, double temperature,
                 Rng& rng);

  /// x [B, Ch, N, N] -> omega [B, R, F]. `first_extra` ([B*R, K, W, W]) is
  /// added to the encoder's first conv output.
  BasicTensor<T> encode(const BasicTensor<T>& x, Rng* rng, const BasicTensor<T>* first_extra = nullptr) const;
  AttentionOutput<T> forward(const BasicTensor<T>& x, Rng* rng, const BasicTensor<T>* first_extra = nullptr) const;

  std::vector<BasicNamedTensor<T>> parameters(const std::string& prefix) const;

  const SourceGeometry& geometry() const { return geometry_; }
  double temperature() const { return temperature_; }
  void set_temperature(double t);

  ConvEncoder<T> encoder;
  AttentionHead<T> head;

 private:
  SourceGeometry geometry_;
  double temperature_ = 1.0;
};

/// Encodes an explicit proposal grid ([R,B,W,W] windows) into [R, F] features.
template <typename T>
BasicTensor<T> encode_regions(const RegionGrid& grid, const ConvEncoder<T>& encoder);

/// Region scores loc * cls for one sample and class, min-max normalised to [0,1].
std::vector<float> region_score_map(const AttentionOutput<float>& out, std::size_t sample, std::size_t cls);

extern template class AttentionHead<float>;
extern template class AttentionHead<double>;
extern template class AttentionModel<float>;
extern template class AttentionModel<double>;

}  // namespace msattn
