#pragma once

#include "msattn/layers.hpp"

namespace msattn {

/// Holistic CNN over the whole neighbourhood: encoder trunk + FC(C).
/// Serves as the reference-source branch and as the single-source baseline.
template <typename T>
class HolisticCnn {
 public:
  HolisticCnn() = default;
  HolisticCnn(const EncoderSpec& spec, std::size_t channels, std::size_t side, std::size_t classes, Rng& rng);

  /// Penultimate features [B, F_ref].
  BasicTensor<T> features(const BasicTensor<T>& x, Rng* rng) const;
  /// Unbounded class logits [B, C].
  BasicTensor<T> logits(const BasicTensor<T>& x, Rng* rng) const;
  BasicTensor<T> classify(const BasicTensor<T>& features) const;

  std::vector<BasicNamedTensor<T>> parameters(const std::string& prefix) const;

  std::size_t classes() const { return output.weight.dim(0); }
  std::size_t feature_size() const { return encoder.feature_size(); }

  ConvEncoder<T> encoder;
  LinearLayer<T> output;
};

extern template class HolisticCnn<float>;
extern template class HolisticCnn<double>;

}  // namespace msattn
