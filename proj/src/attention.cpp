#include "msattn/attention.hpp"

#include <algorithm>

#include "msattn/ops.hpp"

namespace msattn {

template <typename T>
AttentionHead<T>::AttentionHead(std::size_t features, std::size_t classes, Rng& rng)
    : features_(features), classes_(classes) {
  loc = make_linear<T>(features, classes, false, rng);
  cls = make_linear<T>(features, classes, false, rng);
  class_bias = BasicTensor<T>({classes}, T(0), true);
}

template <typename T>
BasicTensor<T> AttentionHead<T>::localization(const BasicTensor<T>& omega) const {
  return ops::softmax(ops::linear(omega, loc.weight, loc.bias), 1);
}

template <typename T>
BasicTensor<T> AttentionHead<T>::classification(const BasicTensor<T>& omega) const {
  return ops::softmax(ops::linear(omega, cls.weight, cls.bias), 2);
}

template <typename T>
BasicTensor<T> aggregate_regions(const BasicTensor<T>& loc, const BasicTensor<T>& cls, const BasicTensor<T>& bias) {
  return ops::add_bias(ops::sum_axis(ops::mul(loc, cls), 1), bias);
}

template <typename T>
AttentionOutput<T> AttentionHead<T>::forward(const BasicTensor<T>& omega) const {
  if (omega.rank() != 3 || omega.dim(2) != features_) {
    throw DimensionError("attention head expects [B,R," + std::to_string(features_) + "], got " +
                         shape_str(omega.shape()));
  }
  AttentionOutput<T> out;
  out.cls_scores = classification(omega);
  if (classification_only) {
    const std::size_t regions = omega.dim(1);
    out.loc_scores = BasicTensor<T>(out.cls_scores.shape(), T(1) / static_cast<T>(regions));
    out.logits = aggregate_regions(out.loc_scores, out.cls_scores, class_bias);
  } else {
    out.loc_scores = localization(omega);
    out.logits = aggregate_regions(out.loc_scores, out.cls_scores, class_bias);
  }
  return out;
}

template <typename T>
std::vector<BasicNamedTensor<T>> AttentionHead<T>::parameters(const std::string& prefix) const {
  std::vector<BasicNamedTensor<T>> out;
  if (!classification_only) append_params(out, prefix + ".loc", loc);
  append_params(out, prefix + ".cls", cls);
  out.push_back({prefix + ".class_bias", class_bias});
  return out;
}

template <typename T>
AttentionModel<T>::AttentionModel(const SourceGeometry& geometry, const EncoderSpec& spec, std::size_t classes,
                                  double temperature, Rng& rng)
    : geometry_(geometry) {
  geometry_.regions();  // validates the window
  set_temperature(temperature);
  encoder = ConvEncoder<T>(spec, geometry.channels, geometry.window, rng);
  head = AttentionHead<T>(encoder.feature_size(), classes, rng);
}

template <typename T>
void AttentionModel<T>::set_temperature(double t) {
  if (!(t > 0.0)) throw InvalidParameter("temperature must be positive");
  temperature_ = t;
}

template <typename T>
BasicTensor<T> AttentionModel<T>::encode(const BasicTensor<T>& x, Rng* rng, const BasicTensor<T>* first_extra) const {
  if (x.rank() != 4 || x.dim(1) != geometry_.channels || x.dim(2) != geometry_.neighborhood ||
      x.dim(3) != geometry_.neighborhood) {
    throw DimensionError("attention model built for [B," + std::to_string(geometry_.channels) + "," +
                         std::to_string(geometry_.neighborhood) + "," + std::to_string(geometry_.neighborhood) +
                         "] inputs, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  auto windows = ops::extract_windows(x, geometry_.window);
  auto features = encoder.forward(windows, rng, first_extra);
  return ops::reshape(features, {batch, geometry_.regions(), encoder.feature_size()});
}

template <typename T>
AttentionOutput<T> AttentionModel<T>::forward(const BasicTensor<T>& x, Rng* rng,
                                              const BasicTensor<T>* first_extra) const {
  auto out = head.forward(encode(x, rng, first_extra));
  out.probs = ops::softmax(ops::scale(out.logits, static_cast<T>(1.0 / temperature_)), 1);
  return out;
}

template <typename T>
std::vector<BasicNamedTensor<T>> AttentionModel<T>::parameters(const std::string& prefix) const {
  auto out = encoder.parameters(prefix + ".enc");
  auto h = head.parameters(prefix + ".head");
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

template <typename T>
BasicTensor<T> encode_regions(const RegionGrid& grid, const ConvEncoder<T>& encoder) {
  BasicTensor<T> windows;
  if constexpr (std::is_same_v<T, float>) {
    windows = grid.windows;
  } else {
    std::vector<T> values(grid.windows.data().begin(), grid.windows.data().end());
    windows = BasicTensor<T>(grid.windows.shape(), std::move(values));
  }
  return encoder.forward(windows, nullptr);
}

std::vector<float> region_score_map(const AttentionOutput<float>& out, std::size_t sample, std::size_t cls) {
  const std::size_t regions = out.loc_scores.dim(1), classes = out.loc_scores.dim(2);
  std::vector<float> scores(regions);
  const float* loc = out.loc_scores.raw() + sample * regions * classes;
  const float* cl = out.cls_scores.raw() + sample * regions * classes;
  for (std::size_t r = 0; r < regions; ++r) scores[r] = loc[r * classes + cls] * cl[r * classes + cls];
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const float low = *lo, range = *hi - *lo;
  for (auto& s : scores) s = range > 0.0f ? (s - low) / range : 0.0f;
  return scores;
}

template class AttentionHead<float>;
template class AttentionHead<double>;
template class AttentionModel<float>;
template class AttentionModel<double>;
template BasicTensor<float> aggregate_regions(const BasicTensor<float>&, const BasicTensor<float>&,
                                              const BasicTensor<float>&);
template BasicTensor<double> aggregate_regions(const BasicTensor<double>&, const BasicTensor<double>&,
                                               const BasicTensor<double>&);
template BasicTensor<float> encode_regions(const RegionGrid&, const ConvEncoder<float>&);
template BasicTensor<double> encode_regions(const RegionGrid&, const ConvEncoder<double>&);

}  // namespace msattn
