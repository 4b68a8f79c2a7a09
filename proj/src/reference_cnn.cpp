#include "msattn/reference_cnn.hpp"

#include "msattn/ops.hpp"

namespace msattn {

template <typename T>
HolisticCnn<T>::HolisticCnn(const EncoderSpec& spec, std::size_t channels, std::size_t side, std::size_t classes,
                            Rng& rng)
    : encoder(spec, channels, side, rng), output(make_linear<T>(spec.feature_size(), classes, false, rng)) {}

template <typename T>
BasicTensor<T> HolisticCnn<T>::features(const BasicTensor<T>& x, Rng* rng) const {
  return encoder.forward(x, rng);
}

template <typename T>
BasicTensor<T> HolisticCnn<T>::classify(const BasicTensor<T>& features) const {
  return ops::linear(features, output.weight, output.bias);
}

template <typename T>
BasicTensor<T> HolisticCnn<T>::logits(const BasicTensor<T>& x, Rng* rng) const {
  return classify(features(x, rng));
}

template <typename T>
std::vector<BasicNamedTensor<T>> HolisticCnn<T>::parameters(const std::string& prefix) const {
  auto out = encoder.parameters(prefix + ".enc");
  append_params(out, prefix + ".out", output);
  return out;
}

template class HolisticCnn<float>;
template class HolisticCnn<double>;

}  // namespace msattn
