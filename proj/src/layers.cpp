#include "msattn/layers.hpp"

#include <algorithm>
#include <cmath>

#include "msattn/ops.hpp"
#include "msattn/random.hpp"

namespace msattn {

EncoderStyle parse_encoder_style(const std::string& name) {
  if (name == "ms") return EncoderStyle::Ms;
  if (name == "lidar") return EncoderStyle::Lidar;
  if (name == "reference") return EncoderStyle::Reference;
  throw std::invalid_argument("unknown encoder style '" + name + "'");
}

std::string to_string(EncoderStyle style) {
  switch (style) {
    case EncoderStyle::Ms: return "ms";
    case EncoderStyle::Lidar: return "lidar";
    case EncoderStyle::Reference: return "reference";
  }
  return "?";
}

EncoderSpec EncoderSpec::preset(EncoderStyle style, double width_scale, std::size_t base_kernels,
                                std::size_t base_features) {
  EncoderSpec spec;
  spec.width_scale = width_scale;
  spec.features = base_features;
  switch (style) {
    case EncoderStyle::Ms:
      spec.stages = {{base_kernels, 3, false}, {base_kernels, 3, false}, {base_kernels, 3, false}};
      break;
    case EncoderStyle::Lidar:
      spec.stages = {{base_kernels, 5, true}, {base_kernels, 5, true}, {base_kernels, 3, true}};
      break;
    case EncoderStyle::Reference:
      spec.stages = {{base_kernels, 3, true}, {base_kernels, 3, true}, {base_kernels, 3, true}};
      break;
  }
  return spec;
}

std::size_t EncoderSpec::kernels_at(std::size_t stage) const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(stages.at(stage).kernels) * width_scale));
}

std::size_t EncoderSpec::feature_size() const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(features) * width_scale));
}

std::size_t EncoderSpec::output_side(std::size_t input_side) const {
  if (width_scale < 1.0) throw ArchitectureError("width scale must be >= 1");
  std::size_t side = input_side;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    // "same" padding keeps the side; odd kernels only.
    if (stages[i].kernel_size % 2 == 0) throw ArchitectureError("conv kernels must have odd size");
    if (stages[i].pool) {
      if (side < 2) {
        throw ArchitectureError("stage " + std::to_string(i) + " pools a " + std::to_string(side) + "x" +
                                std::to_string(side) + " map below 1x1");
      }
      side /= 2;
    }
  }
  if (side < 1) throw ArchitectureError("encoder collapses input below 1x1");
  return side;
}

template <typename T>
Conv2dLayer<T> make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t size,
                         std::size_t pad, Rng& rng) {
  Conv2dLayer<T> c;
  c.kernels = BasicTensor<T>({out_channels, in_channels, size, size}, T(0), true);
  c.bias = BasicTensor<T>({out_channels}, T(0), true);
  c.pad = pad;
  const double bound = std::sqrt(6.0 / static_cast<double>(in_channels * size * size));
  for (auto& v : c.kernels.data()) v = static_cast<T>(rnd::uniform(rng, -bound, bound));
  return c;
}

template <typename T>
LinearLayer<T> make_linear(std::size_t in_features, std::size_t out_features, bool kaiming, Rng& rng) {
  LinearLayer<T> l;
  l.weight = BasicTensor<T>({out_features, in_features}, T(0), true);
  l.bias = BasicTensor<T>({out_features}, T(0), true);
  const double bound = kaiming ? std::sqrt(6.0 / static_cast<double>(in_features))
                               : std::sqrt(6.0 / static_cast<double>(in_features + out_features));
  for (auto& v : l.weight.data()) v = static_cast<T>(rnd::uniform(rng, -bound, bound));
  return l;
}

template <typename T>
void append_params(std::vector<BasicNamedTensor<T>>& out, const std::string& prefix, const Conv2dLayer<T>& c) {
  out.push_back({prefix + ".kernels", c.kernels});
  out.push_back({prefix + ".bias", c.bias});
}

template <typename T>
void append_params(std::vector<BasicNamedTensor<T>>& out, const std::string& prefix, const LinearLayer<T>& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

template <typename T>
ConvEncoder<T>::ConvEncoder(const EncoderSpec& spec, std::size_t in_channels, std::size_t in_side, Rng& rng)
    : spec_(spec), in_channels_(in_channels), in_side_(in_side) {
  const std::size_t side = spec_.output_side(in_side);
  std::size_t channels = in_channels;
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    const std::size_t k = spec_.stages[i].kernel_size;
    convs_.push_back(make_conv<T>(channels, spec_.kernels_at(i), k, k / 2, rng));
    channels = spec_.kernels_at(i);
  }
  fc_ = make_linear<T>(channels * side * side, spec_.feature_size(), true, rng);
}

template <typename T>
BasicTensor<T> ConvEncoder<T>::forward(const BasicTensor<T>& x, Rng* rng, const BasicTensor<T>* first_extra) const {
  if (x.rank() != 4 || x.dim(1) != in_channels_ || x.dim(2) != in_side_ || x.dim(3) != in_side_) {
    throw DimensionError("encoder expects [B," + std::to_string(in_channels_) + "," + std::to_string(in_side_) +
                         "," + std::to_string(in_side_) + "], got " + shape_str(x.shape()));
  }
  BasicTensor<T> h = x;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = ops::conv2d(h, convs_[i].kernels, convs_[i].bias, convs_[i].pad);
    if (i == 0 && first_extra) h = ops::add(h, *first_extra);
    h = ops::relu(h);
    if (spec_.stages[i].pool) h = ops::maxpool2d(h, 2, 2);
    h = ops::dropout(h, spec_.conv_dropout, rng);
  }
  const std::size_t batch = h.dim(0);
  h = ops::reshape(h, {batch, h.numel() / batch});
  h = ops::relu(ops::linear(h, fc_.weight, fc_.bias));
  return ops::dropout(h, spec_.fc_dropout, rng);
}

template <typename T>
std::vector<BasicNamedTensor<T>> ConvEncoder<T>::conv_parameters(const std::string& prefix) const {
  std::vector<BasicNamedTensor<T>> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) append_params(out, prefix + ".conv" + std::to_string(i), convs_[i]);
  return out;
}

template <typename T>
std::vector<BasicNamedTensor<T>> ConvEncoder<T>::parameters(const std::string& prefix) const {
  auto out = conv_parameters(prefix);
  append_params(out, prefix + ".fc", fc_);
  return out;
}

template <typename T>
void copy_values(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("copy_values: " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

template <typename T>
void ConvEncoder<T>::copy_convs_from(const ConvEncoder& other, std::size_t first_stage) {
  if (other.convs_.size() != convs_.size()) throw DimensionError("copy_convs_from: stage count differs");
  for (std::size_t i = first_stage; i < convs_.size(); ++i) {
    copy_values(convs_[i].kernels, other.convs_[i].kernels);
    copy_values(convs_[i].bias, other.convs_[i].bias);
  }
}

template <typename T>
void ConvEncoder<T>::copy_fc_from(const ConvEncoder& other) {
  copy_values(fc_.weight, other.fc_.weight);
  copy_values(fc_.bias, other.fc_.bias);
}

std::size_t count_parameters(const std::vector<NamedTensor>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

template class ConvEncoder<float>;
template class ConvEncoder<double>;
template Conv2dLayer<float> make_conv(std::size_t, std::size_t, std::size_t, std::size_t, Rng&);
template Conv2dLayer<double> make_conv(std::size_t, std::size_t, std::size_t, std::size_t, Rng&);
template LinearLayer<float> make_linear(std::size_t, std::size_t, bool, Rng&);
template LinearLayer<double> make_linear(std::size_t, std::size_t, bool, Rng&);
template void append_params(std::vector<BasicNamedTensor<float>>&, const std::string&, const Conv2dLayer<float>&);
template void append_params(std::vector<BasicNamedTensor<double>>&, const std::string&, const Conv2dLayer<double>&);
template void append_params(std::vector<BasicNamedTensor<float>>&, const std::string&, const LinearLayer<float>&);
template void append_params(std::vector<BasicNamedTensor<double>>&, const std::string&, const LinearLayer<double>&);
template void copy_values(BasicTensor<float>&, const BasicTensor<float>&);
template void copy_values(BasicTensor<double>&, const BasicTensor<double>&);

}  // namespace msattn
