#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "msattn/tensor.hpp"

namespace msattn {

/// A layer stack that cannot be built for the requested input (e.g. pooling
/// collapses the feature map below 1x1).
class ArchitectureError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EncoderStyle {
  Ms,         // 3 x (3x3 conv), no pooling
  Lidar,      // 5x5, 5x5, 3x3 convs, each followed by 2x2/2 max-pooling
  Reference,  // 3 x (3x3 conv), each followed by 2x2/2 max-pooling
};

EncoderStyle parse_encoder_style(const std::string& name);
std::string to_string(EncoderStyle style);

struct ConvStage {
  std::size_t kernels = 64;  // before width scaling
  std::size_t kernel_size = 3;
  bool pool = false;
};

/// Region encoder / holistic CNN trunk: conv stages with "same" zero padding,
/// ReLU, optional 2x2 stride-2 max-pooling and dropout, then one FC + ReLU.
struct EncoderSpec {
  std::vector<ConvStage> stages;
  std::size_t features = 128;  // before width scaling
  double width_scale = 1.0;
  double conv_dropout = 0.25;
  double fc_dropout = 0.5;

  static EncoderSpec preset(EncoderStyle style, double width_scale = 1.0, std::size_t base_kernels = 64,
                            std::size_t base_features = 128);

  std::size_t kernels_at(std::size_t stage) const;
  std::size_t feature_size() const;
  /// Spatial side after the conv stack; throws ArchitectureError on collapse.
  std::size_t output_side(std::size_t input_side) const;
};

template <typename T>
struct Conv2dLayer {
  BasicTensor<T> kernels;  // [K, C, k, k]
  BasicTensor<T> bias;     // [K]
  std::size_t pad = 0;
};

template <typename T>
struct LinearLayer {
  BasicTensor<T> weight;  // [F_out, F_in]
  BasicTensor<T> bias;    // [F_out]
};

/// He-uniform kernels (fan-in = C*k*k) and zero bias.
template <typename T>
Conv2dLayer<T> make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t size,
                         std::size_t pad, Rng& rng);

/// kaiming = true: He-uniform (layers feeding ReLU); otherwise Glorot-uniform.
template <typename T>
LinearLayer<T> make_linear(std::size_t in_features, std::size_t out_features, bool kaiming, Rng& rng);

template <typename T>
void append_params(std::vector<BasicNamedTensor<T>>& out, const std::string& prefix, const Conv2dLayer<T>& c);
template <typename T>
void append_params(std::vector<BasicNamedTensor<T>>& out, const std::string& prefix, const LinearLayer<T>& l);

/// Conv trunk followed by one fully-connected feature layer.
template <typename T>
class ConvEncoder {
 public:
  ConvEncoder() = default;
  ConvEncoder(const EncoderSpec& spec, std::size_t in_channels, std::size_t in_side, Rng& rng);

  /// [B, C, S, S] -> [B, F]. Dropout is active iff `rng` is non-null.
  /// `first_extra`, when given, is added to the first conv output before its ReLU.
  BasicTensor<T> forward(const BasicTensor<T>& x, Rng* rng, const BasicTensor<T>* first_extra = nullptr) const;

  std::vector<BasicNamedTensor<T>> parameters(const std::string& prefix) const;
  std::vector<BasicNamedTensor<T>> conv_parameters(const std::string& prefix) const;

  const EncoderSpec& spec() const { return spec_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t in_side() const { return in_side_; }
  std::size_t feature_size() const { return spec_.feature_size(); }
  void set_dropout(double conv, double fc) {
    spec_.conv_dropout = conv;
    spec_.fc_dropout = fc;
  }

  std::vector<Conv2dLayer<T>>& convs() { return convs_; }
  const std::vector<Conv2dLayer<T>>& convs() const { return convs_; }
  LinearLayer<T>& fc() { return fc_; }
  const LinearLayer<T>& fc() const { return fc_; }

  /// Copies conv weights from `other` (stage-wise, shapes must agree), starting at `first_stage`.
  void copy_convs_from(const ConvEncoder& other, std::size_t first_stage = 0);
  void copy_fc_from(const ConvEncoder& other);

 private:
  EncoderSpec spec_;
  std::size_t in_channels_ = 0;
  std::size_t in_side_ = 0;
  std::vector<Conv2dLayer<T>> convs_;
  LinearLayer<T> fc_;
};

/// Overwrites dst's values with src's (identical shapes required).
template <typename T>
void copy_values(BasicTensor<T>& dst, const BasicTensor<T>& src);

std::size_t count_parameters(const std::vector<NamedTensor>& params);

extern template class ConvEncoder<float>;
extern template class ConvEncoder<double>;

}  // namespace msattn
