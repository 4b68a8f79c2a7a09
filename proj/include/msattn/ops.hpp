#pragma once

#include <cstddef>
#include <span>

#include "msattn/tensor.hpp"

// Differentiable operations. Every op records a backward rule when one of its
// inputs requires grad; reductions run in fixed row-major order.
namespace msattn::ops {

/// Cross-correlation, stride 1, symmetric zero padding `pad`.
/// input [B,C,H,W], kernels [K,C,kh,kw], bias [K] -> [B,K,H+2p-kh+1,W+2p-kw+1].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                      const BasicTensor<T>& bias, std::size_t pad = 0);

/// Max over k x k windows. Ties route the gradient to the first (row-major) element.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, std::size_t k, std::size_t stride);

/// input [B,F_in], weight [F_out,F_in], bias [F_out] -> [B,F_out].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// Inverted dropout. `rng == nullptr` means evaluation mode (exact identity).
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, Rng* rng);

/// Max-shifted softmax along `axis`.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x, std::size_t axis);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// x [..., F] + bias [F].
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);

/// x * s where s is a one-element tensor (learnable scalar weight).
template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, const BasicTensor<T>& s);

/// Element i of a rank-1 tensor as a one-element tensor.
template <typename T>
BasicTensor<T> element(const BasicTensor<T>& x, std::size_t i);

/// Sum over `axis`; the axis is removed from the shape.
template <typename T>
BasicTensor<T> sum_axis(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

template <typename T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t axis);

/// Inserts a new axis at `axis` holding `count` copies of x.
template <typename T>
BasicTensor<T> repeat_axis(const BasicTensor<T>& x, std::size_t axis, std::size_t count);

/// All stride-1 window x window crops of [B,C,N,N], row-major per image:
/// result [B*R, C, window, window] with R = (N-window+1)^2.
template <typename T>
BasicTensor<T> extract_windows(const BasicTensor<T>& images, std::size_t window);

/// ln(p/(1-p)) after clamping p to [eps, 1-eps]; zero gradient where clamped.
template <typename T>
BasicTensor<T> inverse_sigmoid(const BasicTensor<T>& p, T eps);

/// Mean negative log-likelihood of softmax(logits [B,C]) at integer labels.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

}  // namespace msattn::ops
