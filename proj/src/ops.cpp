#include "msattn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>

namespace msattn::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using Node = detail::Node<T>;

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t kernels, kh, kw, pad;
  std::size_t out_h, out_w;
  std::size_t ckk() const { return channels * kh * kw; }
  std::size_t plane() const { return out_h * out_w; }
  std::size_t padded_h() const { return height + 2 * pad; }
  std::size_t padded_w() const { return width + 2 * pad; }
  std::size_t padded_plane() const { return padded_h() * padded_w(); }
};

// Images per im2col block; keeps the column buffer around L2 size.
std::size_t conv_block(const ConvGeometry& g) {
  const std::size_t per_image = g.ckk() * g.plane();
  return std::max<std::size_t>(1, std::min<std::size_t>(g.batch, (std::size_t{1} << 17) / per_image));
}

// Copies `count` images into a zero-bordered buffer [count, C, H+2p, W+2p].
template <typename T>
void pad_images(const T* x, const ConvGeometry& g, std::size_t first, std::size_t count, Buffer<T>& padded) {
  if (g.pad == 0) {
    padded.assign(x + first * g.channels * g.height * g.width,
                  x + (first + count) * g.channels * g.height * g.width);
    return;
  }
  padded.assign(count * g.channels * g.padded_plane(), T(0));
  for (std::size_t img = 0; img < count; ++img) {
    for (std::size_t c = 0; c < g.channels; ++c) {
      const T* src = x + ((first + img) * g.channels + c) * g.height * g.width;
      T* dst = padded.data() + (img * g.channels + c) * g.padded_plane() + g.pad * g.padded_w() + g.pad;
      for (std::size_t i = 0; i < g.height; ++i) std::copy_n(src + i * g.width, g.width, dst + i * g.padded_w());
    }
  }
}

// Strided 2-D block copy/accumulate. Output maps here are tiny (2 to 25
// pixels wide), so common widths get a compile-time row length.
template <typename T, std::size_t W, bool Add>
void rows_fixed(const T* src, std::size_t ss, T* dst, std::size_t ds, std::size_t rows) {
  for (std::size_t i = 0; i < rows; ++i, src += ss, dst += ds) {
    for (std::size_t j = 0; j < W; ++j) {
      if constexpr (Add) dst[j] += src[j]; else dst[j] = src[j];
    }
  }
}

template <typename T, bool Add>
void rows(const T* src, std::size_t ss, T* dst, std::size_t ds, std::size_t rows_n, std::size_t width) {
  switch (width) {
    case 2: return rows_fixed<T, 2, Add>(src, ss, dst, ds, rows_n);
    case 3: return rows_fixed<T, 3, Add>(src, ss, dst, ds, rows_n);
    case 4: return rows_fixed<T, 4, Add>(src, ss, dst, ds, rows_n);
    case 5: return rows_fixed<T, 5, Add>(src, ss, dst, ds, rows_n);
    case 6: return rows_fixed<T, 6, Add>(src, ss, dst, ds, rows_n);
    case 8: return rows_fixed<T, 8, Add>(src, ss, dst, ds, rows_n);
    case 12: return rows_fixed<T, 12, Add>(src, ss, dst, ds, rows_n);
    case 16: return rows_fixed<T, 16, Add>(src, ss, dst, ds, rows_n);
    default:
      for (std::size_t i = 0; i < rows_n; ++i, src += ss, dst += ds) {
        for (std::size_t j = 0; j < width; ++j) {
          if constexpr (Add) dst[j] += src[j]; else dst[j] = src[j];
        }
      }
  }
}

// col[(c,u,v), img*P + pixel] from padded images; each output row is a
// contiguous run of a padded input row.
template <typename T>
void im2col(const Buffer<T>& padded, const ConvGeometry& g, std::size_t count, T* col) {
  const std::size_t cols = count * g.plane();
  const std::size_t pw = g.padded_w();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        T* row = col + ((c * g.kh + u) * g.kw + v) * cols;
        for (std::size_t img = 0; img < count; ++img) {
          const T* src = padded.data() + (img * g.channels + c) * g.padded_plane() + u * pw + v;
          rows<T, false>(src, pw, row + img * g.plane(), g.out_w, g.out_h, g.out_w);
        }
      }
    }
  }
}

// Scatter-adds col back into padded gradient planes, then strips the border into dx.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t first, std::size_t count, Buffer<T>& padded,
                T* dx) {
  padded.assign(count * g.channels * g.padded_plane(), T(0));
  const std::size_t cols = count * g.plane();
  const std::size_t pw = g.padded_w();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        const T* row = col + ((c * g.kh + u) * g.kw + v) * cols;
        for (std::size_t img = 0; img < count; ++img) {
          T* dst = padded.data() + (img * g.channels + c) * g.padded_plane() + u * pw + v;
          rows<T, true>(row + img * g.plane(), g.out_w, dst, pw, g.out_h, g.out_w);
        }
      }
    }
  }
  for (std::size_t img = 0; img < count; ++img) {
    for (std::size_t c = 0; c < g.channels; ++c) {
      T* out = dx + ((first + img) * g.channels + c) * g.height * g.width;
      const T* src = padded.data() + (img * g.channels + c) * g.padded_plane() + g.pad * pw + g.pad;
      rows<T, true>(src, pw, out, g.width, g.height, g.width);
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                      const BasicTensor<T>& bias, std::size_t pad) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(kernels.shape(), 4, "conv2d", "kernels");
  require_rank(bias.shape(), 1, "conv2d", "bias");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.kernels = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.pad = pad;
  if (kernels.dim(1) != g.channels) {
    throw DimensionError("conv2d: channel axis mismatch, input has " + std::to_string(g.channels) +
                         " channels but kernels expect " + std::to_string(kernels.dim(1)));
  }
  if (bias.dim(0) != g.kernels) {
    throw DimensionError("conv2d: bias axis has " + std::to_string(bias.dim(0)) + " entries for " +
                         std::to_string(g.kernels) + " kernels");
  }
  if (g.kh > g.height + 2 * pad) {
    throw DimensionError("conv2d: kernel height " + std::to_string(g.kh) + " exceeds padded input height " +
                         std::to_string(g.height + 2 * pad));
  }
  if (g.kw > g.width + 2 * pad) {
    throw DimensionError("conv2d: kernel width " + std::to_string(g.kw) + " exceeds padded input width " +
                         std::to_string(g.width + 2 * pad));
  }
  g.out_h = g.height + 2 * pad - g.kh + 1;
  g.out_w = g.width + 2 * pad - g.kw + 1;

  const std::size_t block = conv_block(g);
  Buffer<T> out(g.batch * g.kernels * g.plane());
  Buffer<T> col(g.ckk() * block * g.plane());
  Buffer<T> padded;
  RowMat<T> res;
  CMapMat<T> wmat(kernels.raw(), g.kernels, g.ckk());
  for (std::size_t first = 0; first < g.batch; first += block) {
    const std::size_t count = std::min(block, g.batch - first);
    const std::size_t cols = count * g.plane();
    pad_images(input.raw(), g, first, count, padded);
    im2col(padded, g, count, col.data());
    CMapMat<T> cmat(col.data(), g.ckk(), cols);
    res.noalias() = wmat * cmat;
    for (std::size_t img = 0; img < count; ++img) {
      for (std::size_t k = 0; k < g.kernels; ++k) {
        T* dst = out.data() + ((first + img) * g.kernels + k) * g.plane();
        const T* src = res.data() + k * cols + img * g.plane();
        const T b = bias.raw()[k];
        for (std::size_t p = 0; p < g.plane(); ++p) dst[p] = src[p] + b;
      }
    }
  }

  return BasicTensor<T>::make_result(
      {g.batch, g.kernels, g.out_h, g.out_w}, std::move(out), {input, kernels, bias},
      [g, block](Node<T>& self) {
        auto& x = *self.parents[0];
        auto& w = *self.parents[1];
        auto& b = *self.parents[2];
        Buffer<T> col(g.ckk() * block * g.plane());
        Buffer<T> dcol(x.requires_grad ? col.size() : 0);
        Buffer<T> padded;
        RowMat<T> dres;
        CMapMat<T> wmat(w.data.data(), g.kernels, g.ckk());
        for (std::size_t first = 0; first < g.batch; first += block) {
          const std::size_t count = std::min(block, g.batch - first);
          const std::size_t cols = count * g.plane();
          dres.resize(static_cast<Eigen::Index>(g.kernels), static_cast<Eigen::Index>(cols));
          for (std::size_t img = 0; img < count; ++img) {
            for (std::size_t k = 0; k < g.kernels; ++k) {
              const T* src = self.grad.data() + ((first + img) * g.kernels + k) * g.plane();
              std::copy(src, src + g.plane(), dres.data() + k * cols + img * g.plane());
            }
          }
          if (b.requires_grad) {
            for (std::size_t k = 0; k < g.kernels; ++k) {
              const T* row = dres.data() + k * cols;
              T acc = T(0);
              for (std::size_t p = 0; p < cols; ++p) acc += row[p];
              b.grad[k] += acc;
            }
          }
          if (w.requires_grad) {
            pad_images(x.data.data(), g, first, count, padded);
            im2col(padded, g, count, col.data());
            CMapMat<T> cmat(col.data(), g.ckk(), cols);
            MapMat<T> dw(w.grad.data(), g.kernels, g.ckk());
            dw.noalias() += dres * cmat.transpose();
          }
          if (x.requires_grad) {
            MapMat<T> dc(dcol.data(), g.ckk(), cols);
            dc.noalias() = wmat.transpose() * dres;
            col2im_add(dcol.data(), g, first, count, padded, x.grad.data());
          }
        }
      });
}

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, std::size_t k, std::size_t stride) {
  if (k == 0 || stride == 0) throw InvalidParameter("maxpool2d: kernel size and stride must be positive");
  require_rank(input.shape(), 4, "maxpool2d", "input");
  const std::size_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < k || w < k) {
    throw DimensionError("maxpool2d: spatial extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " smaller than window " + std::to_string(k));
  }
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Buffer<T> out(b * c * oh * ow);
  std::vector<std::uint32_t> argmax(out.size());
  const T* x = input.raw();
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const T* src = x + plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (i * stride) * w + j * stride;
        for (std::size_t u = 0; u < k; ++u) {
          for (std::size_t v = 0; v < k; ++v) {
            const std::size_t idx = (i * stride + u) * w + j * stride + v;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = plane * oh * ow + i * ow + j;
        out[o] = src[best];
        argmax[o] = static_cast<std::uint32_t>(plane * h * w + best);
      }
    }
  }
  return BasicTensor<T>::make_result({b, c, oh, ow}, std::move(out), {input},
                                     [argmax = std::move(argmax)](Node<T>& self) {
                                       auto& x = *self.parents[0];
                                       for (std::size_t o = 0; o < argmax.size(); ++o) {
                                         x.grad[argmax[o]] += self.grad[o];
                                       }
                                     });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank(weight.shape(), 2, "linear", "weight");
  require_rank(bias.shape(), 1, "linear", "bias");
  if (input.rank() < 1) throw DimensionError("linear: input must have rank >= 1");
  const std::size_t fin = input.shape().back();
  const std::size_t fout = weight.dim(0);
  if (weight.dim(1) != fin) {
    throw DimensionError("linear: input feature axis has " + std::to_string(fin) +
                         " entries but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != fout) {
    throw DimensionError("linear: bias axis has " + std::to_string(bias.dim(0)) + " entries, expected " +
                         std::to_string(fout));
  }
  const std::size_t rows = input.numel() / fin;
  Buffer<T> out(rows * fout);
  {
    CMapMat<T> x(input.raw(), rows, fin);
    CMapMat<T> wm(weight.raw(), fout, fin);
    MapMat<T> y(out.data(), rows, fout);
    y.noalias() = x * wm.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.raw(), fout);
    y.rowwise() += bv;
  }
  Shape shape = input.shape();
  shape.back() = fout;
  return BasicTensor<T>::make_result(
      std::move(shape), std::move(out), {input, weight, bias}, [rows, fin, fout](Node<T>& self) {
        auto& x = *self.parents[0];
        auto& w = *self.parents[1];
        auto& b = *self.parents[2];
        CMapMat<T> dy(self.grad.data(), rows, fout);
        if (x.requires_grad) {
          MapMat<T> dx(x.grad.data(), rows, fin);
          dx.noalias() += dy * CMapMat<T>(w.data.data(), fout, fin);
        }
        if (w.requires_grad) {
          MapMat<T> dw(w.grad.data(), fout, fin);
          dw.noalias() += dy.transpose() * CMapMat<T>(x.data.data(), rows, fin);
        }
        if (b.requires_grad) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < fout; ++o) b.grad[o] += self.grad[r * fout + o];
          }
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  Buffer<T> out(x.numel());
  const T* src = x.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] > T(0) ? src[i] : T(0);
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      if (p.data[i] > T(0)) p.grad[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, Rng* rng) {
  if (!(p >= 0.0) || p >= 1.0) {
    throw InvalidParameter("dropout: drop probability must lie in [0,1), got " + std::to_string(p));
  }
  if (rng == nullptr || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  // 32-bit thresholds from a splitmix64 stream seeded by one draw of `rng`.
  const auto threshold = static_cast<std::uint64_t>(p * 4294967296.0);
  std::uint64_t state = (*rng)();
  Buffer<T> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    mask[i] = (z & 0xFFFFFFFFULL) < threshold ? T(0) : keep_scale;
    if (i + 1 < mask.size()) mask[i + 1] = (z >> 32) < threshold ? T(0) : keep_scale;
  }
  Buffer<T> out(x.numel());
  const T* src = x.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] * mask[i];
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x},
                                     [mask = std::move(mask)](Node<T>& self) {
                                       auto& px = *self.parents[0];
                                       for (std::size_t i = 0; i < mask.size(); ++i) {
                                         px.grad[i] += self.grad[i] * mask[i];
                                       }
                                     });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "softmax");
  Buffer<T> out(x.numel());
  const T* src = x.raw();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, src[base + i * s.inner]);
      T total = T(0);
      for (std::size_t i = 0; i < s.n; ++i) {
        const T e = std::exp(src[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  }
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T dot = T(0);
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          dot += self.grad[k] * self.data[k];
        }
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          px.grad[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "log_softmax");
  Buffer<T> out(x.numel());
  const T* src = x.raw();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, src[base + i * s.inner]);
      T total = T(0);
      for (std::size_t i = 0; i < s.n; ++i) total += std::exp(src[base + i * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] = src[base + i * s.inner] - lse;
    }
  }
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T total = T(0);
        for (std::size_t i = 0; i < s.n; ++i) total += self.grad[base + i * s.inner];
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          px.grad[k] += self.grad[k] - std::exp(self.data[k]) * total;
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] * b.raw()[i];
  return BasicTensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] + b.raw()[i];
  return BasicTensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (int side = 0; side < 2; ++side) {
      auto& p = *self.parents[side];
      if (!p.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  require_rank(bias.shape(), 1, "add_bias", "bias");
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: last axis of " + shape_str(x.shape()) + " does not match bias " +
                         shape_str(bias.shape()));
  }
  const std::size_t f = bias.dim(0);
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.raw()[i] + bias.raw()[i % f];
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x, bias}, [f](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % f] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.raw()[i] * factor;
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.raw()[i] + value;
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, const BasicTensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: scale must have exactly one element");
  const T factor = s.raw()[0];
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.raw()[i] * factor;
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x, s}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    const T factor = ps.data[0];
    if (px.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * factor;
    }
    if (ps.requires_grad) {
      T acc = T(0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.data[i];
      ps.grad[0] += acc;
    }
  });
}

template <typename T>
BasicTensor<T> element(const BasicTensor<T>& x, std::size_t i) {
  require_rank(x.shape(), 1, "element", "input");
  if (i >= x.dim(0)) throw DimensionError("element: index " + std::to_string(i) + " out of range");
  return BasicTensor<T>::make_result({1}, {x.raw()[i]}, {x}, [i](Node<T>& self) {
    self.parents[0]->grad[i] += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> sum_axis(const BasicTensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "sum_axis");
  Buffer<T> out(s.outer * s.inner, T(0));
  const T* src = x.raw();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.n; ++i) {
      const T* row = src + (o * s.n + i) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += row[in];
    }
  }
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape.push_back(1);
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {x}, [s](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.n; ++i) {
        T* row = p.grad.data() + (o * s.n + i) * s.inner;
        const T* g = self.grad.data() + o * s.inner;
        for (std::size_t in = 0; in < s.inner; ++in) row[in] += g[in];
      }
    }
  });
}

template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis) {
  const std::size_t n = x.dim(axis);
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(n));
}

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
  T acc = T(0);
  for (auto v : x.data()) acc += v;
  return BasicTensor<T>::make_result({1}, {acc}, {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Buffer<T> out(x.data().begin(), x.data().end());
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t axis) {
  if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw DimensionError("concat: axis " + std::to_string(i) + " differs, " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
    }
  }
  const AxisSplit sa = split_at(a.shape(), axis, "concat");
  const AxisSplit sb = split_at(b.shape(), axis, "concat");
  const std::size_t la = sa.n * sa.inner, lb = sb.n * sb.inner;
  Buffer<T> out(a.numel() + b.numel());
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(a.raw() + o * la, la, out.data() + o * (la + lb));
    std::copy_n(b.raw() + o * lb, lb, out.data() + o * (la + lb) + la);
  }
  Shape shape = a.shape();
  shape[axis] += b.dim(axis);
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {a, b},
                                     [outer = sa.outer, la, lb](Node<T>& self) {
                                       auto& pa = *self.parents[0];
                                       auto& pb = *self.parents[1];
                                       for (std::size_t o = 0; o < outer; ++o) {
                                         const T* g = self.grad.data() + o * (la + lb);
                                         if (pa.requires_grad) {
                                           for (std::size_t i = 0; i < la; ++i) pa.grad[o * la + i] += g[i];
                                         }
                                         if (pb.requires_grad) {
                                           for (std::size_t i = 0; i < lb; ++i) pb.grad[o * lb + i] += g[la + i];
                                         }
                                       }
                                     });
}

template <typename T>
BasicTensor<T> repeat_axis(const BasicTensor<T>& x, std::size_t axis, std::size_t count) {
  if (axis > x.rank()) throw DimensionError("repeat_axis: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis; i < x.rank(); ++i) inner *= x.dim(i);
  Buffer<T> out(outer * count * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < count; ++r) {
      std::copy_n(x.raw() + o * inner, inner, out.data() + (o * count + r) * inner);
    }
  }
  Shape shape = x.shape();
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {x},
                                     [outer, count, inner](Node<T>& self) {
                                       auto& p = *self.parents[0];
                                       for (std::size_t o = 0; o < outer; ++o) {
                                         for (std::size_t r = 0; r < count; ++r) {
                                           const T* g = self.grad.data() + (o * count + r) * inner;
                                           for (std::size_t i = 0; i < inner; ++i) p.grad[o * inner + i] += g[i];
                                         }
                                       }
                                     });
}

template <typename T>
BasicTensor<T> extract_windows(const BasicTensor<T>& images, std::size_t window) {
  require_rank(images.shape(), 4, "extract_windows", "images");
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (window == 0 || window > h || window > w) {
    throw InvalidParameter("extract_windows: window " + std::to_string(window) + " does not fit " +
                           std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t rh = h - window + 1, rw = w - window + 1, regions = rh * rw;
  const std::size_t win_area = window * window;
  Buffer<T> out(b * regions * c * win_area);
  const T* src = images.raw();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t oi = 0; oi < rh; ++oi) {
      for (std::size_t oj = 0; oj < rw; ++oj) {
        T* dst = out.data() + ((n * regions) + oi * rw + oj) * c * win_area;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* plane = src + (n * c + ch) * h * w;
          for (std::size_t u = 0; u < window; ++u) {
            std::copy_n(plane + (oi + u) * w + oj, window, dst + ch * win_area + u * window);
          }
        }
      }
    }
  }
  return BasicTensor<T>::make_result(
      {b * regions, c, window, window}, std::move(out), {images},
      [b, c, h, w, window, rh, rw](Node<T>& self) {
        auto& p = *self.parents[0];
        const std::size_t regions = rh * rw, win_area = window * window;
        for (std::size_t n = 0; n < b; ++n) {
          for (std::size_t oi = 0; oi < rh; ++oi) {
            for (std::size_t oj = 0; oj < rw; ++oj) {
              const T* g = self.grad.data() + ((n * regions) + oi * rw + oj) * c * win_area;
              for (std::size_t ch = 0; ch < c; ++ch) {
                T* plane = p.grad.data() + (n * c + ch) * h * w;
                for (std::size_t u = 0; u < window; ++u) {
                  for (std::size_t v = 0; v < window; ++v) {
                    plane[(oi + u) * w + oj + v] += g[ch * win_area + u * window + v];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> inverse_sigmoid(const BasicTensor<T>& p, T eps) {
  if (!(eps > T(0) && eps < T(0.5))) throw InvalidParameter("inverse_sigmoid: eps must lie in (0, 0.5)");
  Buffer<T> out(p.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T q = std::clamp(p.raw()[i], eps, T(1) - eps);
    out[i] = std::log(q / (T(1) - q));
  }
  return BasicTensor<T>::make_result(p.shape(), std::move(out), {p}, [eps](Node<T>& self) {
    auto& pp = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T q = pp.data[i];
      if (q > eps && q < T(1) - eps) pp.grad[i] += self.grad[i] / (q * (T(1) - q));
    }
  });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy", "logits");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw DimensionError("cross_entropy: label count does not match batch axis");
  Buffer<T> probs(b * c);
  T loss = T(0);
  for (std::size_t n = 0; n < b; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DimensionError("cross_entropy: label " + std::to_string(y) + " outside class axis");
    }
    const T* row = logits.raw() + n * c;
    const T mx = *std::max_element(row, row + c);
    T total = T(0);
    for (std::size_t k = 0; k < c; ++k) {
      probs[n * c + k] = std::exp(row[k] - mx);
      total += probs[n * c + k];
    }
    for (std::size_t k = 0; k < c; ++k) probs[n * c + k] /= total;
    loss -= row[y] - mx - std::log(total);
  }
  loss /= static_cast<T>(b);
  std::vector<int> ys(labels.begin(), labels.end());
  return BasicTensor<T>::make_result(
      {1}, {loss}, {logits}, [probs = std::move(probs), ys = std::move(ys), b, c](Node<T>& self) {
        auto& p = *self.parents[0];
        const T g = self.grad[0] / static_cast<T>(b);
        for (std::size_t n = 0; n < b; ++n) {
          for (std::size_t k = 0; k < c; ++k) {
            const T onehot = static_cast<int>(k) == ys[n] ? T(1) : T(0);
            p.grad[n * c + k] += g * (probs[n * c + k] - onehot);
          }
        }
      });
}

#define MSATTN_INSTANTIATE(T)                                                                        \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                 std::size_t);                                                        \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, std::size_t, std::size_t);                 \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng*);                               \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&, std::size_t);                            \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> add_bias(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                            \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                       \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> element(const BasicTensor<T>&, std::size_t);                                \
  template BasicTensor<T> sum_axis(const BasicTensor<T>&, std::size_t);                               \
  template BasicTensor<T> mean_axis(const BasicTensor<T>&, std::size_t);                              \
  template BasicTensor<T> sum_all(const BasicTensor<T>&);                                             \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                      \
  template BasicTensor<T> concat(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t);          \
  template BasicTensor<T> repeat_axis(const BasicTensor<T>&, std::size_t, std::size_t);               \
  template BasicTensor<T> extract_windows(const BasicTensor<T>&, std::size_t);                        \
  template BasicTensor<T> inverse_sigmoid(const BasicTensor<T>&, T);                                  \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>);

MSATTN_INSTANTIATE(float)
MSATTN_INSTANTIATE(double)

#undef MSATTN_INSTANTIATE

}  // namespace msattn::ops
