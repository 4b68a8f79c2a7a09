#pragma once

#include <cstddef>
#include <vector>

#include "msattn/tensor.hpp"

namespace msattn {

struct RegionOrigin {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const RegionOrigin&) const = default;
};

/// Dense stride-1 grid of W x W candidate regions cut from one neighbourhood.
struct RegionGrid {
  Tensor windows;                    // [R, B, W, W]
  std::vector<RegionOrigin> origins; // row-major, length R
  std::size_t window = 0;
  std::size_t per_side = 0;          // N - W + 1
};

/// (N - W + 1)^2; throws InvalidParameter unless 1 <= W <= N.
std::size_t region_count(std::size_t neighborhood, std::size_t window);

/// Candidate regions of an image [B, N, N]. The windows are a plain copy; the
/// batched, differentiable path used inside models is ops::extract_windows.
RegionGrid extract_proposals(const Tensor& image, std::size_t window);

/// Index of the region whose top-left corner is (row, col).
inline std::size_t region_index(const RegionGrid& grid, std::size_t row, std::size_t col) {
  return row * grid.per_side + col;
}

}  // namespace msattn
