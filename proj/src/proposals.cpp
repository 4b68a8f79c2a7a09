#include "msattn/proposals.hpp"

#include <string>

#include "msattn/ops.hpp"

namespace msattn {

std::size_t region_count(std::size_t neighborhood, std::size_t window) {
  if (window == 0 || window > neighborhood) {
    throw InvalidParameter("region window " + std::to_string(window) + " must lie in [1, " +
                           std::to_string(neighborhood) + "]");
  }
  const std::size_t side = neighborhood - window + 1;
  return side * side;
}

RegionGrid extract_proposals(const Tensor& image, std::size_t window) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw DimensionError("extract_proposals: expected a square [B,N,N] image, got " + shape_str(image.shape()));
  }
  const std::size_t n = image.dim(1);
  region_count(n, window);
  NoGradGuard no_grad;
  Tensor batched = ops::reshape(image.detach(), {1, image.dim(0), n, n});
  RegionGrid grid;
  grid.windows = ops::extract_windows(batched, window);
  grid.window = window;
  grid.per_side = n - window + 1;
  grid.origins.reserve(grid.per_side * grid.per_side);
  for (std::size_t r = 0; r < grid.per_side; ++r) {
    for (std::size_t c = 0; c < grid.per_side; ++c) grid.origins.push_back({r, c});
  }
  return grid;
}

}  // namespace msattn
