#pragma once

#include <array>
#include <cstdint>

#include <torch/torch.h>

namespace zeco {

/// Latent feature map of one volume, (c, d, h, w), same axis order as Volume3D.
struct LatentGrid {
  torch::Tensor data;

  std::int64_t channels() const { return data.size(0); }
  std::array<std::int64_t, 3> spatial_shape() const { return {data.size(1), data.size(2), data.size(3)}; }
  /// Adds the leading batch axis used by the networks.
  torch::Tensor batched() const { return data.unsqueeze(0); }
};

/// Largest divisor of `channels` not above 8; group count for GroupNorm layers.
inline std::int64_t norm_groups(std::int64_t channels) {
  for (std::int64_t g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

}  // namespace zeco
