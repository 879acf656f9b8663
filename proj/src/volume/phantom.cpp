#include <algorithm>
#include <cmath>
#include <random>

#include "zeco/error.hpp"
#include "zeco/volume.hpp"

namespace zeco {

namespace {

constexpr double kBackground = 0.0;
constexpr double kTissue = 0.5;
constexpr double kFlairLesion = 0.92;
constexpr double kT1Lesion = 0.12;
constexpr double kHeadEdgeWidth = 1.5;  // voxels over which tissue ramps up from background
constexpr int kLatticeCells = 4;        // value-noise lattice cells per axis
constexpr int kPlacementRetries = 200;

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

// Trilinear interpolation of a coarse random lattice spanning the grid.
class ValueNoise {
 public:
  ValueNoise(std::mt19937_64& rng, std::array<std::int64_t, 3> shape) : shape_(shape) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    lattice_.resize(kN * kN * kN);
    for (auto& v : lattice_) v = u(rng);
  }

  double operator()(std::int64_t z, std::int64_t y, std::int64_t x) const {
    const double fz = coord(z, 0), fy = coord(y, 1), fx = coord(x, 2);
    const int iz = std::min(static_cast<int>(fz), kN - 2);
    const int iy = std::min(static_cast<int>(fy), kN - 2);
    const int ix = std::min(static_cast<int>(fx), kN - 2);
    const double tz = fz - iz, ty = fy - iy, tx = fx - ix;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dz ? tz : 1 - tz) * (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx);
          acc += w * lattice_[((iz + dz) * kN + (iy + dy)) * kN + (ix + dx)];
        }
    return acc;
  }

 private:
  static constexpr int kN = kLatticeCells + 1;

  double coord(std::int64_t i, int axis) const {
    const auto n = shape_[axis];
    return n > 1 ? static_cast<double>(i) * kLatticeCells / static_cast<double>(n - 1) : 0.0;
  }

  std::array<std::int64_t, 3> shape_;
  std::vector<double> lattice_;
};

struct Lesion {
  std::array<double, 3> center;
  double radius;
};

std::array<double, 3> grid_center(const PhantomSpec& spec) {
  return {(spec.grid_shape[0] - 1) / 2.0, (spec.grid_shape[1] - 1) / 2.0, (spec.grid_shape[2] - 1) / 2.0};
}

double ellipsoid_radius(const std::array<double, 3>& p, const std::array<double, 3>& c,
                        const std::array<double, 3>& axes) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - c[a]) / axes[a];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

void PhantomSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (grid_shape[a] < 8) throw Error(ErrorCode::InvalidArgument, "phantom grid extents must be >= 8");
    if (head_axes[a] <= 0.0 || head_axes[a] > (grid_shape[a] - 1) / 2.0) {
      throw Error(ErrorCode::InvalidArgument, "head semi-axis " + std::to_string(head_axes[a]) +
                                                  " does not fit the grid");
    }
  }
  if (tumor_count_range.first < 0 || tumor_count_range.first > tumor_count_range.second) {
    throw Error(ErrorCode::InvalidArgument, "tumor_count_range must be a nonempty range of counts");
  }
  if (tumor_count_range.second > 255) throw Error(ErrorCode::InvalidArgument, "at most 255 lesions");
  if (tumor_radius_range.first < 1.0 || tumor_radius_range.first > tumor_radius_range.second) {
    throw Error(ErrorCode::InvalidArgument, "tumor_radius_range must be nonempty with radii >= 1");
  }
  const double min_axis = *std::min_element(head_axes.begin(), head_axes.end());
  if (tumor_count_range.second > 0 && tumor_radius_range.second >= min_axis - 1.0) {
    throw Error(ErrorCode::InvalidArgument, "largest tumor radius does not fit inside the head ellipsoid");
  }
  if (smooth_noise_scale < 0.0) throw Error(ErrorCode::InvalidArgument, "smooth_noise_scale must be >= 0");
}

torch::Tensor head_region(const PhantomSpec& spec) {
  const auto [D, H, W] = spec.grid_shape;
  const auto c = grid_center(spec);
  auto region = torch::zeros({D, H, W}, torch::kBool);
  auto acc = region.accessor<bool, 3>();
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const std::array<double, 3> p{double(z), double(y), double(x)};
        acc[z][y][x] = ellipsoid_radius(p, c, spec.head_axes) <= 1.0;
      }
  return region;
}

std::pair<Volume3D, SegMask3D> generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const auto [D, H, W] = spec.grid_shape;
  const auto center = grid_center(spec);
  const double min_axis = *std::min_element(spec.head_axes.begin(), spec.head_axes.end());

  ValueNoise texture(rng, spec.grid_shape);

  std::uniform_int_distribution<int> count_dist(spec.tumor_count_range.first, spec.tumor_count_range.second);
  std::uniform_real_distribution<double> radius_dist(spec.tumor_radius_range.first, spec.tumor_radius_range.second);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  std::vector<Lesion> lesions;
  const int count = count_dist(rng);
  for (int k = 0; k < count; ++k) {
    const double r = radius_dist(rng);
    // A ball of radius r centred in the ellipsoid with axes (a - r) lies inside the head.
    const std::array<double, 3> inner{spec.head_axes[0] - r - 0.5, spec.head_axes[1] - r - 0.5,
                                      spec.head_axes[2] - r - 0.5};
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      std::array<double, 3> p{};
      for (int a = 0; a < 3; ++a) p[a] = center[a] + unit(rng) * inner[a];
      if (ellipsoid_radius(p, center, inner) > 1.0) continue;
      bool overlaps = false;
      for (const auto& other : lesions) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (p[a] - other.center[a]) * (p[a] - other.center[a]);
        if (std::sqrt(d2) < r + other.radius + 1.0) overlaps = true;
      }
      if (overlaps) continue;
      lesions.push_back({p, r});
      placed = true;
    }
    if (!placed) {
      throw Error(ErrorCode::PlacementFailure, "could not place lesion " + std::to_string(k + 1) + " for seed " +
                                                   std::to_string(seed) + " after " +
                                                   std::to_string(kPlacementRetries) + " attempts");
    }
  }

  const bool bright = spec.modality_tag != "t1-like";
  const double lesion_level = bright ? kFlairLesion : kT1Lesion;

  auto volume = torch::zeros({1, D, H, W}, torch::kFloat32);
  auto labels = torch::zeros({D, H, W}, torch::kUInt8);
  auto v = volume.accessor<float, 4>();
  auto l = labels.accessor<std::uint8_t, 3>();
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const std::array<double, 3> p{double(z), double(y), double(x)};
        const double r = ellipsoid_radius(p, center, spec.head_axes);
        if (r > 1.0) {
          v[0][z][y][x] = static_cast<float>(kBackground);
          continue;
        }
        double value = kTissue + spec.smooth_noise_scale * texture(z, y, x);
        value = kBackground + (value - kBackground) * smoothstep((1.0 - r) * min_axis / kHeadEdgeWidth);
        for (std::size_t k = 0; k < lesions.size(); ++k) {
          double d2 = 0.0;
          for (int a = 0; a < 3; ++a) d2 += (p[a] - lesions[k].center[a]) * (p[a] - lesions[k].center[a]);
          const double d = std::sqrt(d2);
          if (d <= lesions[k].radius) {
            l[z][y][x] = static_cast<std::uint8_t>(k + 1);
            const double w = smoothstep(lesions[k].radius - d + 0.5);
            value += (lesion_level - value) * w;
          }
        }
        v[0][z][y][x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }

  Volume3D vol{volume, {0.0, 1.0}, spec.modality_tag, {}};
  SegMask3D mask{labels, spec.num_classes()};
  return {vol, mask};
}

}  // namespace zeco
