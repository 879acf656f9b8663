#include <zlib.h>

#include <cstring>
#include <memory>

#include "zeco/error.hpp"
#include "zeco/volume.hpp"

namespace zeco {

namespace {

constexpr int kHeaderSize = 348;

struct GzCloser {
  void operator()(gzFile_s* f) const { gzclose(f); }
};

template <typename T>
T read_field(const std::uint8_t* hdr, std::size_t offset, bool swap) {
  T v;
  std::memcpy(&v, hdr + offset, sizeof v);
  if (swap) {
    auto* b = reinterpret_cast<std::uint8_t*>(&v);
    for (std::size_t i = 0; i < sizeof v / 2; ++i) std::swap(b[i], b[sizeof v - 1 - i]);
  }
  return v;
}

template <typename T>
double element(const std::uint8_t* p, bool swap) {
  return static_cast<double>(read_field<T>(p, 0, swap));
}

}  // namespace

Volume3D import_nifti(const std::filesystem::path& path) {
  std::unique_ptr<gzFile_s, GzCloser> f(gzopen(path.string().c_str(), "rb"));
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path.string());

  std::uint8_t hdr[kHeaderSize];
  if (gzread(f.get(), hdr, kHeaderSize) != kHeaderSize) {
    throw Error(ErrorCode::TruncatedPayload, path.string() + ": NIfTI header truncated");
  }
  bool swap = false;
  if (read_field<std::int32_t>(hdr, 0, false) != kHeaderSize) {
    swap = true;
    if (read_field<std::int32_t>(hdr, 0, true) != kHeaderSize) {
      throw Error(ErrorCode::HeaderError, path.string() + ": not a NIfTI-1 file");
    }
  }
  if (std::memcmp(hdr + 344, "n+1", 4) != 0 && std::memcmp(hdr + 344, "ni1", 4) != 0) {
    throw Error(ErrorCode::HeaderError, path.string() + ": bad NIfTI magic");
  }

  const auto ndim = read_field<std::int16_t>(hdr, 40, swap);
  if (ndim < 3 || ndim > 7) throw Error(ErrorCode::HeaderError, path.string() + ": unsupported rank");
  std::int64_t nx = read_field<std::int16_t>(hdr, 42, swap);
  std::int64_t ny = read_field<std::int16_t>(hdr, 44, swap);
  std::int64_t nz = read_field<std::int16_t>(hdr, 46, swap);
  for (int d = 4; d <= ndim; ++d) {
    if (read_field<std::int16_t>(hdr, 40 + 2 * d, swap) > 1) {
      throw Error(ErrorCode::ShapeMismatch, path.string() + ": only single 3-d volumes are supported");
    }
  }
  const auto datatype = read_field<std::int16_t>(hdr, 70, swap);
  const auto bitpix = read_field<std::int16_t>(hdr, 72, swap);
  const auto vox_offset = static_cast<long>(read_field<float>(hdr, 108, swap));
  float slope = read_field<float>(hdr, 112, swap);
  const float inter = read_field<float>(hdr, 116, swap);
  if (slope == 0.0f) slope = 1.0f;

  const std::size_t elem = static_cast<std::size_t>(bitpix / 8);
  const std::size_t count = static_cast<std::size_t>(nx * ny * nz);
  std::vector<std::uint8_t> raw(count * elem);
  if (gzseek(f.get(), vox_offset, SEEK_SET) != vox_offset ||
      gzread(f.get(), raw.data(), static_cast<unsigned>(raw.size())) != static_cast<int>(raw.size())) {
    throw Error(ErrorCode::TruncatedPayload, path.string() + ": voxel data truncated");
  }

  double (*convert)(const std::uint8_t*, bool) = nullptr;
  switch (datatype) {
    case 2: convert = element<std::uint8_t>; break;
    case 4: convert = element<std::int16_t>; break;
    case 8: convert = element<std::int32_t>; break;
    case 16: convert = element<float>; break;
    case 64: convert = element<double>; break;
    case 256: convert = element<std::int8_t>; break;
    case 512: convert = element<std::uint16_t>; break;
    default: throw Error(ErrorCode::HeaderError, path.string() + ": unsupported datatype " + std::to_string(datatype));
  }

  Volume3D v;
  v.data = torch::empty({1, nz, ny, nx}, torch::kFloat32);
  float* out = v.data.data_ptr<float>();
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = static_cast<float>(convert(raw.data() + i * elem, swap) * slope + inter);
  }
  v.intensity_range = {v.data.min().item<double>(), v.data.max().item<double>()};
  v.modality_tag = "nifti";
  return v;
}

}  // namespace zeco
