#include "zeco/volume.hpp"

#include "zeco/error.hpp"

namespace zeco {

void Volume3D::validate() const {
  if (!data.defined() || data.dim() != 4) {
    throw Error(ErrorCode::ShapeMismatch, "volume must be a 4-d (C, D, H, W) grid");
  }
  if (data.scalar_type() != torch::kFloat32) {
    throw Error(ErrorCode::InvalidArgument, "volume data must be float32");
  }
  if (channels() < 1) throw Error(ErrorCode::ShapeMismatch, "volume needs at least one channel");
  static constexpr const char* kAxis[] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (data.size(a + 1) < 8) {
      throw Error(ErrorCode::ShapeMismatch, std::string(kAxis[a]) + " extent " +
                                                std::to_string(data.size(a + 1)) + " is below 8");
    }
  }
  if (!torch::isfinite(data).all().item<bool>()) {
    throw Error(ErrorCode::NonFinite, "volume contains NaN or infinite values");
  }
}

void SegMask3D::validate() const {
  if (!labels.defined() || labels.dim() != 3 || labels.scalar_type() != torch::kUInt8) {
    throw Error(ErrorCode::ShapeMismatch, "mask must be a 3-d uint8 label grid");
  }
  if (num_classes < 1 || num_classes > 256) {
    throw Error(ErrorCode::InvalidArgument, "num_classes out of range: " + std::to_string(num_classes));
  }
  if (labels.numel() > 0 && labels.max().item<int>() >= num_classes) {
    throw Error(ErrorCode::InvalidArgument, "label " + std::to_string(labels.max().item<int>()) +
                                                " exceeds num_classes " + std::to_string(num_classes));
  }
}

Volume3D normalize(const Volume3D& v, NormalizationMethod method) {
  (void)method;  // minmax_sym is the only method
  if (!torch::isfinite(v.data).all().item<bool>()) {
    throw Error(ErrorCode::NonFinite, "cannot normalize a volume containing NaN or infinite values");
  }
  auto src = v.data.to(torch::kFloat64);
  const double lo = src.min().item<double>();
  const double hi = src.max().item<double>();

  Volume3D out = v;
  out.normalization = {"minmax_sym", lo, hi};
  out.intensity_range = {-1.0, 1.0};
  if (hi > lo) {
    out.data = (2.0 * (src - lo) / (hi - lo) - 1.0).to(torch::kFloat32).contiguous();
  } else {
    out.data = torch::zeros_like(v.data);
  }
  return out;
}

Volume3D denormalize(const Volume3D& v) {
  if (v.normalization.method != "minmax_sym") {
    throw Error(ErrorCode::InvalidArgument, "volume carries no invertible normalization");
  }
  const double lo = v.normalization.lo;
  const double hi = v.normalization.hi;
  Volume3D out = v;
  out.data = ((v.data.to(torch::kFloat64) + 1.0) * 0.5 * (hi - lo) + lo).to(torch::kFloat32).contiguous();
  out.normalization = {};
  out.intensity_range = {lo, hi};
  return out;
}

}  // namespace zeco
