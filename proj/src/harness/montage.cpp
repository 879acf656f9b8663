#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "zeco/error.hpp"
#include "zeco/harness.hpp"

namespace zeco::harness {

void write_montage(const Volume3D& v, const std::filesystem::path& png, int columns) {
  const auto x = v.data[0].to(torch::kFloat32).contiguous();
  const auto D = x.size(0), H = x.size(1), W = x.size(2);
  const auto cols = std::min<std::int64_t>(columns, D);
  const auto rows = (D + cols - 1) / cols;
  const auto width = cols * W, height = rows * H;
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width * height), 0);
  const float* p = x.data_ptr<float>();
  for (std::int64_t d = 0; d < D; ++d) {
    const auto oy = (d / cols) * H, ox = (d % cols) * W;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t xx = 0; xx < W; ++xx) {
        const double g = std::clamp((p[(d * H + y) * W + xx] + 1.0) / 2.0, 0.0, 1.0);
        pixels[static_cast<std::size_t>((oy + y) * width + ox + xx)] = static_cast<std::uint8_t>(std::lround(g * 255));
      }
    }
  }

  if (png.has_parent_path()) std::filesystem::create_directories(png.parent_path());
  const auto tmp = png.string() + ".tmp";
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(tmp.c_str(), "wb"), &std::fclose);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + png.string());
  png_structp ps = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = ps ? png_create_info_struct(ps) : nullptr;
  if (!ps || !info || setjmp(png_jmpbuf(ps))) {
    png_destroy_write_struct(&ps, &info);
    throw Error(ErrorCode::IoError, "PNG encoding failed for " + png.string());
  }
  png_init_io(ps, f.get());
  png_set_IHDR(ps, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ps, info);
  for (std::int64_t y = 0; y < height; ++y) png_write_row(ps, pixels.data() + y * width);
  png_write_end(ps, nullptr);
  png_destroy_write_struct(&ps, &info);
  f.reset();
  std::filesystem::rename(tmp, png);
}

}  // namespace zeco::harness
