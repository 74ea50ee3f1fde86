#include "mvdiff/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "mvdiff/errors.hpp"

namespace mvdiff::io {

namespace {

struct File {
  std::FILE* f;
  ~File() {
    if (f) std::fclose(f);
  }
};

void write_rows(const std::filesystem::path& path, int width, int height, int channels, int depth,
                const std::vector<unsigned char>& bytes) {
  File file{std::fopen(path.c_str(), "wb")};
  MVD_REQUIRE(file.f != nullptr, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InvalidInput("libpng failed writing " + path.string());
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, width, height, depth, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(width) * channels * (depth / 8);
  for (int y = 0; y < height; ++y) png_write_row(png, const_cast<unsigned char*>(bytes.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
  MVD_REQUIRE(image.ndim() == 3 && (image.dim(0) == 1 || image.dim(0) == 3), "write_png expects [1|3, H, W]");
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  std::vector<unsigned char> bytes(static_cast<size_t>(c) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) {
        const double v = std::clamp(image[(static_cast<int64_t>(k) * h + y) * w + x], 0.0, 1.0);
        bytes[(static_cast<size_t>(y) * w + x) * c + k] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  write_rows(path, w, h, c, 8, bytes);
}

void write_png16(const std::filesystem::path& path, const Tensor& levels) {
  MVD_REQUIRE(levels.ndim() == 2, "write_png16 expects [H, W]");
  const int h = static_cast<int>(levels.dim(0)), w = static_cast<int>(levels.dim(1));
  std::vector<unsigned char> bytes(static_cast<size_t>(h) * w * 2);
  for (int64_t i = 0; i < levels.numel(); ++i) {
    const auto v = static_cast<uint16_t>(std::clamp(std::lround(levels[i]), 0L, 65535L));
    bytes[2 * i] = static_cast<unsigned char>(v >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
  }
  write_rows(path, w, h, 1, 16, bytes);
}

Tensor read_png(const std::filesystem::path& path) {
  File file{std::fopen(path.c_str(), "rb")};
  MVD_REQUIRE(file.f != nullptr, "cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InvalidInput("libpng failed reading " + path.string());
  }
  png_init_io(png, file.f);
  png_read_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  const int bytes_per = png_get_bit_depth(png, info) / 8;
  const size_t stride = png_get_rowbytes(png, info);
  std::vector<unsigned char> bytes(stride * h);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = bytes.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) {
        const size_t at = y * stride + (static_cast<size_t>(x) * c + k) * bytes_per;
        const double v = bytes_per == 2 ? static_cast<double>((bytes[at] << 8) | bytes[at + 1]) : bytes[at] / 255.0;
        out[(static_cast<int64_t>(k) * h + y) * w + x] = v;
      }
  return out;
}

}  // namespace mvdiff::io
