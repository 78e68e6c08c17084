#include "rcc/png_io.hpp"

#include <png.h>

#include <cstdio>

#include "rcc/tensor.hpp"

namespace rcc {

namespace {

// Closes the stream even when libpng bails out through setjmp.
struct FileHandle {
  FILE* f = nullptr;
  ~FileHandle() {
    if (f) std::fclose(f);
  }
};

// libpng's default handlers print to stderr before jumping; these keep the
// jump and drop the noise (the thrown message carries the path instead).
extern "C" void quiet_png_error(png_structp png, png_const_charp) {
  png_longjmp(png, 1);
}
extern "C" void quiet_png_warning(png_structp, png_const_charp) {}

}  // namespace

ImageU8 read_png(const std::string& path) {
  FileHandle fh;
  fh.f = std::fopen(path.c_str(), "rb");
  check(fh.f != nullptr, "png: cannot open '" + path + "' for reading");

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, quiet_png_error, quiet_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    check(false, "png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    check(false, "png: failed to decode '" + path + "'");
  }

  png_init_io(png, fh.f);
  png_read_info(png, info);

  // Normalize every color layout libpng understands down to RGB8.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  if (png_get_channels(png, info) != 3 || w == 0 || h == 0) {
    png_destroy_read_struct(&png, &info, nullptr);
    check(false, "png: '" + path + "' did not reduce to 8-bit RGB");
  }

  ImageU8 img;
  img.height = static_cast<int64_t>(h);
  img.width = static_cast<int64_t>(w);
  img.rgb.resize(static_cast<size_t>(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) {
    rows[y] = img.rgb.data() + static_cast<size_t>(y) * w * 3;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::string& path, const ImageU8& img) {
  check(img.height > 0 && img.width > 0,
        "png: bitmap to write must have positive size");
  const size_t want = static_cast<size_t>(img.height) * img.width * 3;
  check(img.rgb.size() == want,
        "png: bitmap buffer holds " + std::to_string(img.rgb.size()) +
            " bytes, dims need " + std::to_string(want));

  FileHandle fh;
  fh.f = std::fopen(path.c_str(), "wb");
  check(fh.f != nullptr, "png: cannot open '" + path + "' for writing");

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, quiet_png_error, quiet_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    check(false, "png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    check(false, "png: failed to encode '" + path + "'");
  }

  png_init_io(png, fh.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_bytep> rows(img.height);
  for (int64_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.rgb.data()) +
              static_cast<size_t>(y) * img.width * 3;
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace rcc
