#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rcc {

// 8-bit RGB bitmap, rows top to bottom, samples interleaved.
struct ImageU8 {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> rgb;  // height * width * 3
};

// Reads any libpng-supported file as 8-bit RGB: palettes are expanded,
// 16-bit channels narrowed, alpha dropped, grayscale replicated.
ImageU8 read_png(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);

}  // namespace rcc
