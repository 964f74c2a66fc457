#include "idguard/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstring>

#include "idguard/errors.hpp"
#include "idguard/synthdata.hpp"

namespace idguard::image_io {

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write " + path.string() + ": " + pi.message);
  }
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) {
    throw FormatError("cannot read " + path.string() + ": " + pi.message);
  }
  pi.format = PNG_FORMAT_RGB;
  RgbImage img;
  img.width = static_cast<int>(pi.width);
  img.height = static_cast<int>(pi.height);
  img.pixels.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw FormatError("cannot decode " + path.string() + ": " + pi.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Tensor<float>& batch, int i) {
  write_png(path, RgbImage{batch.dim(3), batch.dim(2), synthdata::to_rgb(batch, i)});
}

Tensor<float> read_png_tensor(const std::filesystem::path& path) {
  const auto img = read_png(path);
  Tensor<float> out({1, 3, img.height, img.width});
  synthdata::from_rgb(img.pixels, out, 0);
  return out;
}

RgbImage contact_sheet(const Tensor<float>& batch, int cols) {
  const int n = std::min(batch.dim(0), cols * cols);
  const int h = batch.dim(2), w = batch.dim(3);
  const int rows = (n + cols - 1) / cols;
  RgbImage sheet;
  sheet.width = cols * (w + 1) + 1;
  sheet.height = rows * (h + 1) + 1;
  sheet.pixels.assign(static_cast<std::size_t>(sheet.width) * sheet.height * 3, 255);
  for (int i = 0; i < n; ++i) {
    const auto rgb = synthdata::to_rgb(batch, i);
    const int ox = 1 + (i % cols) * (w + 1), oy = 1 + (i / cols) * (h + 1);
    for (int y = 0; y < h; ++y) {
      std::copy_n(rgb.begin() + y * w * 3, w * 3, sheet.pixels.begin() + ((oy + y) * sheet.width + ox) * 3);
    }
  }
  return sheet;
}

}  // namespace idguard::image_io
