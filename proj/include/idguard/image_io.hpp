#pragma once

// Lossless 8-bit RGB PNG files and contact sheets.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "idguard/tensor.hpp"

namespace idguard::image_io {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // HWC
};

void write_png(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_png(const std::filesystem::path& path);

/// Writes image i of an NCHW batch in [-1, 1].
void write_png(const std::filesystem::path& path, const Tensor<float>& batch, int i);
/// Reads a PNG into a [1, 3, H, W] tensor in [-1, 1].
Tensor<float> read_png_tensor(const std::filesystem::path& path);

/// Tiles up to cols*cols images of a batch into one grid with a 1-pixel gutter.
RgbImage contact_sheet(const Tensor<float>& batch, int cols = 8);

}  // namespace idguard::image_io
