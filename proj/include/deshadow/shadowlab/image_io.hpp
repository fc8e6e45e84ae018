#pragma once

#include <filesystem>

#include "deshadow/numerics/tensor.hpp"

namespace deshadow::shadowlab {

// 8-bit PNG as 3 x H x W on 0..1. Gray, palette and alpha inputs are converted to RGB.
Tensor read_png(const std::filesystem::path& path);
// Values are clamped to [0, 1] and rounded to 8 bits.
void write_png(const std::filesystem::path& path, const Tensor& image);

// Binary mask from a binary PGM (P5) or grayscale PNG; values >= 128 become 1.
Tensor read_mask(const std::filesystem::path& path);
// Writes a P5 PGM with 0 / 255.
void write_mask(const std::filesystem::path& path, const Tensor& mask);

// Single-channel H x W map on 0..255 written as an 8-bit grayscale PNG.
void write_gray_png(const std::filesystem::path& path, const Tensor& map);

}  // namespace deshadow::shadowlab
