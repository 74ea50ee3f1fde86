#pragma once

#include <filesystem>

#include "mvdiff/tensor.hpp"

namespace mvdiff::io {

// Images are [C, H, W] tensors with values in [0, 1]; C is 1 or 3.
// Values are clamped and rounded to 8 bits.
void write_png(const std::filesystem::path& path, const Tensor& image);
// 16-bit grayscale from an [H, W] tensor of raw integer levels (clamped to [0, 65535]).
void write_png16(const std::filesystem::path& path, const Tensor& levels);

// Returns [C, H, W] in [0, 1] (8-bit files) or raw levels (16-bit files).
// Palette and alpha are stripped; gray stays single-channel.
Tensor read_png(const std::filesystem::path& path);

}  // namespace mvdiff::io
