#pragma once

// 8-bit PNG I/O. Images are [C x H x W] tensors with values in [0, 1].

#include "core/tensor.hpp"

#include <string>

namespace spheregen {

// Loads as RGB [3 x H x W]; grayscale and alpha inputs are converted.
Tensor load_png_rgb(const std::string& path);
// Loads as a single channel [H x W].
Tensor load_png_gray(const std::string& path);

// Accepts [3 x H x W], [1 x H x W] or [H x W]; values are clamped to [0, 1].
void save_png(const std::string& path, const Tensor& image);

} // namespace spheregen
