#pragma once

#include <string>

#include "minidub/tensor.hpp"

namespace minidub {

// RGB images are (3,H,W) tensors with values in [0,1]; masks are (H,W).
// PNG export quantizes to 8 bits, import maps back to [0,1].
void write_png_rgb(const std::string& path, const Tensor& image);
Tensor read_png_rgb(const std::string& path);
void write_png_gray(const std::string& path, const Tensor& mask);
Tensor read_png_gray(const std::string& path);

}  // namespace minidub
