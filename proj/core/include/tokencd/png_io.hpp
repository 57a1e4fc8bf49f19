#pragma once

#include <string>

#include "tokencd/data_model.hpp"

namespace tokencd {

// 8-bit RGB in, values normalized to [0,1]. Grayscale and paletted files are
// expanded; 16-bit depth is stripped.
Image read_rgb_png(const std::string& path);
void write_rgb_png(const Image& image, const std::string& path);

// Paletted label maps; pixel value is the palette index (class id).
LabelMap read_label_png(const std::string& path);
void write_label_png(const LabelMap& labels, const std::string& path);

BinaryMask read_mask_png(const std::string& path);
void write_mask_png(const BinaryMask& mask, const std::string& path);

}  // namespace tokencd
