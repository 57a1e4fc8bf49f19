#pragma once

#include <array>
#include <random>
#include <utility>

#include "tokencd/data_model.hpp"
#include "tokencd/nn.hpp"

namespace tokencd {

struct EncoderConfig {
    int in_channels = 3;
    std::array<int, 4> stage_widths{16, 32, 64, 64};  // last width is d_dec
    int d_dec() const { return stage_widths[3]; }
};

// Four pyramid levels at strides {32, 16, 8, 4}; index 0 is the coarsest.
struct FeaturePyramid {
    std::array<ag::Var, 4> levels;
    static constexpr std::array<int, 4> strides{32, 16, 8, 4};
};

// Siamese convolutional backbone (4 stride-2 stages, total stride 16) plus
// the pyramid neck: max-pooling downward, transposed convolutions upward.
class VisionEncoder {
public:
    VisionEncoder(EncoderConfig cfg, nn::ParamStore& store, std::mt19937_64& rng);

    const EncoderConfig& config() const { return cfg_; }

    // H/16 x W/16 x d_dec base features; H and W must divide by 32.
    ag::Var encode(const Image& image) const;
    ag::Var encode(const ag::Var& image_var) const;

    FeaturePyramid build_pyramid(const ag::Var& base) const;

    // Shared weights across both temporal images.
    std::pair<FeaturePyramid, FeaturePyramid> encode_pair(const ImagePair& pair) const;

private:
    EncoderConfig cfg_;
    std::array<nn::Conv2d, 4> stages_;
    nn::ConvTranspose2x2 up8_;        // stride 16 -> 8
    nn::ConvTranspose2x2 up4_a_, up4_b_;  // stride 16 -> 8 -> 4 path
};

ag::Var image_to_var(const Image& image);

}  // namespace tokencd
