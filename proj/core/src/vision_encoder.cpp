#include "tokencd/vision_encoder.hpp"

#include <stdexcept>

namespace tokencd {

ag::Var image_to_var(const Image& image) {
    Tensor t({image.h, image.w, image.c}, image.data);
    return ag::constant(std::move(t));
}

VisionEncoder::VisionEncoder(EncoderConfig cfg, nn::ParamStore& store, std::mt19937_64& rng) : cfg_(cfg) {
    int cin = cfg_.in_channels;
    for (int s = 0; s < 4; ++s) {
        stages_[static_cast<std::size_t>(s)] =
            nn::Conv2d::create(store, "backbone.stage" + std::to_string(s), cin, cfg_.stage_widths[static_cast<std::size_t>(s)], 3, 2, 1, rng);
        cin = cfg_.stage_widths[static_cast<std::size_t>(s)];
    }
    const int d = cfg_.d_dec();
    up8_ = nn::ConvTranspose2x2::create(store, "pyramid.up8", d, d, rng);
    up4_a_ = nn::ConvTranspose2x2::create(store, "pyramid.up4_a", d, d, rng);
    up4_b_ = nn::ConvTranspose2x2::create(store, "pyramid.up4_b", d, d, rng);
}

ag::Var VisionEncoder::encode(const Image& image) const {
    if (image.h % 32 != 0 || image.w % 32 != 0)
        throw std::invalid_argument("encode: image dims must be divisible by 32");
    if (image.c != cfg_.in_channels) throw std::invalid_argument("encode: channel count mismatch");
    return encode(image_to_var(image));
}

ag::Var VisionEncoder::encode(const ag::Var& image_var) const {
    if (image_var->value.dim(0) % 32 != 0 || image_var->value.dim(1) % 32 != 0)
        throw std::invalid_argument("encode: image dims must be divisible by 32");
    ag::Var x = image_var;
    for (const auto& stage : stages_) x = ag::gelu(stage(x));
    return x;
}

FeaturePyramid VisionEncoder::build_pyramid(const ag::Var& base) const {
    FeaturePyramid p;
    p.levels[0] = ag::maxpool2x2(base);                        // stride 32
    p.levels[1] = base;                                        // stride 16
    p.levels[2] = up8_(base);                                  // stride 8
    p.levels[3] = up4_b_(ag::gelu(up4_a_(base)));              // stride 4
    return p;
}

std::pair<FeaturePyramid, FeaturePyramid> VisionEncoder::encode_pair(const ImagePair& pair) const {
    if (pair.img1.h != pair.img2.h || pair.img1.w != pair.img2.w || pair.img1.c != pair.img2.c)
        throw std::invalid_argument("encode_pair: temporal images must share shape");
    return {build_pyramid(encode(pair.img1)), build_pyramid(encode(pair.img2))};
}

}  // namespace tokencd
