#include "tokencd/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

namespace tokencd {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& what, const std::string& path) {
    throw std::runtime_error(what + ": " + path);
}

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FilePtr file;

    explicit PngReader(const std::string& path) {
        file.reset(std::fopen(path.c_str(), "rb"));
        if (!file) fail("cannot open png", path);
        png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        info = png_create_info_struct(png);
        if (!png || !info) fail("png reader init failed", path);
        if (setjmp(png_jmpbuf(png))) fail("malformed png", path);
        png_init_io(png, file.get());
        png_read_info(png, info);
    }
    ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FilePtr file;

    explicit PngWriter(const std::string& path) {
        file.reset(std::fopen(path.c_str(), "wb"));
        if (!file) fail("cannot write png", path);
        png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        info = png_create_info_struct(png);
        if (!png || !info) fail("png writer init failed", path);
        if (setjmp(png_jmpbuf(png))) fail("png write failed", path);
        png_init_io(png, file.get());
    }
    ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

// Fixed palette: 0 black, 1 white, then well-separated hues for classes.
void fill_palette(png_color* palette, int n) {
    for (int i = 0; i < n; ++i) {
        if (i == 0) {
            palette[i] = {0, 0, 0};
        } else if (i == 1) {
            palette[i] = {255, 255, 255};
        } else {
            const double hue = (i * 47) % 360 / 60.0;
            const int sector = static_cast<int>(hue);
            const double frac = hue - sector;
            const auto comp = [](double v) { return static_cast<png_byte>(55 + 200 * v); };
            double r = 0, g = 0, b = 0;
            switch (sector % 6) {
                case 0: r = 1, g = frac; break;
                case 1: r = 1 - frac, g = 1; break;
                case 2: g = 1, b = frac; break;
                case 3: g = 1 - frac, b = 1; break;
                case 4: r = frac, b = 1; break;
                default: r = 1, b = 1 - frac; break;
            }
            palette[i] = {comp(r), comp(g), comp(b)};
        }
    }
}

}  // namespace

Image read_rgb_png(const std::string& path) {
    PngReader r(path);
    if (setjmp(png_jmpbuf(r.png))) fail("malformed png", path);
    png_set_expand(r.png);
    png_set_strip_16(r.png);
    png_set_strip_alpha(r.png);
    png_set_gray_to_rgb(r.png);
    png_read_update_info(r.png, r.info);
    const int h = static_cast<int>(png_get_image_height(r.png, r.info));
    const int w = static_cast<int>(png_get_image_width(r.png, r.info));
    if (png_get_channels(r.png, r.info) != 3) fail("expected 3-channel png after expansion", path);
    std::vector<png_byte> rowbuf(static_cast<std::size_t>(w) * 3);
    Image img(h, w, 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(r.png, rowbuf.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rowbuf[static_cast<std::size_t>(x) * 3 + c] / 255.0;
    }
    return img;
}

void write_rgb_png(const Image& image, const std::string& path) {
    if (image.c != 3) throw std::invalid_argument("write_rgb_png: expected 3 channels");
    PngWriter w(path);
    if (setjmp(png_jmpbuf(w.png))) fail("png write failed", path);
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(image.w), static_cast<png_uint_32>(image.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    std::vector<png_byte> rowbuf(static_cast<std::size_t>(image.w) * 3);
    for (int y = 0; y < image.h; ++y) {
        for (int x = 0; x < image.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = image.at(y, x, c);
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                rowbuf[static_cast<std::size_t>(x) * 3 + c] = static_cast<png_byte>(v * 255.0 + 0.5);
            }
        png_write_row(w.png, rowbuf.data());
    }
    png_write_end(w.png, nullptr);
}

LabelMap read_label_png(const std::string& path) {
    PngReader r(path);
    if (setjmp(png_jmpbuf(r.png))) fail("malformed png", path);
    const png_byte color_type = png_get_color_type(r.png, r.info);
    if (color_type != PNG_COLOR_TYPE_PALETTE && color_type != PNG_COLOR_TYPE_GRAY)
        fail("label png must be paletted or gray", path);
    png_set_packing(r.png);  // <8-bit depths unpack to one byte per pixel
    png_read_update_info(r.png, r.info);
    const int h = static_cast<int>(png_get_image_height(r.png, r.info));
    const int w = static_cast<int>(png_get_image_width(r.png, r.info));
    std::vector<png_byte> rowbuf(static_cast<std::size_t>(w));
    LabelMap out(h, w);
    for (int y = 0; y < h; ++y) {
        png_read_row(r.png, rowbuf.data(), nullptr);
        for (int x = 0; x < w; ++x) out.at(y, x) = rowbuf[static_cast<std::size_t>(x)];
    }
    return out;
}

void write_label_png(const LabelMap& labels, const std::string& path) {
    int max_label = 0;
    for (int v : labels.data) {
        if (v < 0 || v > 255) throw std::invalid_argument("write_label_png: label outside palette range");
        max_label = std::max(max_label, v);
    }
    PngWriter w(path);
    if (setjmp(png_jmpbuf(w.png))) fail("png write failed", path);
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(labels.w), static_cast<png_uint_32>(labels.h), 8,
                 PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_color palette[256];
    fill_palette(palette, 256);
    png_set_PLTE(w.png, w.info, palette, std::max(max_label + 1, 2));
    png_write_info(w.png, w.info);
    std::vector<png_byte> rowbuf(static_cast<std::size_t>(labels.w));
    for (int y = 0; y < labels.h; ++y) {
        for (int x = 0; x < labels.w; ++x) rowbuf[static_cast<std::size_t>(x)] = static_cast<png_byte>(labels.at(y, x));
        png_write_row(w.png, rowbuf.data());
    }
    png_write_end(w.png, nullptr);
}

BinaryMask read_mask_png(const std::string& path) {
    const LabelMap labels = read_label_png(path);
    BinaryMask m(labels.h, labels.w);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        const int v = labels.data[i];
        // Accept 0/1 palettes as well as 0/255 grayscale masks.
        m.data[i] = v == 0 ? 0 : 1;
    }
    return m;
}

void write_mask_png(const BinaryMask& mask, const std::string& path) {
    LabelMap labels(mask.h, mask.w);
    for (std::size_t i = 0; i < labels.data.size(); ++i) labels.data[i] = mask.data[i] ? 1 : 0;
    write_label_png(labels, path);
}

}  // namespace tokencd
