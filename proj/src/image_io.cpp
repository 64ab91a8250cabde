#include "minidub/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace minidub {

namespace {

uint8_t to_u8(double x) {
    double q = std::round(std::clamp(x, 0.0, 1.0) * 255.0);
    return (uint8_t)q;
}

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) fclose(f);
    }
};

void write_png(const std::string& path, int w, int h, int channels,
               const std::vector<uint8_t>& rows) {
    std::unique_ptr<FILE, FileCloser> fp(fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng write failure: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, (png_uint_32)w, (png_uint_32)h, 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> row_ptrs(h);
    for (int y = 0; y < h; ++y) row_ptrs[y] = (png_bytep)&rows[(size_t)y * w * channels];
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<uint8_t> read_png(const std::string& path, int want_channels, int& w, int& h) {
    std::unique_ptr<FILE, FileCloser> fp(fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open for read: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng read failure: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    w = (int)png_get_image_width(png, info);
    h = (int)png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (want_channels == 3 && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA))
        png_set_gray_to_rgb(png);
    if (want_channels == 1 && (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
                               color == PNG_COLOR_TYPE_PALETTE))
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    std::vector<uint8_t> rows((size_t)w * h * want_channels);
    std::vector<png_bytep> row_ptrs(h);
    for (int y = 0; y < h; ++y) row_ptrs[y] = &rows[(size_t)y * w * want_channels];
    png_read_image(png, row_ptrs.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return rows;
}

}  // namespace

void write_png_rgb(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("write_png_rgb expects (3,H,W), got " + shape_str(image.shape));
    int h = image.dim(1), w = image.dim(2);
    std::vector<uint8_t> rows((size_t)w * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                rows[((size_t)y * w + x) * 3 + c] = to_u8(image.at3(c, y, x));
    write_png(path, w, h, 3, rows);
}

Tensor read_png_rgb(const std::string& path) {
    int w = 0, h = 0;
    auto rows = read_png(path, 3, w, h);
    Tensor t({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                t.at3(c, y, x) = rows[((size_t)y * w + x) * 3 + c] / 255.0;
    return t;
}

void write_png_gray(const std::string& path, const Tensor& mask) {
    if (mask.rank() != 2)
        throw std::invalid_argument("write_png_gray expects (H,W), got " + shape_str(mask.shape));
    int h = mask.dim(0), w = mask.dim(1);
    std::vector<uint8_t> rows((size_t)w * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) rows[(size_t)y * w + x] = to_u8(mask.at2(y, x));
    write_png(path, w, h, 1, rows);
}

Tensor read_png_gray(const std::string& path) {
    int w = 0, h = 0;
    auto rows = read_png(path, 1, w, h);
    Tensor t({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.at2(y, x) = rows[(size_t)y * w + x] / 255.0;
    return t;
}

}  // namespace minidub
