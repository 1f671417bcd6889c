#include "oscar/core/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>

#include "oscar/core/errors.hpp"
#include "oscar/core/io.hpp"

namespace oscar {

Image read_png(const std::string& path) {
    std::unique_ptr<std::FILE, decltype(&std::fclose)> fp(std::fopen(path.c_str(), "rb"),
                                                          std::fclose);
    if (!fp) throw ArtifactError("cannot open PNG: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                             nullptr);
    if (!png) throw ArtifactError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw ArtifactError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ArtifactError("PNG decode error: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (bit_depth == 16) png_set_swap(png);  // file is big-endian; we read little-endian
    png_read_update_info(png, info);

    bit_depth = png_get_bit_depth(png, info);
    std::size_t channels = png_get_channels(png, info);
    std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<unsigned char> raw(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(h, w, channels);
    std::size_t n = static_cast<std::size_t>(h) * w * channels;
    if (bit_depth == 16) {
        const auto* p = reinterpret_cast<const std::uint16_t*>(raw.data());
        for (std::size_t i = 0; i < n; ++i) img.data[i] = p[i] / 65535.0;
    } else {
        for (std::size_t i = 0; i < n; ++i) img.data[i] = raw[i] / 255.0;
    }
    return img;
}

void write_png(const std::string& path, const Image& img, int bit_depth) {
    if (bit_depth != 8 && bit_depth != 16)
        throw ConfigError("PNG bit depth must be 8 or 16");
    if (img.c != 1 && img.c != 3)
        throw ShapeError("PNG write supports 1 or 3 channels");

    std::vector<unsigned char> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                              nullptr);
    if (!png) throw ArtifactError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw ArtifactError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ArtifactError("PNG encode error: " + path);
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t len) {
            auto* buf = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(p));
            buf->insert(buf->end(), data, data + len);
        },
        [](png_structp) {});

    int color = img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w),
                 static_cast<png_uint_32>(img.h), bit_depth, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);

    std::size_t vals_per_row = img.w * img.c;
    if (bit_depth == 16) {
        std::vector<std::uint16_t> row(vals_per_row);
        for (std::size_t y = 0; y < img.h; ++y) {
            for (std::size_t i = 0; i < vals_per_row; ++i) {
                Real v = std::clamp(img.data[y * vals_per_row + i], 0.0, 1.0);
                row[i] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
            }
            png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
        }
    } else {
        std::vector<unsigned char> row(vals_per_row);
        for (std::size_t y = 0; y < img.h; ++y) {
            for (std::size_t i = 0; i < vals_per_row; ++i) {
                Real v = std::clamp(img.data[y * vals_per_row + i], 0.0, 1.0);
                row[i] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
            png_write_row(png, row.data());
        }
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    atomic_write_bytes(path, out);
}

Tensor image_to_chw(const Image& img) {
    Tensor t(Shape{img.c, img.h, img.w});
    Real* d = t.data();
    for (std::size_t ch = 0; ch < img.c; ++ch)
        for (std::size_t y = 0; y < img.h; ++y)
            for (std::size_t x = 0; x < img.w; ++x)
                d[(ch * img.h + y) * img.w + x] = img.at(y, x, ch);
    return t;
}

Image chw_to_image(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() != 3) throw ShapeError("chw_to_image: rank-3 required");
    Image img(s[1], s[2], s[0]);
    const Real* d = t.data();
    for (std::size_t ch = 0; ch < s[0]; ++ch)
        for (std::size_t y = 0; y < s[1]; ++y)
            for (std::size_t x = 0; x < s[2]; ++x)
                img.at(y, x, ch) = d[(ch * s[1] + y) * s[2] + x];
    return img;
}

}  // namespace oscar
