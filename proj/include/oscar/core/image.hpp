#pragma once

#include <string>
#include <vector>

#include "oscar/core/tensor.hpp"

namespace oscar {

// Planar-last image: row-major (h, w, c) with values in [0,1].
struct Image {
    std::size_t h = 0, w = 0, c = 0;
    std::vector<Real> data;

    Image() = default;
    Image(std::size_t h_, std::size_t w_, std::size_t c_)
        : h(h_), w(w_), c(c_), data(h_ * w_ * c_, 0.0) {}

    Real& at(std::size_t y, std::size_t x, std::size_t ch) {
        return data[(y * w + x) * c + ch];
    }
    Real at(std::size_t y, std::size_t x, std::size_t ch) const {
        return data[(y * w + x) * c + ch];
    }
    std::size_t numel() const { return data.size(); }
};

Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img, int bit_depth);  // 8 or 16

// (B=1,C,H,W) tensor <-> image conversion; tensor values taken as-is.
Tensor image_to_chw(const Image& img);
Image chw_to_image(const Tensor& t);  // expects (C,H,W)

}  // namespace oscar
