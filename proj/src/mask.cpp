#include "smokegen/mask.hpp"

#include <numeric>

#include "smokegen/error.hpp"

namespace smokegen {

BinaryMask::BinaryMask(std::size_t width, std::size_t height, std::uint8_t fill)
    : width_(width), height_(height), bits_(width * height, fill ? 1 : 0) {
    if (width == 0 || height == 0) throw InvalidInput("mask dimensions must be positive");
}

std::size_t BinaryMask::count() const {
    return std::accumulate(bits_.begin(), bits_.end(), std::size_t{0});
}

GrayImage BinaryMask::to_gray() const {
    GrayImage g(width_, height_);
    for (std::size_t i = 0; i < bits_.size(); ++i) g.pixels[i] = bits_[i] ? 255 : 0;
    return g;
}

BinaryMask BinaryMask::complement() const {
    BinaryMask out = *this;
    for (auto& b : out.bits_) b = b ? 0 : 1;
    return out;
}

BinaryMask BinaryMask::resized_nearest(std::size_t width, std::size_t height) const {
    if (width == width_ && height == height_) return *this;
    BinaryMask out(width, height);
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = std::min(height_ - 1, (y * height_) / height);
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sx = std::min(width_ - 1, (x * width_) / width);
            out.bits_[y * width + x] = bits_[sy * width_ + sx];
        }
    }
    return out;
}

}  // namespace smokegen
