#pragma once

#include <cstdint>
#include <vector>

#include "smokegen/image.hpp"

namespace smokegen {

/// H x W grid over {0, 1}.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(std::size_t width, std::size_t height, std::uint8_t fill = 0);

    std::size_t width() const noexcept { return width_; }
    std::size_t height() const noexcept { return height_; }
    bool empty() const noexcept { return bits_.empty(); }

    std::uint8_t at(std::size_t y, std::size_t x) const { return bits_[y * width_ + x]; }
    void set(std::size_t y, std::size_t x, bool on) { bits_[y * width_ + x] = on ? 1 : 0; }
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    std::size_t count() const;
    bool any() const { return count() > 0; }
    bool operator==(const BinaryMask&) const = default;

    /// 255 for foreground, 0 for background.
    GrayImage to_gray() const;
    BinaryMask complement() const;
    /// Nearest-neighbour resampling; stays binary.
    BinaryMask resized_nearest(std::size_t width, std::size_t height) const;

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<std::uint8_t> bits_;
};

}  // namespace smokegen
