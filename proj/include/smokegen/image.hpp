#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "smokegen/tensor.hpp"

namespace smokegen {

/// 8-bit interleaved RGB raster.
struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // height * width * 3, RGB order

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

    bool empty() const noexcept { return pixels.empty(); }
    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
    bool operator==(const RgbImage&) const = default;
};

/// 8-bit single-channel raster (soft masks, grayscale).
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}

    bool empty() const noexcept { return pixels.empty(); }
    std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    bool operator==(const GrayImage&) const = default;
};

RgbImage load_rgb(const std::filesystem::path& path);
GrayImage load_gray(const std::filesystem::path& path);
/// Format follows the extension (.png lossless, .jpg quality 95).
void save_rgb(const RgbImage& image, const std::filesystem::path& path);
void save_gray(const GrayImage& image, const std::filesystem::path& path);
/// Reads only what is needed to learn the pixel dimensions.
std::pair<std::size_t, std::size_t> image_dims(const std::filesystem::path& path);

/// In-memory PNG encoding, for shipping images to model services.
std::vector<std::uint8_t> encode_png(const RgbImage& image);
GrayImage decode_gray(const std::vector<std::uint8_t>& bytes);

RgbImage resize_area(const RgbImage& image, std::size_t width, std::size_t height);

/// RGB bytes -> (3, H, W) tensor scaled to [-1, 1].
Tensor to_tensor(const RgbImage& image);
/// (3, H, W) tensor in [-1, 1] -> RGB bytes, clamped and rounded.
RgbImage from_tensor(const Tensor& chw);

}  // namespace smokegen
