#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "smokegen/image.hpp"
#include "smokegen/mask.hpp"
#include "smokegen/tensor.hpp"
#include "smokegen/util.hpp"

namespace testing {

/// Fresh directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("smokegen-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline smokegen::Tensor random_tensor(smokegen::Shape shape, smokegen::Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    smokegen::Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = n(rng);
    return t;
}

inline smokegen::BinaryMask random_mask(std::size_t w, std::size_t h, double p, smokegen::Rng& rng) {
    std::bernoulli_distribution b(p);
    smokegen::BinaryMask m(w, h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) m.set(y, x, b(rng));
    return m;
}

inline smokegen::RgbImage random_image(std::size_t w, std::size_t h, smokegen::Rng& rng) {
    std::uniform_int_distribution<int> u(0, 255);
    smokegen::RgbImage img(w, h);
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(u(rng));
    return img;
}

inline smokegen::BinaryMask rect_mask(std::size_t w, std::size_t h, std::size_t x0, std::size_t y0, std::size_t bw,
                                      std::size_t bh) {
    smokegen::BinaryMask m(w, h);
    for (std::size_t y = y0; y < y0 + bh; ++y)
        for (std::size_t x = x0; x < x0 + bw; ++x) m.set(y, x, true);
    return m;
}

}  // namespace testing
