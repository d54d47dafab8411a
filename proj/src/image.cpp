#include "smokegen/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "smokegen/error.hpp"

namespace smokegen {

namespace {

void ensure_parent(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

std::vector<int> encode_params(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg") return {cv::IMWRITE_JPEG_QUALITY, 95};
    if (ext == ".png") return {cv::IMWRITE_PNG_COMPRESSION, 6};
    throw InvalidInput("unsupported image extension: " + path.string());
}

}  // namespace

RgbImage load_rgb(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw InvalidInput("cannot read image: " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    RgbImage out(static_cast<std::size_t>(rgb.cols), static_cast<std::size_t>(rgb.rows));
    for (int y = 0; y < rgb.rows; ++y)
        std::copy_n(rgb.ptr<std::uint8_t>(y), rgb.cols * 3, out.pixels.data() + static_cast<std::size_t>(y) * out.width * 3);
    return out;
}

GrayImage load_gray(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw InvalidInput("cannot read image: " + path.string());
    GrayImage out(static_cast<std::size_t>(m.cols), static_cast<std::size_t>(m.rows));
    for (int y = 0; y < m.rows; ++y)
        std::copy_n(m.ptr<std::uint8_t>(y), m.cols, out.pixels.data() + static_cast<std::size_t>(y) * out.width);
    return out;
}

void save_rgb(const RgbImage& image, const std::filesystem::path& path) {
    if (image.empty()) throw InvalidInput("refusing to write an empty image: " + path.string());
    cv::Mat rgb(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3,
                const_cast<std::uint8_t*>(image.pixels.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    ensure_parent(path);
    if (!cv::imwrite(path.string(), bgr, encode_params(path))) throw InvalidInput("cannot write image: " + path.string());
}

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
    if (image.empty()) throw InvalidInput("cannot encode an empty image");
    cv::Mat rgb(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3,
                const_cast<std::uint8_t*>(image.pixels.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", bgr, out)) throw InvalidInput("png encoding failed");
    return out;
}

GrayImage decode_gray(const std::vector<std::uint8_t>& bytes) {
    cv::Mat m = cv::imdecode(bytes, cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw InvalidInput("cannot decode image bytes");
    GrayImage out(static_cast<std::size_t>(m.cols), static_cast<std::size_t>(m.rows));
    for (int y = 0; y < m.rows; ++y)
        std::copy_n(m.ptr<std::uint8_t>(y), m.cols, out.pixels.data() + static_cast<std::size_t>(y) * out.width);
    return out;
}

void save_gray(const GrayImage& image, const std::filesystem::path& path) {
    if (image.empty()) throw InvalidInput("refusing to write an empty image: " + path.string());
    cv::Mat m(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC1,
              const_cast<std::uint8_t*>(image.pixels.data()));
    ensure_parent(path);
    if (!cv::imwrite(path.string(), m, encode_params(path))) throw InvalidInput("cannot write image: " + path.string());
}

std::pair<std::size_t, std::size_t> image_dims(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw InvalidInput("cannot read image: " + path.string());
    return {static_cast<std::size_t>(m.cols), static_cast<std::size_t>(m.rows)};
}

RgbImage resize_area(const RgbImage& image, std::size_t width, std::size_t height) {
    if (image.width == width && image.height == height) return image;
    cv::Mat src(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3,
                const_cast<std::uint8_t*>(image.pixels.data()));
    cv::Mat dst;
    const bool shrinking = width < image.width && height < image.height;
    cv::resize(src, dst, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0,
               shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
    RgbImage out(width, height);
    for (int y = 0; y < dst.rows; ++y)
        std::copy_n(dst.ptr<std::uint8_t>(y), dst.cols * 3, out.pixels.data() + static_cast<std::size_t>(y) * width * 3);
    return out;
}

Tensor to_tensor(const RgbImage& image) {
    Tensor out({3, image.height, image.width});
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = image.at(y, x, c) / 127.5 - 1.0;
    return out;
}

RgbImage from_tensor(const Tensor& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3) throw InvalidInput("from_tensor expects (3,H,W), got " + shape_str(chw.shape()));
    RgbImage out(chw.dim(2), chw.dim(1));
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::round((chw.at(c, y, x) + 1.0) * 127.5);
                out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
    return out;
}

}  // namespace smokegen
