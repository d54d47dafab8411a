#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smokegen/corpus.hpp"

namespace smokegen::eval {

/// Mean squared difference over all pixels and channels (8-bit scale).
double mse_img(const RgbImage& a, const RgbImage& b);
/// 10 log10(255^2 / mse); +infinity when the images are identical.
double psnr(const RgbImage& a, const RgbImage& b);

struct SsimOptions {
    std::size_t window = 8;
    double k1 = 0.01;
    double k2 = 0.03;
    bool gaussian = false;  // Gaussian-weighted window instead of uniform
    double sigma = 1.5;
};

/// Mean SSIM over every window position, on luma Y = 0.299 R + 0.587 G + 0.114 B.
/// Uniform windows use population statistics.
double ssim(const RgbImage& a, const RgbImage& b, const SsimOptions& opts = {});

/// Same metrics restricted to the mask: pixels inside it for MSE/PSNR,
/// windows centred inside it for SSIM.
double mse_img(const RgbImage& a, const RgbImage& b, const BinaryMask& region);
double psnr(const RgbImage& a, const RgbImage& b, const BinaryMask& region);
double ssim(const RgbImage& a, const RgbImage& b, const BinaryMask& region, const SsimOptions& opts = {});

class LpipsClient {
public:
    virtual ~LpipsClient() = default;
    virtual double distance(const RgbImage& a, const RgbImage& b) = 0;
};

class ClipClient {
public:
    virtual ~ClipClient() = default;
    virtual double similarity(const RgbImage& image, const std::string& text) = 0;
};

/// Returns the same value for every pair.
class FixedLpipsClient final : public LpipsClient {
public:
    explicit FixedLpipsClient(double value) : value_(value) {}
    double distance(const RgbImage&, const RgbImage&) override { return value_; }

private:
    double value_;
};

class FixedClipClient final : public ClipClient {
public:
    explicit FixedClipClient(double value) : value_(value) {}
    double similarity(const RgbImage&, const std::string&) override { return value_; }

private:
    double value_;
};

/// Client metric through a range check; nullopt when the client is absent,
/// fails, or answers out of range.
std::optional<double> lpips(const RgbImage& a, const RgbImage& b, LpipsClient* client);
std::optional<double> clip_sim(const RgbImage& image, const std::string& text, ClipClient* client);

struct EvalRow {
    std::string id;
    double psnr = 0, ssim = 0, mse = 0;
    std::optional<double> lpips, clipsim;
};

struct EvalAggregate {
    std::optional<double> psnr, ssim, mse, lpips, clipsim;
    std::size_t psnr_rows = 0, lpips_rows = 0, clipsim_rows = 0;
};

struct EvalOptions {
    SsimOptions ssim;
    bool masked_region = false;
    LpipsClient* lpips = nullptr;
    ClipClient* clip = nullptr;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    EvalAggregate aggregate;
    std::vector<std::string> excluded;  // one note per unmatched or unusable id
    std::vector<std::string> notes;
    nlohmann::ordered_json config;

    nlohmann::ordered_json to_json() const;
    std::string to_csv() const;
};

/// Rows follow the generated manifest's order; ids are matched exactly.
EvalReport evaluate_pairs(const corpus::Manifest& generated, const corpus::Manifest& reference,
                          const EvalOptions& opts = {});

}  // namespace smokegen::eval
