#pragma once

// Desk-scale harness: a toy backbone stack, a generic inpainting pretraining
// loop for it, and the synthetic blob dataset used to train adapters.

#include <filesystem>
#include <string>
#include <vector>

#include "smokegen/diffusion.hpp"
#include "smokegen/injection.hpp"
#include "smokegen/toy_models.hpp"
#include "smokegen/trainer.hpp"

namespace smokegen::toy {

inline constexpr std::size_t kImageSize = 64;
inline constexpr int kLatentFactor = 8;

struct ToyStack {
    diffusion::ToyUNet unet;
    diffusion::AvgPoolAutoencoder autoencoder{kLatentFactor};
    diffusion::ToyTextEncoder text;
    injection::ToyExtractor extractor;

    explicit ToyStack(diffusion::ToyUNetConfig cfg = {}) : unet(cfg) {}
    ToyStack(const ToyStack&) = delete;
    ToyStack& operator=(const ToyStack&) = delete;

    train::Backbone backbone() { return {&autoencoder, &text, &extractor, &unet, &unet.params()}; }
};

struct Scene {
    RgbImage image;
    BinaryMask mask;
    std::string caption;
};

/// Random smooth scene with rectangles and a random mask; caption words are
/// unrelated to the content and 10% of captions are empty.
Scene generic_scene(Rng& rng, std::size_t size = kImageSize);

/// Dark textured background (about 50) with a bright blob (about 230) that
/// exactly fills the mask. Masks are ellipses drawn on the latent grid.
std::vector<Scene> make_blob_dataset(std::size_t n, std::uint64_t seed, std::size_t size = kImageSize);

/// Random latent-aligned ellipse mask.
BinaryMask random_blob_mask(Rng& rng, std::size_t size = kImageSize);
/// The blob-dataset background without a blob.
RgbImage blob_background(Rng& rng, std::size_t size = kImageSize);

struct PretrainConfig {
    int steps = 1500;
    int batch = 8;
    int pool = 256;
    double learning_rate = 3e-3;
    std::uint64_t seed = 5;
};

/// Trains the toy backbone on generic inpainting with the plain objective.
/// Returns per-step losses.
std::vector<double> pretrain_backbone(ToyStack& stack, const diffusion::NoiseSchedule& schedule,
                                      const PretrainConfig& cfg);

void save_backbone(const ToyStack& stack, const std::filesystem::path& path);
void load_backbone(ToyStack& stack, const std::filesystem::path& path);

/// Mean pixel intensity (RGB average) inside and outside the mask.
std::pair<double, double> region_means(const RgbImage& image, const BinaryMask& mask);

}  // namespace smokegen::toy
