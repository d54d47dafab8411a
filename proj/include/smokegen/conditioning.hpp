#pragma once

#include <optional>
#include <vector>

#include "smokegen/mask.hpp"
#include "smokegen/tensor.hpp"

namespace smokegen {

/// Pre-pooling extractor outputs for one sample, each (C1, H1, W1).
struct FeatureBundle {
    Tensor mask_features;          // F_m
    Tensor masked_image_features;  // F_M
};

/// Everything the denoiser is conditioned on for one sample.
struct SampleConditioning {
    Tensor text_embedding;       // (tokens, E)
    BinaryMask latent_mask;      // latent resolution
    Tensor masked_latent;        // (C, H, W)
    std::optional<FeatureBundle> features;
};

struct ConditioningBundle {
    std::vector<SampleConditioning> samples;

    std::size_t size() const { return samples.size(); }
    const SampleConditioning& operator[](std::size_t i) const { return samples[i]; }
};

}  // namespace smokegen
