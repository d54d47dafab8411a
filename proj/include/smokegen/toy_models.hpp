#pragma once

// CPU-sized stand-ins for the backbone bindings: a text encoder and a small
// U-shaped denoiser with nine tap points. Parameters live in a ParameterSet
// under the "backbone." prefix.

#include <cstdint>
#include <string>

#include "smokegen/diffusion.hpp"
#include "smokegen/params.hpp"

namespace smokegen::diffusion {

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    /// (tokens, dim); never empty.
    virtual Tensor embed(const std::string& prompt) const = 0;
    virtual std::size_t dim() const = 0;
};

/// Each lower-cased word maps to a fixed pseudo-random vector. The empty
/// prompt is a single reserved token.
class ToyTextEncoder final : public TextEncoder {
public:
    explicit ToyTextEncoder(std::size_t dim = 16, std::uint64_t seed = 7);
    Tensor embed(const std::string& prompt) const override;
    std::size_t dim() const override { return dim_; }

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

struct ToyUNetConfig {
    std::size_t latent_channels = 3;
    std::size_t width1 = 16;
    std::size_t width2 = 32;
    std::size_t text_dim = 16;
    std::size_t time_dim = 16;
    std::size_t emb_dim = 32;
    int max_t = 1000;
    std::uint64_t seed = 1;
};

/// Inputs per token: [x_t, mask, masked latent]. Tap layout for an H x W
/// latent (H, W divisible by 4):
///   0: H      1: H/2    2..6: H/4    7: H/2    8: H
/// with skips 3->5, 2->6, 1->7, 0->8.
class ToyUNet final : public Denoiser {
public:
    explicit ToyUNet(ToyUNetConfig cfg = {});

    ag::Var forward(const ag::Var& x_t, int t, const SampleConditioning& cond,
                    const TapHook* hook = nullptr) const override;
    std::vector<TapInfo> tap_points(std::size_t latent_h, std::size_t latent_w) const override;
    std::size_t latent_channels() const override { return cfg_.latent_channels; }

    const ToyUNetConfig& config() const { return cfg_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

private:
    ag::Var embedding(int t, const SampleConditioning& cond) const;
    ag::Var block(const std::string& name, const ag::Var& h, const ag::Var& emb) const;
    const ag::Var& p(const std::string& name) const { return params_.get("backbone." + name); }

    ToyUNetConfig cfg_;
    ParameterSet params_;
};

/// Sinusoidal timestep features, (1, dim).
Tensor timestep_features(int t, std::size_t dim, int max_t);

}  // namespace smokegen::diffusion
