#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smokegen/autograd.hpp"
#include "smokegen/conditioning.hpp"
#include "smokegen/tensor.hpp"

namespace smokegen::diffusion {

/// Cumulative signal coefficients alpha_t for t = 1..T (stored 0-based).
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(std::vector<double> alpha);

    int steps() const { return static_cast<int>(alpha_.size()); }
    /// alpha_t for 1 <= t <= T.
    double alpha(int t) const;
    const std::vector<double>& alphas() const { return alpha_; }

    std::string to_json() const;
    static NoiseSchedule from_json(const std::string& text);

private:
    std::vector<double> alpha_;
};

NoiseSchedule make_linear_schedule(int T);
NoiseSchedule make_cosine_schedule(int T);

enum class Space { pixel, latent };

/// B x C x H x W grid.
struct LatentBatch {
    Tensor data;
    Space space = Space::latent;

    std::size_t batch() const { return data.dim(0); }
    std::size_t channels() const { return data.dim(1); }
    std::size_t height() const { return data.dim(2); }
    std::size_t width() const { return data.dim(3); }

    Tensor sample(std::size_t i) const;
    void set_sample(std::size_t i, const Tensor& chw);
    static LatentBatch stack(const std::vector<Tensor>& samples, Space space = Space::latent);
};

/// sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps, elementwise.
Tensor add_noise(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched);
/// The same at an explicit level alpha in [0, 1].
Tensor noise_to_level(const Tensor& x0, const Tensor& eps, double alpha);
LatentBatch add_noise(const LatentBatch& x0, const LatentBatch& eps, int t, const NoiseSchedule& sched);

/// Deterministic reverse update from a level with alpha_t to one with
/// alpha_prev:
///   sqrt(a_prev)/sqrt(a_t) x_t + sqrt(a_prev) (sqrt(1/a_prev - 1) - sqrt(1/a_t - 1)) eps
Tensor reverse_update(const Tensor& x_t, const Tensor& eps_pred, double alpha_t, double alpha_prev);
/// One step t -> t-1 on the schedule; requires 2 <= t <= T.
Tensor reverse_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched);
LatentBatch reverse_step(const LatentBatch& x_t, const LatentBatch& eps_pred, int t, const NoiseSchedule& sched);

/// Mean squared error over all elements.
double base_loss(const Tensor& eps, const Tensor& eps_pred);
double base_loss(const LatentBatch& eps, const LatentBatch& eps_pred);

// ---- denoiser abstraction ----------------------------------------------

struct TapInfo {
    int id = 0;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
};

/// Called by a denoiser at every tap; the returned activation replaces the
/// tap output for all downstream consumers.
class TapHook {
public:
    virtual ~TapHook() = default;
    virtual ag::Var at_tap(const TapInfo& tap, const ag::Var& x, const SampleConditioning& cond) const = 0;
};

/// Noise predictor. Latents travel as (H*W, C) token matrices so the whole
/// forward pass is differentiable. A single instance must not be called
/// concurrently.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual ag::Var forward(const ag::Var& x_t, int t, const SampleConditioning& cond,
                            const TapHook* hook = nullptr) const = 0;
    virtual std::vector<TapInfo> tap_points(std::size_t latent_h, std::size_t latent_w) const = 0;
    virtual std::size_t latent_channels() const = 0;

    /// Batched inference without gradient recording.
    LatentBatch predict(const LatentBatch& x_t, int t, const ConditioningBundle& cond) const;
};

struct SampleOptions {
    int steps = 50;
    double guidance = 7.5;
    std::uint64_t seed = 0;
};

/// Uniformly strided descending subsequence of 1..T of length `steps`,
/// always containing T and (for steps >= 2) 1.
std::vector<int> strided_timesteps(int T, int steps);

/// Deterministic sampling with classifier-free guidance. The blended noise
/// is (1 - g) eps_uncond + g eps_cond, the same line as
/// eps_uncond + g (eps_cond - eps_uncond). The final update targets alpha = 1.
LatentBatch sample_cfg(const Denoiser& denoiser, const ConditioningBundle& cond, const ConditioningBundle& uncond,
                       const NoiseSchedule& sched, const SampleOptions& opts);

/// Same, starting from a caller-provided x_T.
LatentBatch sample_cfg_from(const Denoiser& denoiser, LatentBatch x_T, const ConditioningBundle& cond,
                            const ConditioningBundle& uncond, const NoiseSchedule& sched, const SampleOptions& opts);

// ---- autoencoders ------------------------------------------------------

class AutoencoderClient {
public:
    virtual ~AutoencoderClient() = default;
    /// (3, H, W) pixels in [-1, 1] -> (C, H/f, W/f).
    virtual Tensor encode(const Tensor& pixels) const = 0;
    virtual Tensor decode(const Tensor& latent) const = 0;
    virtual int downsample_factor() const = 0;
    virtual std::size_t latent_channels() const = 0;
};

/// Pixel space is latent space.
class IdentityAutoencoder final : public AutoencoderClient {
public:
    Tensor encode(const Tensor& pixels) const override;
    Tensor decode(const Tensor& latent) const override;
    int downsample_factor() const override { return 1; }
    std::size_t latent_channels() const override { return 3; }
};

/// Block-average encoder, nearest-neighbour decoder.
class AvgPoolAutoencoder final : public AutoencoderClient {
public:
    explicit AvgPoolAutoencoder(int factor = 8);
    Tensor encode(const Tensor& pixels) const override;
    Tensor decode(const Tensor& latent) const override;
    int downsample_factor() const override { return factor_; }
    std::size_t latent_channels() const override { return 3; }

private:
    int factor_;
};

}  // namespace smokegen::diffusion
