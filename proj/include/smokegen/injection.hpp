#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "smokegen/conditioning.hpp"
#include "smokegen/diffusion.hpp"
#include "smokegen/image.hpp"
#include "smokegen/params.hpp"

namespace smokegen::injection {

enum class Role { none, mask, masked_image, both };

std::string to_string(Role r);
Role parse_role(const std::string& s);

/// Tap id -> which feature streams are injected there.
struct InjectionSchedule {
    std::map<int, Role> assignment;

    Role at(int tap) const;
    bool any_active() const;
    /// Every id in `registry` appears exactly once and nothing else does. The
    /// all-none schedule is only accepted when `require_active` is false.
    void validate(const std::vector<int>& registry, bool require_active = true) const;

    nlohmann::ordered_json to_json() const;
    static InjectionSchedule from_json(const nlohmann::json& j);
};

/// 0, 8: masked image; 1, 7: both; 4: mask; everything else none.
InjectionSchedule default_schedule();
InjectionSchedule all_none_schedule(int taps = 9);

// ---- feature extraction ------------------------------------------------

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    /// Pre-pooling feature grid (C1, H1, W1) for an RGB input already at
    /// native resolution.
    virtual Tensor extract(const RgbImage& image) const = 0;
    virtual std::size_t native_width() const = 0;
    virtual std::size_t native_height() const = 0;
    virtual std::size_t channels() const = 0;
};

/// Two stride-2, 2x2 convolutions with SiLU, fixed seeded weights. Pixels
/// enter as v / 255, so an all-black input yields a grid that depends on the
/// biases only.
class ToyExtractor final : public FeatureExtractor {
public:
    explicit ToyExtractor(std::size_t native = 32, std::size_t hidden = 8, std::size_t out = 16, std::uint64_t seed = 11);
    Tensor extract(const RgbImage& image) const override;
    std::size_t native_width() const override { return native_; }
    std::size_t native_height() const override { return native_; }
    std::size_t channels() const override { return out_; }

private:
    std::size_t native_, hidden_, out_;
    Tensor w1_, b1_, w2_, b2_;  // (out, in, 2, 2) and (out)
};

struct ExtractorGeometry {
    std::size_t channels, height, width;
};

/// Output of the last residual stage (before global pooling) of the standard
/// 50-layer residual network for an input of the given size.
ExtractorGeometry resnet50_prepool_geometry(std::size_t height, std::size_t width);

/// Mask channel-tripled and nearest-resized, masked image area-resized, both
/// to the extractor's native size.
FeatureBundle extract_features(const BinaryMask& mask, const RgbImage& masked_image, const FeatureExtractor& extractor);

/// Source image with the mask region set to black.
RgbImage apply_mask(const RgbImage& image, const BinaryMask& mask);

// ---- attention ---------------------------------------------------------

/// (C1, H1, W1) grid -> (H1*W1, d) tokens via a per-position linear map.
ag::Var project_features(const Tensor& features, const ag::Var& weight, const ag::Var& bias = {});

struct StreamParams {
    ag::Var key;    // (C, d)
    ag::Var value;  // (C, d)
};

struct FuseMlp {
    ag::Var w0, b0;  // (k*d, hidden)
    ag::Var w1, b1;  // (hidden, C2)
};

ag::Var apply_mlp(const ag::Var& z, const FuseMlp& mlp);

/// softmax(X Wq (F Wk)^T / sqrt(d_head)) per head, rows sum to 1.
std::vector<ag::Var> attention_weights(const ag::Var& x, const ag::Var& f, const ag::Var& query,
                                       const StreamParams& stream, int heads = 1);
/// Z = softmax(X Wq (F Wk)^T / sqrt(d)) F Wv, heads concatenated.
ag::Var attend(const ag::Var& x, const ag::Var& f, const ag::Var& query, const StreamParams& stream, int heads = 1);

/// X + MLP(Z) with a single feature stream.
ag::Var cross_attend(const ag::Var& x, const ag::Var& f, const ag::Var& query, const StreamParams& stream,
                     const FuseMlp& mlp, int heads = 1);

/// X + MLP(concat(Z1, Z2)); the query projection is shared by both streams.
ag::Var joint_cross_attend(const ag::Var& x, const ag::Var& f_mask, const ag::Var& f_masked, const ag::Var& query,
                           const StreamParams& p_mask, const StreamParams& p_masked, const FuseMlp& mlp, int heads = 1);

// ---- adapters ----------------------------------------------------------

struct AdapterConfig {
    std::size_t attention_dim = 0;  // 0: tap channel width
    std::size_t hidden = 0;         // 0: tap channel width
    int heads = 1;
    double init_std = 0.0;          // 0: 1/sqrt(fan_in)
    bool zero_final = true;
    std::size_t latent_h = 8;
    std::size_t latent_w = 8;
    std::size_t feature_channels = 16;
    std::uint64_t seed = 3;

    nlohmann::ordered_json to_json() const;
    static AdapterConfig from_json(const nlohmann::json& j);
};

/// Per-tap adapter weights, independent across taps. Names follow
/// "tap{N}.{stream}.{matrix}" with streams mask, masked_image, query, fuse.
class AdapterSet {
public:
    AdapterSet() = default;
    AdapterSet(InjectionSchedule schedule, const std::vector<diffusion::TapInfo>& registry, AdapterConfig cfg);

    const InjectionSchedule& schedule() const { return schedule_; }
    const AdapterConfig& config() const { return cfg_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    const diffusion::TapInfo& tap(int id) const;

    /// Applies the adapter at `tap` to activation `x` (tokens, C2).
    ag::Var apply(const diffusion::TapInfo& tap, const ag::Var& x, const SampleConditioning& cond) const;

private:
    const ag::Var& p(int tap, const std::string& stream, const std::string& matrix) const;
    ag::Var stream_tokens(int tap, const std::string& stream, const Tensor& features) const;

    InjectionSchedule schedule_;
    AdapterConfig cfg_;
    std::map<int, diffusion::TapInfo> taps_;
    ParameterSet params_;
};

/// The base denoiser with adapters spliced in at their taps.
class AdaptedDenoiser final : public diffusion::Denoiser {
public:
    AdaptedDenoiser(const diffusion::Denoiser& base, const AdapterSet& adapters);

    ag::Var forward(const ag::Var& x_t, int t, const SampleConditioning& cond,
                    const diffusion::TapHook* hook = nullptr) const override;
    std::vector<diffusion::TapInfo> tap_points(std::size_t h, std::size_t w) const override {
        return base_->tap_points(h, w);
    }
    std::size_t latent_channels() const override { return base_->latent_channels(); }

private:
    class Hook;
    const diffusion::Denoiser* base_;
    const AdapterSet* adapters_;
};

/// Checks the schedule against the base registry and the adapter shapes
/// against the tap widths.
AdaptedDenoiser attach_adapters(const diffusion::Denoiser& base, const AdapterSet& adapters);

/// Serialized adapter archive: version, schedule, config, tensors.
nlohmann::ordered_json adapters_to_json(const AdapterSet& adapters);
AdapterSet adapters_from_json(const nlohmann::json& j, const diffusion::Denoiser& base);

nlohmann::ordered_json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

}  // namespace smokegen::injection
