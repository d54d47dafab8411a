#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "smokegen/corpus.hpp"
#include "smokegen/diffusion.hpp"
#include "smokegen/trainer.hpp"

namespace smokegen::gen {

std::vector<std::string> default_lexicon();

struct GenConfig {
    double guidance_scale = 7.5;
    int steps = 50;
    int masks_per_background = 2;
    int samples_per_pair = 3;
    std::uint64_t seed = 0;
    std::size_t output_resolution = 0;  // 0: the background's own size
    std::vector<std::string> lexicon = default_lexicon();
    int rewrite_retries = 2;

    void validate() const;
};

/// True when any lexicon term occurs as a whole word or phrase.
bool mentions_smoke(const std::string& text, const std::vector<std::string>& lexicon);

class RewriteClient {
public:
    virtual ~RewriteClient() = default;
    virtual std::string rewrite(const std::string& caption) = 0;
};

/// Offline engine: appends " with smoke".
std::string template_rewrite(const std::string& caption);

struct RewriteResult {
    std::string text;
    bool fallback = false;
    int attempts = 0;
};

/// Captions already mentioning smoke pass through. Otherwise the client
/// gets one try plus `retries`; failing that, the template engine answers.
RewriteResult rewrite_caption(const std::string& caption, RewriteClient* client,
                              const std::vector<std::string>& lexicon = default_lexicon(), int retries = 2);

struct MaskPair {
    std::string pair_id;  // "<background id>_m<k>"
    corpus::SmokeSample background;
    std::filesystem::path background_path;  // resolved against its manifest
    std::size_t mask_index = 0;
    BinaryMask mask;      // at background resolution
};

using DimsFn = std::function<std::pair<std::size_t, std::size_t>(const corpus::SmokeSample&)>;

/// Reads the pixel size of each background from disk. Keeps a reference to
/// `backgrounds`.
DimsFn file_dims(const corpus::Manifest& backgrounds);

/// masks_per_background pairs per background, drawn without replacement
/// while the pool allows. Each background has its own seeded stream.
std::vector<MaskPair> pair_masks(const corpus::Manifest& backgrounds, const std::vector<BinaryMask>& mask_pool,
                                 const GenConfig& cfg, const DimsFn& dims);

/// Turns a (background, mask, caption) into an image at background size.
class SynthesisBackend {
public:
    virtual ~SynthesisBackend() = default;
    virtual RgbImage synthesize(const RgbImage& background, const BinaryMask& mask, const std::string& caption,
                                std::uint64_t seed) const = 0;
};

/// Guided sampling with a (possibly adapted) denoiser at the backbone's
/// native size; results are resized back to the background size.
class DiffusionBackend final : public SynthesisBackend {
public:
    DiffusionBackend(train::Backbone backbone, const diffusion::Denoiser& denoiser, diffusion::NoiseSchedule schedule,
                     double guidance, int steps, std::size_t native_size);
    RgbImage synthesize(const RgbImage& background, const BinaryMask& mask, const std::string& caption,
                        std::uint64_t seed) const override;

private:
    train::Backbone backbone_;
    const diffusion::Denoiser* denoiser_;
    diffusion::NoiseSchedule schedule_;
    double guidance_;
    int steps_;
    std::size_t native_;
};

/// Paints a flat grey-white plume into the mask; for pipeline tests.
class MockBackend final : public SynthesisBackend {
public:
    RgbImage synthesize(const RgbImage& background, const BinaryMask& mask, const std::string& caption,
                        std::uint64_t seed) const override;
};

/// Copies background pixels wherever the mask is 0.
RgbImage recomposite(const RgbImage& generated, const RgbImage& background, const BinaryMask& mask);

struct QuarantineEntry {
    std::string sample_id;
    std::string pair_id;
    std::string kind;
    std::string message;
};

struct GenerateSummary {
    corpus::Manifest manifest;
    std::vector<QuarantineEntry> quarantined;
    std::size_t reused = 0;  // samples already present from an earlier run
};

/// Writes images/, masks/, manifest.jsonl and quarantine.jsonl under
/// out_dir. Samples already listed in an existing manifest are kept as is.
GenerateSummary generate_batch(const std::vector<MaskPair>& pairs, const SynthesisBackend& backend,
                               const GenConfig& cfg, const std::filesystem::path& out_dir,
                               RewriteClient* rewriter = nullptr);

}  // namespace smokegen::gen
