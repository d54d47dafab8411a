#include "smokegen/generator.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <set>

#include <json.hpp>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::gen {

std::vector<std::string> default_lexicon() { return {"smoke", "plume", "smoke plume", "wildfire smoke"}; }

void GenConfig::validate() const {
    if (!(guidance_scale >= 0.0)) throw InvalidConfig("generate.guidance_scale must be >= 0");
    if (steps < 1) throw InvalidConfig("generate.steps must be positive");
    if (masks_per_background < 0) throw InvalidConfig("generate.masks_per_background must be >= 0");
    if (samples_per_pair < 1) throw InvalidConfig("generate.samples_per_pair must be positive");
    if (lexicon.empty()) throw InvalidConfig("generate.lexicon must not be empty");
    if (rewrite_retries < 0) throw InvalidConfig("generate.rewrite_retries must be >= 0");
}

namespace {

std::vector<std::string> word_tokens(const std::string& text) {
    std::string s = to_lower(text);
    for (auto& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c))) c = ' ';
    return split_words(s);
}

}  // namespace

bool mentions_smoke(const std::string& text, const std::vector<std::string>& lexicon) {
    const auto words = word_tokens(text);
    for (const auto& term : lexicon) {
        const auto tw = word_tokens(term);
        if (tw.empty() || tw.size() > words.size()) continue;
        for (std::size_t i = 0; i + tw.size() <= words.size(); ++i)
            if (std::equal(tw.begin(), tw.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) return true;
    }
    return false;
}

std::string template_rewrite(const std::string& caption) {
    std::string c = trim(caption);
    while (!c.empty() && (c.back() == '.' || c.back() == ' ')) c.pop_back();
    if (c.empty()) return "smoke";
    return c + " with smoke";
}

RewriteResult rewrite_caption(const std::string& caption, RewriteClient* client,
                              const std::vector<std::string>& lexicon, int retries) {
    if (trim(caption).empty()) throw InvalidInput("rewrite_caption: empty caption");
    if (mentions_smoke(caption, lexicon)) return {caption, false, 0};
    RewriteResult r;
    if (client) {
        for (int attempt = 0; attempt <= retries; ++attempt) {
            ++r.attempts;
            std::string out;
            try {
                out = trim(client->rewrite(caption));
            } catch (const TransportError&) {
                continue;
            }
            if (!out.empty() && mentions_smoke(out, lexicon)) {
                r.text = out;
                return r;
            }
        }
    }
    r.text = template_rewrite(caption);
    r.fallback = client != nullptr;
    return r;
}

DimsFn file_dims(const corpus::Manifest& backgrounds) {
    return [&backgrounds](const corpus::SmokeSample& s) { return image_dims(backgrounds.resolve(s.image_path)); };
}

std::vector<MaskPair> pair_masks(const corpus::Manifest& backgrounds, const std::vector<BinaryMask>& mask_pool,
                                 const GenConfig& cfg, const DimsFn& dims) {
    cfg.validate();
    if (mask_pool.empty()) throw InvalidInput("pair_masks: empty mask pool");
    std::vector<MaskPair> out;
    if (cfg.masks_per_background == 0) return out;
    out.reserve(backgrounds.size() * static_cast<std::size_t>(cfg.masks_per_background));
    std::vector<std::size_t> order(mask_pool.size());
    for (const auto& bg : backgrounds.records) {
        Rng rng(derive_seed(cfg.seed, "pair:" + bg.id));
        const auto [w, h] = dims(bg);
        std::size_t used = order.size();
        for (int k = 0; k < cfg.masks_per_background; ++k) {
            // A fresh permutation whenever the pool is exhausted.
            if (used == order.size()) {
                std::iota(order.begin(), order.end(), 0);
                shuffle_in_place(order, rng);
                used = 0;
            }
            const std::size_t idx = order[used++];
            out.push_back({bg.id + "_m" + std::to_string(k), bg, backgrounds.resolve(bg.image_path), idx,
                           mask_pool[idx].resized_nearest(w, h)});
        }
    }
    return out;
}

// ---- backends ----------------------------------------------------------

DiffusionBackend::DiffusionBackend(train::Backbone backbone, const diffusion::Denoiser& denoiser,
                                   diffusion::NoiseSchedule schedule, double guidance, int steps,
                                   std::size_t native_size)
    : backbone_(backbone), denoiser_(&denoiser), schedule_(std::move(schedule)), guidance_(guidance), steps_(steps),
      native_(native_size) {
    if (steps_ > schedule_.steps()) throw InvalidConfig("generate.steps exceeds the schedule length");
}

RgbImage DiffusionBackend::synthesize(const RgbImage& background, const BinaryMask& mask, const std::string& caption,
                                      std::uint64_t seed) const {
    const bool native = background.width == native_ && background.height == native_;
    const RgbImage bg = native ? background : resize_area(background, native_, native_);
    const BinaryMask m = native ? mask : mask.resized_nearest(native_, native_);
    ConditioningBundle cond{{train::make_conditioning(bg, m, caption, backbone_)}};
    ConditioningBundle uncond{{train::make_conditioning(bg, m, "", backbone_)}};
    diffusion::SampleOptions so;
    so.steps = steps_;
    so.guidance = guidance_;
    so.seed = seed;
    const auto x = diffusion::sample_cfg(*denoiser_, cond, uncond, schedule_, so);
    RgbImage out = from_tensor(backbone_.autoencoder->decode(x.sample(0)));
    if (!native) out = resize_area(out, background.width, background.height);
    return out;
}

RgbImage MockBackend::synthesize(const RgbImage& background, const BinaryMask& mask, const std::string&,
                                 std::uint64_t seed) const {
    RgbImage out = background;
    const std::uint8_t v = static_cast<std::uint8_t>(200 + seed % 40);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            if (mask.at(y, x))
                for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = v;
    return out;
}

RgbImage recomposite(const RgbImage& generated, const RgbImage& background, const BinaryMask& mask) {
    if (generated.width != background.width || generated.height != background.height ||
        mask.width() != background.width || mask.height() != background.height)
        throw InvalidInput("recomposite: dimension mismatch");
    RgbImage out = generated;
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            if (!mask.at(y, x))
                for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = background.at(y, x, c);
    return out;
}

// ---- batch -------------------------------------------------------------

GenerateSummary generate_batch(const std::vector<MaskPair>& pairs, const SynthesisBackend& backend,
                               const GenConfig& cfg, const std::filesystem::path& out_dir, RewriteClient* rewriter) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");
    const fs::path manifest_path = out_dir / "manifest.jsonl";

    std::map<std::string, corpus::SmokeSample> previous;
    if (fs::exists(manifest_path))
        for (auto& r : corpus::read_manifest(manifest_path).records) previous.emplace(r.id, std::move(r));

    GenerateSummary summary;
    summary.manifest.base_dir = out_dir;
    for (const auto& pair : pairs) {
        std::vector<std::string> ids;
        for (int k = 0; k < cfg.samples_per_pair; ++k) ids.push_back(pair.pair_id + "_s" + std::to_string(k));
        const bool all_done = std::all_of(ids.begin(), ids.end(), [&](const std::string& id) {
            auto it = previous.find(id);
            return it != previous.end() && fs::exists(out_dir / it->second.image_path);
        });
        if (all_done) {
            for (const auto& id : ids) summary.manifest.records.push_back(previous.at(id));
            summary.reused += ids.size();
            continue;
        }
        RgbImage background;
        std::string caption;
        try {
            background = load_rgb(pair.background_path);
        } catch (const Error& e) {
            for (const auto& id : ids) summary.quarantined.push_back({id, pair.pair_id, e.kind(), e.what()});
            continue;
        }
        try {
            caption = rewrite_caption(pair.background.caption, rewriter, cfg.lexicon, cfg.rewrite_retries).text;
        } catch (const Error& e) {
            for (const auto& id : ids) summary.quarantined.push_back({id, pair.pair_id, e.kind(), e.what()});
            continue;
        }
        const std::string mask_rel = "masks/" + pair.pair_id + ".png";
        try {
            corpus::save_mask(pair.mask, out_dir / mask_rel);
        } catch (const Error& e) {
            for (const auto& id : ids) summary.quarantined.push_back({id, pair.pair_id, e.kind(), e.what()});
            continue;
        }
        for (const auto& id : ids) {
            try {
                if (pair.mask.width() != background.width || pair.mask.height() != background.height)
                    throw InvalidInput("mask " + std::to_string(pair.mask.width()) + "x" +
                                       std::to_string(pair.mask.height()) + " does not match background");
                const RgbImage raw = backend.synthesize(background, pair.mask, caption, derive_seed(cfg.seed, id));
                const RgbImage img = recomposite(raw, background, pair.mask);
                const std::string image_rel = "images/" + id + ".png";
                save_rgb(img, out_dir / image_rel);
                summary.manifest.records.push_back(
                    {id, image_rel, mask_rel, caption, corpus::Source::synthetic, pair.background.split});
            } catch (const Error& e) {
                summary.quarantined.push_back({id, pair.pair_id, e.kind(), e.what()});
            }
        }
    }
    corpus::write_manifest(summary.manifest, manifest_path);
    std::string q;
    for (const auto& e : summary.quarantined)
        q += nlohmann::ordered_json{{"id", e.sample_id}, {"pair_id", e.pair_id}, {"kind", e.kind}, {"message", e.message}}
                 .dump() +
             "\n";
    write_text_atomic(out_dir / "quarantine.jsonl", q);
    return summary;
}

}  // namespace smokegen::gen
