#include <doctest.h>

#include <chrono>
#include <set>

#include "smokegen/error.hpp"
#include "smokegen/generator.hpp"
#include "smokegen/toy_harness.hpp"
#include "support.hpp"

using namespace smokegen;
using namespace smokegen::gen;

namespace {

class FixedClient final : public RewriteClient {
public:
    explicit FixedClient(std::string text) : text_(std::move(text)) {}
    std::string rewrite(const std::string&) override {
        ++calls;
        return text_;
    }
    int calls = 0;

private:
    std::string text_;
};

class DownClient final : public RewriteClient {
public:
    std::string rewrite(const std::string&) override { throw TransportError("rewrite service down"); }
};

class FlakyBackend final : public SynthesisBackend {
public:
    RgbImage synthesize(const RgbImage& bg, const BinaryMask& m, const std::string& c, std::uint64_t seed) const override {
        if (seed % 5 == 0) throw InvalidStep("sampler diverged");
        return inner.synthesize(bg, m, c, seed);
    }
    MockBackend inner;
};

corpus::Manifest write_backgrounds(const std::filesystem::path& dir, std::size_t n, std::size_t w, std::size_t h,
                                   std::uint64_t seed = 1) {
    Rng rng(seed);
    corpus::Manifest m;
    m.base_dir = dir;
    std::filesystem::create_directories(dir / "bg");
    for (std::size_t i = 0; i < n; ++i) {
        const std::string id = "bg" + std::to_string(i);
        save_rgb(testing::random_image(w, h, rng), dir / "bg" / (id + ".png"));
        m.records.push_back({id, "bg/" + id + ".png", std::nullopt, "a pine forest on a hillside", corpus::Source::real,
                             i % 4 == 3 ? corpus::Split::val : corpus::Split::train});
    }
    return m;
}

std::vector<BinaryMask> mask_pool(std::size_t n, std::uint64_t seed = 2) {
    Rng rng(seed);
    std::vector<BinaryMask> pool;
    for (std::size_t i = 0; i < n; ++i)
        pool.push_back(testing::rect_mask(32, 32, 2 + i % 10, 3 + i % 7, 8 + i % 5, 10 + i % 3));
    return pool;
}

}  // namespace

TEST_CASE("caption rewriting") {
    CHECK(rewrite_caption("a forest on a hillside", nullptr).text == "a forest on a hillside with smoke");
    CHECK(template_rewrite("a forest on a hillside.") == "a forest on a hillside with smoke");
    const auto same = rewrite_caption("Smoke rising over pines", nullptr);
    CHECK(same.text == "Smoke rising over pines");
    CHECK(same.attempts == 0);
    CHECK(mentions_smoke("a thin plume, far away", default_lexicon()));
    CHECK_FALSE(mentions_smoke("a smokestack by the lake", default_lexicon()));
    CHECK(mentions_smoke("wildfire smoke", {"wildfire smoke"}));

    FixedClient bad("a sunny meadow");
    const auto fb = rewrite_caption("a sunny meadow", &bad);
    CHECK(fb.text == "a sunny meadow with smoke");
    CHECK(fb.fallback);
    CHECK(bad.calls == 3);
    CHECK(fb.attempts == 3);

    FixedClient good("grey smoke drifting over a meadow");
    const auto ok = rewrite_caption("a meadow", &good);
    CHECK(ok.text == "grey smoke drifting over a meadow");
    CHECK_FALSE(ok.fallback);
    CHECK(good.calls == 1);

    DownClient down;
    CHECK(rewrite_caption("a valley", &down, default_lexicon(), 1).text == "a valley with smoke");
    CHECK_THROWS_AS(rewrite_caption("   ", nullptr), InvalidInput);
}

TEST_CASE("pair_masks") {
    corpus::Manifest bgs;
    for (int i = 0; i < 10000; ++i)
        bgs.records.push_back({"b" + std::to_string(i), "b.png", std::nullopt, "forest", corpus::Source::real,
                               corpus::Split::train});
    const DimsFn dims = [](const corpus::SmokeSample&) { return std::pair<std::size_t, std::size_t>{48, 40}; };
    const auto pool = mask_pool(7);
    GenConfig cfg;
    cfg.seed = 11;

    SUBCASE("two masks per background") {
        const auto pairs = pair_masks(bgs, pool, cfg, dims);
        CHECK(pairs.size() == 20000);
        for (std::size_t i = 0; i < pairs.size(); i += 2) {
            CHECK(pairs[i].background.id == pairs[i + 1].background.id);
            CHECK(pairs[i].mask_index != pairs[i + 1].mask_index);
            CHECK(pairs[i].pair_id == pairs[i].background.id + "_m0");
        }
        CHECK(pairs[0].mask.width() == 48);
        CHECK(pairs[0].mask.height() == 40);
        CHECK(pairs[0].mask == pool[pairs[0].mask_index].resized_nearest(48, 40));
        std::set<std::size_t> used;
        for (const auto& p : pairs) used.insert(p.mask_index);
        CHECK(used.size() == pool.size());
    }
    SUBCASE("determinism") {
        corpus::Manifest few;
        few.records.assign(bgs.records.begin(), bgs.records.begin() + 50);
        const auto a = pair_masks(few, pool, cfg, dims), b = pair_masks(few, pool, cfg, dims);
        std::vector<std::size_t> ia, ib, ic;
        for (const auto& p : a) ia.push_back(p.mask_index);
        for (const auto& p : b) ib.push_back(p.mask_index);
        CHECK(ia == ib);
        cfg.seed = 12;
        for (const auto& p : pair_masks(few, pool, cfg, dims)) ic.push_back(p.mask_index);
        CHECK(ia != ic);
    }
    SUBCASE("more masks than the pool holds") {
        corpus::Manifest one;
        one.records.push_back(bgs.records[0]);
        cfg.masks_per_background = 5;
        const auto pairs = pair_masks(one, mask_pool(2), cfg, dims);
        REQUIRE(pairs.size() == 5);
        CHECK(pairs[0].mask_index != pairs[1].mask_index);
        CHECK(pairs[2].mask_index != pairs[3].mask_index);
    }
    SUBCASE("edge cases") {
        cfg.masks_per_background = 0;
        CHECK(pair_masks(bgs, pool, cfg, dims).empty());
        CHECK_THROWS_AS(pair_masks(bgs, {}, GenConfig{}, dims), InvalidInput);
        GenConfig bad;
        bad.samples_per_pair = 0;
        CHECK_THROWS_AS(bad.validate(), InvalidConfig);
    }
}

TEST_CASE("generate_batch with the mock backend") {
    testing::TempDir dir("gen");
    const auto bgs = write_backgrounds(dir / "in", 10, 32, 24);
    GenConfig cfg;
    cfg.seed = 3;
    const auto pairs = pair_masks(bgs, mask_pool(6), cfg, file_dims(bgs));
    REQUIRE(pairs.size() == 20);
    const auto out = dir / "out";

    const auto s = generate_batch(pairs, MockBackend{}, cfg, out);
    CHECK(s.manifest.size() == 60);
    CHECK(s.quarantined.empty());
    std::set<std::string> ids;
    for (const auto& r : s.manifest.records) {
        ids.insert(r.id);
        CHECK(r.source == corpus::Source::synthetic);
        REQUIRE(r.mask_path);
        CHECK(mentions_smoke(r.caption, default_lexicon()));
        const auto img = load_rgb(out / r.image_path);
        const auto mask = corpus::load_mask(out / *r.mask_path);
        const auto* bg = bgs.find(r.id.substr(0, r.id.find('_')));
        REQUIRE(bg);
        const auto bimg = load_rgb(bgs.resolve(bg->image_path));
        bool inside_changed = false;
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                    if (!mask.at(y, x)) REQUIRE(img.at(y, x, c) == bimg.at(y, x, c));
                    else if (img.at(y, x, c) != bimg.at(y, x, c)) inside_changed = true;
                }
        CHECK(inside_changed);
        CHECK(r.split == bg->split);
    }
    CHECK(ids.size() == 60);
    const auto on_disk = corpus::read_manifest(out / "manifest.jsonl");
    CHECK(on_disk.records == s.manifest.records);
    CHECK(corpus::validate_manifest(on_disk).empty());

    const auto t0 = std::filesystem::last_write_time(out / s.manifest.records[0].image_path);
    const auto again = generate_batch(pairs, MockBackend{}, cfg, out);
    CHECK(again.reused == 60);
    CHECK(again.manifest.records == s.manifest.records);
    CHECK(std::filesystem::last_write_time(out / s.manifest.records[0].image_path) == t0);
}

TEST_CASE("per-sample failures are quarantined and the batch continues") {
    testing::TempDir dir("gen-q");
    auto bgs = write_backgrounds(dir / "in", 8, 32, 32);
    bgs.records[2].image_path = "bg/missing.png";
    GenConfig cfg;
    cfg.seed = 5;
    const DimsFn dims = [](const corpus::SmokeSample&) { return std::pair<std::size_t, std::size_t>{32, 32}; };
    auto pairs = pair_masks(bgs, mask_pool(4), cfg, dims);
    pairs[5].mask = BinaryMask(16, 16, 1);
    const auto s = generate_batch(pairs, FlakyBackend{}, cfg, dir / "out");
    CHECK(s.manifest.size() + s.quarantined.size() == pairs.size() * 3);
    std::size_t flaky = 0;
    for (const auto& q : s.quarantined) {
        if (q.pair_id.rfind("bg2_", 0) == 0) CHECK(q.kind == "invalid-input");
        if (q.kind == "invalid-step") ++flaky;
    }
    CHECK(flaky > 0);
    CHECK(read_lines(dir / "out" / "quarantine.jsonl").size() == s.quarantined.size());
    std::size_t bg2 = 0, p5 = 0;
    for (const auto& q : s.quarantined) {
        bg2 += q.pair_id.rfind("bg2_", 0) == 0;
        p5 += q.pair_id == pairs[5].pair_id;
    }
    CHECK(bg2 == 6);
    CHECK(p5 == 3);
}

TEST_CASE("full-scale pool counts") {
    testing::TempDir dir("gen-big");
    const auto bgs = write_backgrounds(dir / "in", 10000, 4, 4);
    GenConfig cfg;
    cfg.seed = 8;
    std::vector<BinaryMask> pool{testing::rect_mask(4, 4, 0, 0, 2, 2), testing::rect_mask(4, 4, 1, 1, 3, 2),
                                 testing::rect_mask(4, 4, 2, 0, 2, 4)};
    const auto pairs = pair_masks(bgs, pool, cfg, file_dims(bgs));
    CHECK(pairs.size() == 20000);
    const auto s = generate_batch(pairs, MockBackend{}, cfg, dir / "out");
    CHECK(s.manifest.size() == 60000);
    CHECK(s.quarantined.empty());
}

TEST_CASE("toy diffusion backend") {
    testing::TempDir dir("gen-toy");
    const auto bgs = write_backgrounds(dir / "in", 1, 64, 64);
    diffusion::ToyUNetConfig uc;
    uc.max_t = 100;
    toy::ToyStack stack(uc);
    injection::AdapterSet adapters(injection::default_schedule(), stack.unet.tap_points(8, 8), {});
    const auto adapted = injection::attach_adapters(stack.unet, adapters);
    const auto sched = diffusion::make_linear_schedule(100);
    DiffusionBackend backend(stack.backbone(), adapted, sched, 7.5, 5, 64);

    GenConfig cfg;
    cfg.masks_per_background = 1;
    cfg.samples_per_pair = 1;
    cfg.steps = 5;
    std::vector<BinaryMask> pool{testing::rect_mask(64, 64, 16, 16, 24, 24)};
    const auto pairs = pair_masks(bgs, pool, cfg, file_dims(bgs));
    const auto s = generate_batch(pairs, backend, cfg, dir / "a");
    REQUIRE(s.manifest.size() == 1);
    const auto& r = s.manifest.records[0];
    CHECK(r.mask_path);
    CHECK(r.caption == "a pine forest on a hillside with smoke");
    CHECK(std::filesystem::exists(dir / "a" / *r.mask_path));

    const auto s2 = generate_batch(pairs, backend, cfg, dir / "b");
    CHECK(load_rgb(dir / "a" / r.image_path) == load_rgb(dir / "b" / s2.manifest.records[0].image_path));

    CHECK_THROWS_AS(DiffusionBackend(stack.backbone(), adapted, sched, 7.5, 101, 64), InvalidConfig);
    CHECK_THROWS_AS(recomposite(RgbImage(4, 4), RgbImage(4, 5), BinaryMask(4, 4)), InvalidInput);
}
