#include <doctest.h>

#include <cmath>
#include <deque>
#include <set>

#include "smokegen/corpus.hpp"
#include "smokegen/error.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace smokegen;
using namespace smokegen::corpus;
using testing::TempDir;
using testing::flood_fill_oracle;

namespace {

SmokeSample sample(const std::string& id, bool pos, Source src) {
    SmokeSample s;
    s.id = id;
    s.image_path = id + ".png";
    if (pos) s.mask_path = id + "_mask.png";
    s.caption = "caption " + id;
    s.source = src;
    return s;
}

}  // namespace

TEST_CASE("binarize_mask examples") {
    GrayImage g(2, 2);
    g.pixels = {0, 200, 127, 128};
    auto m = binarize_mask(g, 128);
    CHECK(m.bits() == std::vector<std::uint8_t>{0, 1, 0, 1});
    CHECK(binarize_mask(GrayImage(5, 4, 0)).count() == 0);
    CHECK(binarize_mask(GrayImage(5, 4, 255)).count() == 20);
    CHECK_THROWS_AS(binarize_mask(GrayImage()), InvalidInput);
}

TEST_CASE("largest_component_bbox examples") {
    BinaryMask one(10, 10);
    one.set(3, 5, true);
    CHECK(largest_component_bbox(one) == PixelRect{5, 3, 1, 1});
    CHECK(largest_component_bbox(BinaryMask(8, 8, 1)) == PixelRect{0, 0, 8, 8});
    CHECK_THROWS_AS(largest_component_bbox(BinaryMask(4, 4)), NoForeground);

    // 12-pixel and 5-pixel components on 16x16.
    BinaryMask two = testing::rect_mask(16, 16, 1, 1, 4, 3);
    for (int x = 10; x < 15; ++x) two.set(12, x, true);
    CHECK(largest_component_bbox(two, Connectivity::four) == PixelRect{1, 1, 4, 3});
    CHECK(largest_component_bbox(two, Connectivity::four) == flood_fill_oracle(two, 4));
}

TEST_CASE("equal components resolve to the first in scan order") {
    BinaryMask m = testing::rect_mask(20, 20, 12, 2, 3, 3);
    auto b = testing::rect_mask(20, 20, 1, 10, 3, 3);
    for (std::size_t y = 0; y < 20; ++y)
        for (std::size_t x = 0; x < 20; ++x)
            if (b.at(y, x)) m.set(y, x, true);
    CHECK(largest_component_bbox(m) == PixelRect{12, 2, 3, 3});
}

TEST_CASE("diagonal pixels join only under 8-connectivity") {
    BinaryMask m(6, 6);
    m.set(0, 0, true), m.set(1, 1, true), m.set(2, 2, true);
    m.set(5, 4, true), m.set(5, 5, true);
    CHECK(largest_component_bbox(m, Connectivity::eight) == PixelRect{0, 0, 3, 3});
    CHECK(largest_component_bbox(m, Connectivity::four) == PixelRect{4, 5, 2, 1});
}

TEST_CASE("largest_component_bbox agrees with flood fill on random masks") {
    Rng rng(77);
    for (int i = 0; i < 200; ++i) {
        auto m = testing::random_mask(32, 32, 0.1 + 0.4 * (i % 5) / 4.0, rng);
        if (!m.any()) m.set(0, 0, true);
        CHECK(largest_component_bbox(m, Connectivity::eight) == flood_fill_oracle(m, 8));
        CHECK(largest_component_bbox(m, Connectivity::four) == flood_fill_oracle(m, 4));
    }
}

TEST_CASE("to_yolo_label examples and errors") {
    auto l = to_yolo_label({10, 20, 30, 40}, 100, 100);
    CHECK(l.class_id == 0);
    CHECK(l.cx == doctest::Approx(0.25));
    CHECK(l.cy == doctest::Approx(0.40));
    CHECK(l.w == doctest::Approx(0.30));
    CHECK(l.h == doctest::Approx(0.40));
    auto full = to_yolo_label({0, 0, 64, 48}, 64, 48);
    CHECK(full.cx == 0.5);
    CHECK(full.cy == 0.5);
    CHECK(full.w == 1.0);
    CHECK(full.h == 1.0);
    CHECK_THROWS_AS(to_yolo_label({90, 0, 20, 10}, 100, 100), InvalidInput);
    CHECK_THROWS_AS(to_yolo_label({0, 0, 0, 10}, 100, 100), InvalidInput);
    CHECK(format_yolo_line(l) == "0 0.250000 0.400000 0.300000 0.400000");
}

TEST_CASE("yolo labels round-trip within half a pixel") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        std::size_t W = 1 + rng() % 2000, H = 1 + rng() % 2000;
        std::size_t x0 = rng() % W, y0 = rng() % H;
        std::size_t w = 1 + rng() % (W - x0), h = 1 + rng() % (H - y0);
        auto l = to_yolo_label({x0, y0, w, h}, W, H);
        CHECK(l.cx - l.w / 2 >= -1e-12);
        CHECK(l.cx + l.w / 2 <= 1 + 1e-12);
        // Through the 6-decimal text form as well.
        for (const auto& label : {l, DetectionLabel{0, std::round(l.cx * 1e6) / 1e6, std::round(l.cy * 1e6) / 1e6,
                                                    std::round(l.w * 1e6) / 1e6, std::round(l.h * 1e6) / 1e6}}) {
            double rx0 = (label.cx - label.w / 2) * W, ry0 = (label.cy - label.h / 2) * H;
            CHECK(std::abs(rx0 - double(x0)) <= 0.5);
            CHECK(std::abs(ry0 - double(y0)) <= 0.5);
            CHECK(std::abs(label.w * W - double(w)) <= 0.5);
            CHECK(std::abs(label.h * H - double(h)) <= 0.5);
        }
        CHECK(from_yolo_label(l, W, H) == PixelRect{x0, y0, w, h});
    }
}

TEST_CASE("manifest round trip is identity") {
    Manifest m;
    m.records.push_back(sample("a", true, Source::real));
    m.records.push_back(sample("b\"q", false, Source::background));
    m.records.back().split = Split::test;
    m.records.back().caption = "unicode é caption";
    auto text = serialize_manifest(m);
    auto back = parse_manifest(text);
    CHECK(back.records == m.records);
    CHECK(serialize_manifest(back) == text);
    CHECK(text.find("\"mask_path\"") != std::string::npos);
    CHECK_THROWS_AS(parse_jsonl_line("{not json"), InvalidInput);
    CHECK_THROWS_AS(parse_jsonl_line(R"({"id":"x","image_path":"i","caption":"c","source":"alien","split":"train"})"),
                    InvalidInput);
}

TEST_CASE("manifest file round trip and append") {
    TempDir d("manifest");
    Manifest m;
    m.records.push_back(sample("a", true, Source::real));
    write_manifest(m, d / "m.jsonl");
    append_record(sample("b", false, Source::real), d / "m.jsonl");
    auto back = read_manifest(d / "m.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back.records[1].id == "b");
    CHECK(back.base_dir == d.path());
    CHECK(back.resolve("x.png") == d / "x.png");
}

TEST_CASE("validate_manifest examples") {
    TempDir d("validate");
    save_rgb(RgbImage(4, 4, 9), d / "a.png");
    save_mask(BinaryMask(4, 4, 1), d / "a_mask.png");
    save_rgb(RgbImage(4, 4, 9), d / "b.png");
    Manifest m;
    m.base_dir = d.path();
    m.records.push_back(sample("a", true, Source::real));
    m.records.push_back(sample("b", false, Source::real));
    CHECK(validate_manifest(m).empty());

    auto dup = m;
    dup.records.push_back(dup.records[0]);
    auto v = validate_manifest(dup);
    REQUIRE(v.size() == 1);
    CHECK(v[0].code == "duplicate-id");
    CHECK(v[0].subject == "a");

    auto dangling = m;
    dangling.records[1].mask_path = "nowhere.png";
    v = validate_manifest(dangling);
    REQUIRE(v.size() == 1);
    CHECK(v[0].code == "missing-mask");
    CHECK(v[0].subject == "nowhere.png");

    save_mask(BinaryMask(5, 4, 1), d / "a_mask.png");
    v = validate_manifest(m);
    REQUIRE(v.size() == 1);
    CHECK(v[0].code == "dim-mismatch");
}

TEST_CASE("mix_datasets honors both ratios") {
    Manifest real, synth;
    for (int i = 0; i < 100; ++i) real.records.push_back(sample("r" + std::to_string(i), i < 50, Source::real));
    for (int i = 0; i < 100; ++i) synth.records.push_back(sample("s" + std::to_string(i), i < 50, Source::synthetic));
    auto m = mix_datasets(real, synth, {1, 1}, {1, 1}, 7);
    std::size_t r = 0, pos = 0;
    for (const auto& s : m.records) r += s.source == Source::real, pos += s.positive();
    CHECK(m.size() == 200);
    CHECK(r == 100);
    CHECK(pos == 100);

    SUBCASE("same seed gives the same bytes") {
        CHECK(serialize_manifest(mix_datasets(real, synth, {1, 1}, {1, 1}, 7)) == serialize_manifest(m));
        CHECK(serialize_manifest(mix_datasets(real, synth, {1, 1}, {1, 1}, 8)) != serialize_manifest(m));
    }
    SUBCASE("1:0 keeps only real records") {
        auto only = mix_datasets(real, synth, {1, 0}, {1, 1}, 3);
        CHECK(only.size() == 100);
        for (const auto& s : only.records) CHECK(s.source == Source::real);
    }
    SUBCASE("real negatives with synthetic positives") {
        Manifest neg;
        for (int i = 0; i < 100; ++i) neg.records.push_back(sample("n" + std::to_string(i), false, Source::real));
        Manifest pos_only;
        for (int i = 0; i < 100; ++i)
            pos_only.records.push_back(sample("p" + std::to_string(i), true, Source::synthetic));
        auto mixed = mix_datasets(neg, pos_only, {1, 1}, {1, 1}, 1);
        CHECK(mixed.size() == 200);
    }
    SUBCASE("uneven ratios stay within one record") {
        auto u = mix_datasets(real, synth, {2, 1}, {1, 1}, 5);
        std::size_t ur = 0, up = 0;
        for (const auto& s : u.records) ur += s.source == Source::real, up += s.positive();
        const double n = double(u.size());
        CHECK(std::abs(double(ur) - n * 2 / 3) <= 1.0);
        CHECK(std::abs(double(up) - n / 2) <= 1.0);
    }
    SUBCASE("capacity error names the category") {
        Manifest no_neg;
        for (int i = 0; i < 10; ++i) no_neg.records.push_back(sample("x" + std::to_string(i), true, Source::real));
        try {
            mix_datasets(no_neg, Manifest{}, {1, 1}, {1, 1}, 0, 20);
            FAIL("expected a capacity error");
        } catch (const CapacityError& e) {
            CHECK_FALSE(e.category().empty());
        }
    }
}

TEST_CASE("export over the fixture matches the golden labels") {
    const std::filesystem::path fx = std::filesystem::path(SMOKEGEN_FIXTURES) / "export10";
    auto m = read_manifest(fx / "manifest.jsonl");
    REQUIRE(m.size() == 10);
    TempDir d("export");
    auto s = export_yolo(m, d.path());
    CHECK(s.images == 10);
    CHECK(s.positives == 8);
    CHECK(s.negatives == 2);
    for (const auto& r : m.records) {
        INFO(r.id);
        CHECK(read_text(d / ("labels/" + r.id + ".txt")) == read_text(fx / "golden" / (r.id + ".txt")));
        CHECK(std::filesystem::exists(d / ("images/" + r.id + ".jpg")));
    }
    CHECK(read_lines(d / "train.txt").size() == 8);
    CHECK(read_lines(d / "val.txt").size() == 2);
    CHECK(read_text(d / "dataset.yaml").find("names: ['smoke']") != std::string::npos);
}
