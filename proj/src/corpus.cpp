#include "smokegen/corpus.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <deque>
#include <set>
#include <sstream>

#include <json.hpp>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::corpus {

using ordered_json = nlohmann::ordered_json;

std::string to_string(Source s) {
    switch (s) {
        case Source::real: return "real";
        case Source::synthetic: return "synthetic";
        case Source::background: return "background";
    }
    return "real";
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Source parse_source(const std::string& s) {
    if (s == "real") return Source::real;
    if (s == "synthetic") return Source::synthetic;
    if (s == "background") return Source::background;
    throw InvalidInput("unknown source '" + s + "'");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw InvalidInput("unknown split '" + s + "'");
}

std::filesystem::path Manifest::resolve(const std::string& path) const {
    std::filesystem::path p(path);
    if (p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
}

const SmokeSample* Manifest::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

std::string to_jsonl_line(const SmokeSample& s) {
    ordered_json j;
    j["id"] = s.id;
    j["image_path"] = s.image_path;
    if (s.mask_path) j["mask_path"] = *s.mask_path;
    j["caption"] = s.caption;
    j["source"] = to_string(s.source);
    j["split"] = to_string(s.split);
    return j.dump();
}

SmokeSample parse_jsonl_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed manifest line: ") + e.what());
    }
    static const std::set<std::string> allowed{"id", "image_path", "mask_path", "caption", "source", "split"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) throw InvalidInput("unexpected manifest field '" + it.key() + "'");
    try {
        SmokeSample s;
        s.id = j.at("id").get<std::string>();
        s.image_path = j.at("image_path").get<std::string>();
        if (j.contains("mask_path") && !j["mask_path"].is_null()) s.mask_path = j["mask_path"].get<std::string>();
        s.caption = j.at("caption").get<std::string>();
        s.source = parse_source(j.at("source").get<std::string>());
        s.split = parse_split(j.at("split").get<std::string>());
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("manifest record: ") + e.what());
    }
}

std::string serialize_manifest(const Manifest& m) {
    std::string out;
    for (const auto& r : m.records) {
        out += to_jsonl_line(r);
        out.push_back('\n');
    }
    return out;
}

Manifest parse_manifest(const std::string& text, std::filesystem::path base_dir) {
    Manifest m;
    m.base_dir = std::move(base_dir);
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
        if (!trim(line).empty()) m.records.push_back(parse_jsonl_line(line));
    return m;
}

Manifest read_manifest(const std::filesystem::path& path) {
    return parse_manifest(read_text(path), path.parent_path());
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    write_text_atomic(path, serialize_manifest(m));
}

void append_record(const SmokeSample& s, const std::filesystem::path& path) {
    append_line_durable(path, to_jsonl_line(s));
}

// ---- masks and boxes --------------------------------------------------

BinaryMask binarize_mask(const GrayImage& raster, int threshold) {
    if (raster.empty() || raster.width == 0 || raster.height == 0) throw InvalidInput("binarize_mask: empty raster");
    if (threshold < 0 || threshold > 255) throw InvalidInput("binarize_mask: threshold outside 0..255");
    BinaryMask m(raster.width, raster.height);
    for (std::size_t y = 0; y < raster.height; ++y)
        for (std::size_t x = 0; x < raster.width; ++x) m.set(y, x, raster.at(y, x) >= threshold);
    return m;
}

BinaryMask load_mask(const std::filesystem::path& path, int threshold) {
    return binarize_mask(load_gray(path), threshold);
}

void save_mask(const BinaryMask& mask, const std::filesystem::path& path) { save_gray(mask.to_gray(), path); }

PixelRect largest_component_bbox(const BinaryMask& mask, Connectivity connectivity) {
    const std::size_t w = mask.width(), h = mask.height();
    std::vector<std::uint8_t> seen(w * h, 0);
    std::size_t best_count = 0;
    PixelRect best;
    std::deque<std::size_t> queue;
    const bool diag = connectivity == Connectivity::eight;
    for (std::size_t start = 0; start < w * h; ++start) {
        if (!mask.bits()[start] || seen[start]) continue;
        std::size_t count = 0, minx = w, miny = h, maxx = 0, maxy = 0;
        seen[start] = 1;
        queue.push_back(start);
        while (!queue.empty()) {
            const std::size_t p = queue.front();
            queue.pop_front();
            ++count;
            const std::size_t py = p / w, px = p % w;
            minx = std::min(minx, px);
            maxx = std::max(maxx, px);
            miny = std::min(miny, py);
            maxy = std::max(maxy, py);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if ((dx == 0 && dy == 0) || (!diag && dx != 0 && dy != 0)) continue;
                    const auto ny = static_cast<std::ptrdiff_t>(py) + dy;
                    const auto nx = static_cast<std::ptrdiff_t>(px) + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) || nx >= static_cast<std::ptrdiff_t>(w)) continue;
                    const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
                    if (mask.bits()[q] && !seen[q]) {
                        seen[q] = 1;
                        queue.push_back(q);
                    }
                }
        }
        // strict '>' keeps the earliest component on ties
        if (count > best_count) {
            best_count = count;
            best = {minx, miny, maxx - minx + 1, maxy - miny + 1};
        }
    }
    if (best_count == 0) throw NoForeground("largest_component_bbox: mask has no foreground");
    return best;
}

DetectionLabel to_yolo_label(const PixelRect& box, std::size_t image_w, std::size_t image_h, int class_id) {
    if (image_w == 0 || image_h == 0) throw InvalidInput("to_yolo_label: image dimensions must be positive");
    if (box.w == 0 || box.h == 0) throw InvalidInput("to_yolo_label: empty box");
    if (box.x0 + box.w > image_w || box.y0 + box.h > image_h)
        throw InvalidInput("to_yolo_label: box exceeds image bounds");
    const double W = static_cast<double>(image_w), H = static_cast<double>(image_h);
    return {class_id,
            (static_cast<double>(box.x0) + static_cast<double>(box.w) / 2.0) / W,
            (static_cast<double>(box.y0) + static_cast<double>(box.h) / 2.0) / H,
            static_cast<double>(box.w) / W,
            static_cast<double>(box.h) / H};
}

PixelRect from_yolo_label(const DetectionLabel& l, std::size_t image_w, std::size_t image_h) {
    const double W = static_cast<double>(image_w), H = static_cast<double>(image_h);
    const double w = l.w * W, h = l.h * H;
    const double x0 = l.cx * W - w / 2.0, y0 = l.cy * H - h / 2.0;
    auto r = [](double v) { return static_cast<std::size_t>(std::llround(std::max(0.0, v))); };
    return {r(x0), r(y0), r(w), r(h)};
}

std::string format_yolo_line(const DetectionLabel& l) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f", l.class_id, l.cx, l.cy, l.w, l.h);
    return buf;
}

// ---- dataset assembly -------------------------------------------------

Ratio parse_ratio(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw InvalidInput("ratio must look like 'a:b', got '" + text + "'");
    try {
        const long a = std::stol(text.substr(0, colon));
        const long b = std::stol(text.substr(colon + 1));
        if (a < 0 || b < 0 || a + b == 0) throw InvalidInput("ratio terms must be non-negative and not both zero");
        return {static_cast<unsigned>(a), static_cast<unsigned>(b)};
    } catch (const std::logic_error&) {
        throw InvalidInput("ratio must look like 'a:b', got '" + text + "'");
    }
}

namespace {

struct Pools {
    std::vector<SmokeSample> pos, neg;
};

Pools split_pools(const Manifest& m) {
    Pools p;
    for (const auto& r : m.records) (r.positive() ? p.pos : p.neg).push_back(r);
    return p;
}

struct MixCounts {
    std::size_t rp = 0, rn = 0, sp = 0, sn = 0;
};

// Counts for a total of n, or nullopt when availability rules it out.
std::optional<MixCounts> solve_counts(std::size_t n, Ratio rs, Ratio pn, std::size_t RP, std::size_t RN, std::size_t SP,
                                      std::size_t SN) {
    const double real_exact = static_cast<double>(n) * rs.first / (rs.first + rs.second);
    const double pos_exact = static_cast<double>(n) * pn.first / (pn.first + pn.second);
    auto candidates = [n](double exact, unsigned share_a, unsigned share_b) {
        std::vector<std::size_t> c{static_cast<std::size_t>(std::llround(exact))};
        if (share_a == 0 || share_b == 0) return c;  // degenerate ratios are exact
        const auto lo = static_cast<std::size_t>(std::floor(exact));
        const auto hi = std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(exact)));
        for (auto v : {lo, hi})
            if (v != c[0]) c.push_back(v);
        return c;
    };
    for (std::size_t R : candidates(real_exact, rs.first, rs.second)) {
        for (std::size_t P : candidates(pos_exact, pn.first, pn.second)) {
            const auto S = static_cast<std::ptrdiff_t>(n - R);
            const auto Q = static_cast<std::ptrdiff_t>(n - P);
            if (S < 0 || Q < 0) continue;
            // rp determines the rest: rn = R - rp, sp = P - rp, sn = S - sp.
            std::ptrdiff_t lo = 0, hi = static_cast<std::ptrdiff_t>(std::min({RP, R, P}));
            lo = std::max<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(R) - static_cast<std::ptrdiff_t>(RN));
            lo = std::max<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(P) - static_cast<std::ptrdiff_t>(SP));
            lo = std::max<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(P) - S);
            hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(SN) - S + static_cast<std::ptrdiff_t>(P));
            if (lo > hi) continue;
            MixCounts c;
            c.rp = static_cast<std::size_t>(lo);
            c.rn = R - c.rp;
            c.sp = P - c.rp;
            c.sn = static_cast<std::size_t>(S) - c.sp;
            return c;
        }
    }
    return std::nullopt;
}

std::string deficient_category(std::size_t n, Ratio rs, Ratio pn, std::size_t RP, std::size_t RN, std::size_t SP,
                               std::size_t SN) {
    const double R = static_cast<double>(n) * rs.first / (rs.first + rs.second);
    const double P = static_cast<double>(n) * pn.first / (pn.first + pn.second);
    if (std::floor(R) > static_cast<double>(RP + RN)) return "real";
    if (std::floor(static_cast<double>(n) - R) > static_cast<double>(SP + SN)) return "synthetic";
    if (std::floor(P) > static_cast<double>(RP + SP)) return "positive";
    if (std::floor(static_cast<double>(n) - P) > static_cast<double>(RN + SN)) return "negative";
    if (rs.first > 0 && RP + RN == 0) return "real";
    if (rs.second > 0 && SP + SN == 0) return "synthetic";
    if (pn.first > 0 && RP + SP == 0) return "positive";
    if (pn.second > 0 && RN + SN == 0) return "negative";
    return "positive/negative composition";
}

}  // namespace

Manifest mix_datasets(const Manifest& real, const Manifest& synthetic, Ratio real_synth, Ratio pos_neg,
                      std::uint64_t seed, std::optional<std::size_t> target_total) {
    if (real_synth.first + real_synth.second == 0 || pos_neg.first + pos_neg.second == 0)
        throw InvalidInput("mix_datasets: ratio terms cannot both be zero");
    Pools r = split_pools(real), s = split_pools(synthetic);
    const std::size_t RP = r.pos.size(), RN = r.neg.size(), SP = s.pos.size(), SN = s.neg.size();

    std::optional<MixCounts> counts;
    std::size_t n = 0;
    if (target_total) {
        n = *target_total;
        counts = solve_counts(n, real_synth, pos_neg, RP, RN, SP, SN);
    } else {
        for (n = RP + RN + SP + SN; n > 0 && !counts; --n) counts = solve_counts(n, real_synth, pos_neg, RP, RN, SP, SN);
        ++n;
    }
    if (!counts || n == 0) {
        const std::string cat = deficient_category(std::max<std::size_t>(n, 1), real_synth, pos_neg, RP, RN, SP, SN);
        throw CapacityError(cat, "mix_datasets: not enough " + cat + " records for the requested ratios");
    }

    Rng rng(seed);
    std::vector<SmokeSample> out;
    auto take = [&](std::vector<SmokeSample>& pool, std::size_t k) {
        shuffle_in_place(pool, rng);
        out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    };
    take(r.pos, counts->rp);
    take(r.neg, counts->rn);
    take(s.pos, counts->sp);
    take(s.neg, counts->sn);
    shuffle_in_place(out, rng);

    Manifest m;
    m.records = std::move(out);
    m.base_dir = real.base_dir.empty() ? synthetic.base_dir : real.base_dir;
    return m;
}

std::vector<Violation> validate_manifest(const Manifest& m, bool check_files) {
    std::vector<Violation> out;
    std::set<std::string> ids;
    for (const auto& r : m.records) {
        if (r.id.empty()) out.push_back({"empty-id", r.image_path, "record has an empty id"});
        if (!ids.insert(r.id).second) out.push_back({"duplicate-id", r.id, "duplicate id '" + r.id + "'"});
        if (trim(r.caption).empty()) out.push_back({"empty-caption", r.id, "caption is empty for '" + r.id + "'"});
        if (r.source == Source::synthetic && !r.mask_path)
            out.push_back({"missing-mask-field", r.id, "synthetic record '" + r.id + "' has no mask"});
        if (!check_files) continue;
        const auto img = m.resolve(r.image_path);
        const bool has_img = std::filesystem::exists(img);
        if (!has_img) out.push_back({"missing-image", r.image_path, "image file not found: " + r.image_path});
        if (r.mask_path) {
            const auto mp = m.resolve(*r.mask_path);
            if (!std::filesystem::exists(mp)) {
                out.push_back({"missing-mask", *r.mask_path, "mask file not found: " + *r.mask_path});
            } else if (has_img) {
                try {
                    if (image_dims(img) != image_dims(mp))
                        out.push_back({"dim-mismatch", r.id, "image and mask dimensions differ for '" + r.id + "'"});
                } catch (const Error& e) {
                    out.push_back({"unreadable", r.id, e.what()});
                }
            }
        }
    }
    return out;
}

ExportSummary export_yolo(const Manifest& m, const std::filesystem::path& out_dir, const ExportOptions& opts) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "labels");
    ExportSummary summary;
    std::array<std::string, 3> lists;
    for (const auto& r : m.records) {
        const RgbImage image = load_rgb(m.resolve(r.image_path));
        const std::string image_rel = "images/" + r.id + ".jpg";
        save_rgb(image, out_dir / image_rel);
        std::string label;
        if (r.mask_path) {
            ++summary.positives;
            const BinaryMask mask = load_mask(m.resolve(*r.mask_path), opts.threshold);
            if (mask.width() != image.width || mask.height() != image.height)
                throw InvalidInput("export: mask and image dimensions differ for '" + r.id + "'");
            if (mask.any()) {
                const auto box = largest_component_bbox(mask, opts.connectivity);
                label = format_yolo_line(to_yolo_label(box, image.width, image.height, opts.class_id)) + "\n";
            } else {
                summary.empty_masks.push_back(r.id);
            }
        } else {
            ++summary.negatives;
        }
        write_text_atomic(out_dir / "labels" / (r.id + ".txt"), label);
        lists[static_cast<std::size_t>(r.split)] += image_rel + "\n";
        ++summary.images;
    }
    write_text_atomic(out_dir / "train.txt", lists[0]);
    write_text_atomic(out_dir / "val.txt", lists[1]);
    if (!lists[2].empty()) write_text_atomic(out_dir / "test.txt", lists[2]);
    std::ostringstream yaml;
    yaml << "path: .\n"
         << "train: train.txt\n"
         << "val: val.txt\n";
    if (!lists[2].empty()) yaml << "test: test.txt\n";
    yaml << "nc: 1\n"
         << "names: ['" << opts.class_name << "']\n";
    write_text_atomic(out_dir / "dataset.yaml", yaml.str());
    return summary;
}

}  // namespace smokegen::corpus
