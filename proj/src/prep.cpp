#include "smokegen/prep.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <mutex>
#include <regex>
#include <set>
#include <thread>

#include <json.hpp>

#include "smokegen/error.hpp"
#include "smokegen/http.hpp"
#include "smokegen/util.hpp"

namespace smokegen::prep {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

bool BBoxPrompt::valid_for(std::size_t width, std::size_t height) const {
    if (w <= 0 || h <= 0 || x0 < 0 || y0 < 0) return false;
    return static_cast<std::size_t>(x0 + w) <= width && static_cast<std::size_t>(y0 + h) <= height;
}

std::vector<DetectionRecord> read_detection_manifest(const std::filesystem::path& path) {
    std::vector<DetectionRecord> out;
    const auto base = path.parent_path();
    std::size_t lineno = 0;
    for (const auto& line : read_lines(path)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            const json j = json::parse(line);
            DetectionRecord r;
            r.id = j.at("id").get<std::string>();
            std::filesystem::path p(j.at("image_path").get<std::string>());
            r.image_path = (p.is_absolute() ? p : base / p).string();
            for (const auto& b : j.at("bboxes")) {
                BBoxPrompt bp;
                bp.image_id = r.id;
                if (b.is_array()) {
                    bp.x0 = b.at(0).get<long>();
                    bp.y0 = b.at(1).get<long>();
                    bp.w = b.at(2).get<long>();
                    bp.h = b.at(3).get<long>();
                } else {
                    bp.x0 = b.at("x0").get<long>();
                    bp.y0 = b.at("y0").get<long>();
                    bp.w = b.at("w").get<long>();
                    bp.h = b.at("h").get<long>();
                }
                r.boxes.push_back(bp);
            }
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::size_t CaptionClient::count_tokens(const std::string& text) const { return split_words(text).size(); }

GrayImage BoxSegmenter::segment(const RgbImage& image, const BBoxPrompt& p) {
    GrayImage g(image.width, image.height, 0);
    for (long y = std::max(0L, p.y0); y < p.y0 + p.h && y < static_cast<long>(image.height); ++y)
        for (long x = std::max(0L, p.x0); x < p.x0 + p.w && x < static_cast<long>(image.width); ++x) g.at(y, x) = 255;
    return g;
}

namespace {

std::string first_tokens(const std::string& text, int n) {
    const auto words = split_words(text);
    std::string out;
    for (int i = 0; i < n && i < static_cast<int>(words.size()); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

std::string FixedCaptioner::caption(const RgbImage&, int max_tokens) {
    return truncate_ ? first_tokens(text_, max_tokens) : text_;
}

HttpSegmentationClient::HttpSegmentationClient(std::string endpoint, int timeout_s)
    : endpoint_(std::move(endpoint)), timeout_s_(timeout_s) {}

GrayImage HttpSegmentationClient::segment(const RgbImage& image, const BBoxPrompt& p) {
    json body{{"image_png", base64_encode(encode_png(image))}, {"bbox", {p.x0, p.y0, p.w, p.h}}};
    const json res = post_json(endpoint_, body, timeout_s_);
    if (!res.contains("mask_png") || !res["mask_png"].is_string())
        throw TransportError(endpoint_ + ": response lacks mask_png");
    GrayImage g;
    try {
        g = decode_gray(base64_decode(res["mask_png"].get<std::string>()));
    } catch (const Error& e) {
        throw TransportError(endpoint_ + ": undecodable mask: " + e.what());
    }
    return g;
}

HttpCaptionClient::HttpCaptionClient(std::string endpoint, int timeout_s)
    : endpoint_(std::move(endpoint)), timeout_s_(timeout_s) {}

std::string HttpCaptionClient::caption(const RgbImage& image, int max_tokens) {
    json body{{"image_png", base64_encode(encode_png(image))}, {"max_tokens", max_tokens}};
    const json res = post_json(endpoint_, body, timeout_s_);
    if (!res.contains("caption") || !res["caption"].is_string())
        throw TransportError(endpoint_ + ": response lacks caption");
    return res["caption"].get<std::string>();
}

SegmentOutcome segment_smoke(const RgbImage& image, const BBoxPrompt& prompt, SegmentationClient& client,
                             int threshold) {
    if (!prompt.valid_for(image.width, image.height))
        throw InvalidInput("bbox outside image " + prompt.image_id);
    const GrayImage raw = client.segment(image, prompt);
    if (raw.width != image.width || raw.height != image.height)
        return {std::nullopt, "segmenter returned " + std::to_string(raw.width) + "x" + std::to_string(raw.height) +
                                  " for a " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                  " image"};
    BinaryMask m = corpus::binarize_mask(raw, threshold);
    if (!m.any()) return {std::nullopt, "empty mask"};
    std::size_t inside = 0;
    for (long y = prompt.y0; y < prompt.y0 + prompt.h; ++y)
        for (long x = prompt.x0; x < prompt.x0 + prompt.w; ++x) inside += m.at(y, x);
    if (inside == 0) return {std::nullopt, "mask does not overlap its box"};
    return {std::move(m), {}};
}

std::string apply_stop_patterns(const std::string& text, const std::vector<std::string>& patterns) {
    std::string s = text;
    for (const auto& p : patterns) {
        try {
            s = std::regex_replace(s, std::regex(p, std::regex::icase | std::regex::ECMAScript), " ");
        } catch (const std::regex_error& e) {
            throw InvalidConfig("bad stop pattern '" + p + "': " + e.what());
        }
    }
    std::string out;
    for (const auto& w : split_words(s)) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

std::optional<std::string> caption_image(const RgbImage& image, CaptionClient& client, int max_tokens,
                                         const std::vector<std::string>& stop_patterns) {
    if (max_tokens < 1) throw InvalidInput("max_tokens must be positive");
    for (int attempt = 0; attempt < 2; ++attempt) {
        std::string text = apply_stop_patterns(client.caption(image, max_tokens), stop_patterns);
        if (client.count_tokens(text) > static_cast<std::size_t>(max_tokens)) text = first_tokens(text, max_tokens);
        if (!trim(text).empty()) return text;
    }
    return std::nullopt;
}

namespace {

struct ImageResult {
    std::vector<corpus::SmokeSample> samples;
    std::vector<BinaryMask> masks;
    std::vector<QuarantineEntry> quarantined;
};

std::string entry_json(const QuarantineEntry& q) {
    ordered_json j;
    j["id"] = q.id;
    j["image_id"] = q.image_id;
    j["kind"] = q.kind;
    j["reason"] = q.reason;
    j["permanent"] = q.permanent;
    j["timestamp"] = utc_now();
    return j.dump();
}

template <typename F>
auto with_retries(int retries, F&& f) -> decltype(f()) {
    for (int attempt = 0;; ++attempt) {
        try {
            return f();
        } catch (const TransportError&) {
            if (attempt >= retries) throw;
        }
    }
}

}  // namespace

PrepSummary build_training_set(const std::vector<DetectionRecord>& records, const SegFactory& seg,
                               const CapFactory& cap, const PrepOptions& opts) {
    if (opts.workers < 1) throw InvalidConfig("prep.workers must be positive");
    if (opts.max_tokens < 1) throw InvalidConfig("prep.max_tokens must be positive");
    if (opts.val_fraction < 0 || opts.val_fraction > 1) throw InvalidConfig("prep.val_fraction must be in [0, 1]");
    for (const auto& p : opts.stop_patterns) apply_stop_patterns("", {p});

    namespace fs = std::filesystem;
    fs::create_directories(opts.out_dir / "masks");
    const auto manifest_path = opts.out_dir / "manifest.jsonl";
    const auto quarantine_path = opts.out_dir / "quarantine.jsonl";

    PrepSummary summary;
    summary.manifest.base_dir = opts.out_dir;
    if (fs::exists(manifest_path)) summary.manifest = corpus::read_manifest(manifest_path);
    std::set<std::string> done;
    for (const auto& r : summary.manifest.records) done.insert(r.id);
    for (const auto& line : read_lines(quarantine_path)) {
        try {
            const json j = json::parse(line);
            if (j.value("permanent", false)) done.insert(j.at("id").get<std::string>());
        } catch (const json::exception&) {
        }
    }

    std::vector<const DetectionRecord*> todo;
    std::size_t limit = opts.limit.value_or(records.size());
    for (const auto& r : records) {
        if (todo.size() >= limit) break;
        bool pending = r.boxes.empty() && !done.count(r.id + "_0");
        for (std::size_t k = 0; k < r.boxes.size(); ++k)
            if (!done.count(r.id + "_" + std::to_string(k))) pending = true;
        if (pending)
            todo.push_back(&r);
        else
            summary.skipped += r.boxes.size();
    }

    auto process = [&](const DetectionRecord& rec, SegmentationClient& sc, CaptionClient& cc) {
        ImageResult out;
        auto quarantine = [&](const std::string& id, std::string kind, std::string reason, bool permanent = true) {
            out.quarantined.push_back({id, rec.id, std::move(kind), std::move(reason), permanent});
        };
        if (rec.boxes.empty()) {
            quarantine(rec.id + "_0", "no-box", "record has no bbox annotation");
            return out;
        }
        RgbImage img;
        try {
            img = load_rgb(rec.image_path);
        } catch (const Error& e) {
            for (std::size_t k = 0; k < rec.boxes.size(); ++k)
                quarantine(rec.id + "_" + std::to_string(k), "unreadable", e.what());
            return out;
        }
        std::optional<std::string> caption;
        std::string caption_error;
        bool caption_done = false;
        for (std::size_t k = 0; k < rec.boxes.size(); ++k) {
            const std::string id = rec.id + "_" + std::to_string(k);
            if (done.count(id)) continue;
            const auto& box = rec.boxes[k];
            if (!box.valid_for(img.width, img.height)) {
                quarantine(id, "bad-box", "bbox outside image bounds or empty");
                continue;
            }
            SegmentOutcome so;
            try {
                so = with_retries(opts.transport_retries, [&] { return segment_smoke(img, box, sc, opts.threshold); });
            } catch (const TransportError& e) {
                quarantine(id, "transport", e.what(), false);
                continue;
            }
            if (!so.mask) {
                quarantine(id, so.reason == "empty mask" ? "empty-mask" : "no-overlap", so.reason);
                continue;
            }
            if (!caption_done) {
                caption_done = true;
                try {
                    caption = with_retries(opts.transport_retries, [&] {
                        return caption_image(img, cc, opts.max_tokens, opts.stop_patterns);
                    });
                    if (!caption) caption_error = "empty caption after retry";
                } catch (const TransportError& e) {
                    caption_error = e.what();
                }
            }
            if (!caption) {
                quarantine(id, caption_error == "empty caption after retry" ? "empty-caption" : "transport",
                           caption_error, caption_error == "empty caption after retry");
                continue;
            }
            corpus::SmokeSample s;
            s.id = id;
            s.image_path = fs::absolute(rec.image_path).lexically_normal().string();
            s.mask_path = "masks/" + id + ".png";
            s.caption = *caption;
            s.source = corpus::Source::real;
            const double u = static_cast<double>(fnv1a64(id) % 1000000) / 1e6;
            s.split = u < opts.val_fraction ? corpus::Split::val : corpus::Split::train;
            out.samples.push_back(std::move(s));
            out.masks.push_back(std::move(*so.mask));
        }
        return out;
    };

    // Workers fill slots; the committer writes them strictly in input order
    // so an interruption always leaves a prefix on disk.
    const std::size_t n = todo.size();
    std::vector<std::optional<ImageResult>> slots(n);
    std::mutex mu;
    std::condition_variable cv;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;

    auto worker = [&] {
        try {
            auto sc = seg();
            auto cc = cap();
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                ImageResult r = process(*todo[i], *sc, *cc);
                std::lock_guard lock(mu);
                slots[i] = std::move(r);
                cv.notify_all();
            }
        } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
            next = n;
            cv.notify_all();
        }
    };

    std::vector<std::thread> threads;
    const int nw = static_cast<int>(std::min<std::size_t>(opts.workers, std::max<std::size_t>(n, 1)));
    for (int w = 0; w < nw; ++w) threads.emplace_back(worker);

    for (std::size_t i = 0; i < n; ++i) {
        ImageResult r;
        {
            std::unique_lock lock(mu);
            cv.wait(lock, [&] { return slots[i].has_value() || failure; });
            if (!slots[i]) break;
            r = std::move(*slots[i]);
            slots[i].reset();
        }
        for (std::size_t k = 0; k < r.samples.size(); ++k) {
            corpus::save_mask(r.masks[k], opts.out_dir / *r.samples[k].mask_path);
            corpus::append_record(r.samples[k], manifest_path);
            summary.manifest.records.push_back(r.samples[k]);
            ++summary.added;
        }
        for (const auto& q : r.quarantined) {
            append_line_durable(quarantine_path, entry_json(q));
            log_warn("quarantined " + q.id + " (" + q.kind + "): " + q.reason);
            summary.quarantined.push_back(q);
        }
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
    return summary;
}

}  // namespace smokegen::prep
