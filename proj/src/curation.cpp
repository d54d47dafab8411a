#include "smokegen/curation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "smokegen/error.hpp"
#include "smokegen/http.hpp"
#include "smokegen/mrd.hpp"
#include "smokegen/util.hpp"

namespace smokegen::curation {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(ScorerKind k) {
    switch (k) {
        case ScorerKind::human: return "human";
        case ScorerKind::mllm: return "mllm";
        case ScorerKind::mock: return "mock";
    }
    return "mock";
}

ScorerKind parse_scorer(const std::string& s) {
    if (s == "human") return ScorerKind::human;
    if (s == "mllm") return ScorerKind::mllm;
    if (s == "mock") return ScorerKind::mock;
    throw InvalidInput("unknown scorer kind '" + s + "'");
}

namespace {

void check_range(double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0 || v > 10.0)
        throw InvalidInput(std::string(name) + " score " + std::to_string(v) + " outside [0, 10]");
}

}  // namespace

double weighted_score(double color, double visibility, double translucency) {
    check_range(color, "color");
    check_range(visibility, "visibility");
    check_range(translucency, "translucency");
    return kColorWeight * color + kVisibilityWeight * visibility + kTranslucencyWeight * translucency;
}

ScoreRecord ScoreRecord::make(std::string id, double c, double v, double t, ScorerKind k) {
    ScoreRecord r;
    r.sample_id = std::move(id);
    r.color = c;
    r.visibility = v;
    r.translucency = t;
    r.weighted = weighted_score(c, v, t);
    r.scorer = k;
    return r;
}

std::string ScoreRecord::to_json_line() const {
    ordered_json j{{"sample_id", sample_id}, {"color", color},       {"visibility", visibility},
                   {"translucency", translucency}, {"weighted", weighted}, {"scorer", to_string(scorer)}};
    if (clamped) j["clamped"] = true;
    if (quarantined) j["quarantined"] = true;
    return j.dump();
}

ScoreRecord ScoreRecord::from_json_line(const std::string& line) {
    try {
        const auto j = json::parse(line);
        auto r = make(j.at("sample_id").get<std::string>(), j.at("color").get<double>(), j.at("visibility").get<double>(),
                      j.at("translucency").get<double>(), parse_scorer(j.at("scorer").get<std::string>()));
        r.clamped = j.value("clamped", false);
        r.quarantined = j.value("quarantined", false);
        return r;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("score record: ") + e.what());
    }
}

void write_scores(const std::vector<ScoreRecord>& records, const std::filesystem::path& path) {
    std::string text;
    for (const auto& r : records) text += r.to_json_line() + "\n";
    write_text_atomic(path, text);
}

std::vector<ScoreRecord> read_scores(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw InvalidInput("scores file " + path.string() + " does not exist");
    std::vector<ScoreRecord> out;
    for (const auto& line : read_lines(path)) out.push_back(ScoreRecord::from_json_line(line));
    return out;
}

// ---- mock scorer -------------------------------------------------------

namespace {

double gray(const RgbImage& img, std::size_t y, std::size_t x) {
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

struct Stats {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    void add(double v) { sum += v, sq += v * v, ++n; }
    double mean() const { return n ? sum / n : 0.0; }
    double var() const { return n ? std::max(0.0, sq / n - mean() * mean()) : 0.0; }
};

}  // namespace

ScoreTriple MockScorer::score(const ScoreInput& in) {
    if (!in.mask || !in.mask->any()) return {};
    const BinaryMask& m = *in.mask;
    if (m.width() != in.image.width || m.height() != in.image.height)
        throw InvalidInput("mock scorer: mask does not match image");
    const BinaryMask outer = mrd::morph(m, mrd::MorphOp::dilate, 5);
    const BinaryMask inner = mrd::morph(m, mrd::MorphOp::erode, 5);
    Stats inside, outside, band, interior;
    for (std::size_t y = 0; y < m.height(); ++y)
        for (std::size_t x = 0; x < m.width(); ++x) {
            const double g = gray(in.image, y, x);
            (m.at(y, x) ? inside : outside).add(g);
            if (inner.at(y, x)) interior.add(g);
            else if (outer.at(y, x)) band.add(g);
        }
    ScoreTriple s;
    s.color = 10.0 * (1.0 - std::abs(inside.mean() - 200.0) / 200.0);
    s.visibility = 10.0 * std::clamp(std::abs(inside.mean() - outside.mean()) / 255.0, 0.0, 1.0);
    const double denom = band.var() + interior.var();
    s.translucency = denom > 0 ? 10.0 * band.var() / denom : 0.0;
    return s;
}

ScoreTriple HttpScorer::score(const ScoreInput& in) {
    nlohmann::json body{{"image_png", base64_encode(encode_png(in.image))}, {"prompt", in.prompt}};
    if (in.mask) {
        const GrayImage g = in.mask->to_gray();
        RgbImage rgb(g.width, g.height);
        for (std::size_t i = 0; i < g.pixels.size(); ++i)
            for (int c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = g.pixels[i];
        body["mask_png"] = base64_encode(encode_png(rgb));
    }
    const auto res = post_json(endpoint_, body, timeout_s_);
    ScoreTriple t;
    try {
        t.color = res.at("color").get<double>();
        t.visibility = res.at("visibility").get<double>();
        t.translucency = res.at("translucency").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw TransportError(endpoint_ + ": malformed scores: " + e.what());
    }
    return t;
}

std::string default_scoring_prompt() {
    return "Rate the smoke in this image on three criteria, each from 0 to 10: color (how natural the smoke color "
           "is), visibility (how clearly the smoke can be seen), and semi-transparency (how well the background shows "
           "through the plume; fully transparent smoke scores 8-10). Answer as JSON with keys color, visibility, "
           "translucency.";
}

// ---- scoring -----------------------------------------------------------

std::vector<ScoreRecord> score_candidates(const corpus::Manifest& manifest, const ScorerFactory& factory,
                                          const ScoreOptions& opts) {
    if (opts.workers < 1) throw InvalidConfig("score.workers must be positive");
    if (opts.retries < 0) throw InvalidConfig("score.retries must be >= 0");
    const std::size_t n = manifest.size();
    std::vector<std::optional<ScoreRecord>> results(n);

    if (!opts.partial_path.empty()) {
        std::map<std::string, ScoreRecord> done;
        for (const auto& line : read_lines(opts.partial_path)) {
            try {
                auto r = ScoreRecord::from_json_line(line);
                if (r.quarantined) done.erase(r.sample_id);
                else done.insert_or_assign(r.sample_id, r);
            } catch (const InvalidInput&) {
                // A torn final line from a crash; that sample is rescored.
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            auto it = done.find(manifest.records[i].id);
            if (it != done.end()) results[i] = it->second;
        }
    }

    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> abort{false};
    int consecutive_failures = 0;
    std::string outage_message;

    auto worker = [&] {
        auto client = factory();
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || abort.load()) return;
            if (results[i]) continue;
            const auto& rec = manifest.records[i];
            std::optional<ScoreTriple> triple;
            std::string last_error;
            try {
                const RgbImage img = load_rgb(manifest.resolve(rec.image_path));
                std::optional<BinaryMask> mask;
                if (rec.mask_path) mask = corpus::load_mask(manifest.resolve(*rec.mask_path));
                for (int attempt = 0; attempt <= opts.retries && !triple; ++attempt) {
                    try {
                        triple = client->score({img, mask ? &*mask : nullptr, opts.prompt});
                    } catch (const TransportError& e) {
                        last_error = e.what();
                    }
                }
            } catch (const Error& e) {
                last_error = e.what();
            }
            ScoreRecord r;
            if (triple) {
                auto clamp = [&](double v) {
                    const double c = std::isfinite(v) ? std::clamp(v, 0.0, 10.0) : 0.0;
                    if (c != v) r.clamped = true;
                    return c;
                };
                const double c = clamp(triple->color), v = clamp(triple->visibility), t = clamp(triple->translucency);
                const bool clamped = r.clamped;
                r = ScoreRecord::make(rec.id, c, v, t, client->kind());
                r.clamped = clamped;
            } else {
                r = ScoreRecord::make(rec.id, 0, 0, 0, client->kind());
                r.quarantined = true;
            }
            std::lock_guard<std::mutex> lock(mu);
            if (abort.load()) return;
            if (triple) {
                consecutive_failures = 0;
            } else if (++consecutive_failures >= opts.outage_after) {
                outage_message = "scorer outage: " + std::to_string(consecutive_failures) +
                                 " consecutive samples failed; last error: " + last_error;
                abort.store(true);
                return;
            }
            if (!opts.partial_path.empty()) append_line_durable(opts.partial_path, r.to_json_line());
            results[i] = std::move(r);
        }
    };

    const int nw = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(opts.workers), std::max<std::size_t>(n, 1)));
    if (nw == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < nw; ++w) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    if (abort.load()) throw TransportError(outage_message);

    std::vector<ScoreRecord> out;
    out.reserve(n);
    for (auto& r : results) out.push_back(std::move(*r));
    return out;
}

std::vector<ScoreRecord> select_top(std::vector<ScoreRecord> records, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidInput("select fraction must be in (0, 1]");
    if (records.empty()) {
        log_warn("select_top: no score records");
        return {};
    }
    std::sort(records.begin(), records.end(), [](const ScoreRecord& a, const ScoreRecord& b) {
        if (a.weighted != b.weighted) return a.weighted > b.weighted;
        return a.sample_id < b.sample_id;
    });
    // Guard the ceiling against products like 0.3 * 10 = 3.0000000000000004.
    const double exact = fraction * static_cast<double>(records.size());
    const auto keep = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
    records.resize(std::min(keep, records.size()));
    return records;
}

corpus::Manifest select_manifest(const std::vector<ScoreRecord>& records, const corpus::Manifest& manifest,
                                 double fraction) {
    corpus::Manifest out;
    out.base_dir = manifest.base_dir;
    for (const auto& r : select_top(records, fraction)) {
        const auto* s = manifest.find(r.sample_id);
        if (!s) throw InvalidInput("score record '" + r.sample_id + "' has no manifest entry");
        out.records.push_back(*s);
    }
    return out;
}

FinetuneSummary assemble_finetune_set(const std::vector<ScoreRecord>& annotations, const corpus::Manifest& manifest,
                                      const std::filesystem::path& out_path, const std::string& prompt) {
    FinetuneSummary summary;
    std::vector<std::string> order;
    std::map<std::string, ScoreRecord> latest;
    for (const auto& a : annotations) {
        if (!manifest.find(a.sample_id)) {
            summary.dangling.push_back(a.sample_id);
            continue;
        }
        try {
            weighted_score(a.color, a.visibility, a.translucency);
        } catch (const InvalidInput&) {
            summary.invalid.push_back(a.sample_id);
            continue;
        }
        auto [it, fresh] = latest.insert_or_assign(a.sample_id, a);
        if (fresh) order.push_back(a.sample_id);
        else summary.conflicts.push_back(a.sample_id);
    }
    for (const auto& id : summary.dangling) log_warn("annotation for unknown sample '" + id + "' skipped");
    for (const auto& id : summary.invalid) log_warn("annotation for '" + id + "' has out-of-range scores; skipped");
    for (const auto& id : summary.conflicts) log_warn("sample '" + id + "' annotated more than once; last one kept");
    if (order.empty()) log_warn("fine-tune set is empty");

    std::string text;
    for (const auto& id : order) {
        const auto& a = latest.at(id);
        const ordered_json answer{{"color", a.color}, {"visibility", a.visibility}, {"translucency", a.translucency}};
        const ordered_json line{{"image_path", manifest.resolve(manifest.find(id)->image_path).string()},
                                {"prompt", prompt},
                                {"response", answer.dump()}};
        text += line.dump() + "\n";
    }
    write_text_atomic(out_path, text);
    summary.written = order.size();
    return summary;
}

}  // namespace smokegen::curation
