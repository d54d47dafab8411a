#include "smokegen/evalkit.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "smokegen/error.hpp"

namespace smokegen::eval {

namespace {

void same_dims(const RgbImage& a, const RgbImage& b) {
    if (a.width != b.width || a.height != b.height)
        throw InvalidInput("image dimensions differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                           " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
    if (a.empty()) throw InvalidInput("empty image");
}

void region_dims(const RgbImage& a, const BinaryMask& m) {
    if (m.width() != a.width || m.height() != a.height) throw InvalidInput("region mask does not match the images");
}

std::vector<double> luma(const RgbImage& img) {
    std::vector<double> y(img.width * img.height);
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
    return y;
}

double psnr_from_mse(double mse) {
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

/// Mean SSIM over window positions whose centre passes `keep`.
template <typename Keep>
double ssim_mean(const RgbImage& a, const RgbImage& b, const SsimOptions& o, Keep keep) {
    same_dims(a, b);
    const std::size_t W = a.width, H = a.height, n = o.window;
    if (n == 0) throw InvalidInput("ssim window must be positive");
    if (W < n || H < n) throw InvalidInput("image smaller than the ssim window");
    const double c1 = (o.k1 * 255.0) * (o.k1 * 255.0), c2 = (o.k2 * 255.0) * (o.k2 * 255.0);
    const auto ya = luma(a), yb = luma(b);

    std::vector<double> wts(n * n, 1.0 / static_cast<double>(n * n));
    if (o.gaussian) {
        double tot = 0;
        const double c = (static_cast<double>(n) - 1.0) / 2.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
                tot += wts[i * n + j] = std::exp(-d2 / (2 * o.sigma * o.sigma));
            }
        for (auto& w : wts) w /= tot;
    }

    // Integral images make the uniform case linear in the pixel count.
    const std::size_t S = W + 1;
    std::vector<double> ia, ib, iaa, ibb, iab;
    if (!o.gaussian) {
        ia.assign(S * (H + 1), 0), ib = ia, iaa = ia, ibb = ia, iab = ia;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t k = (y + 1) * S + x + 1, up = y * S + x + 1, left = (y + 1) * S + x, diag = y * S + x;
                const double va = ya[y * W + x], vb = yb[y * W + x];
                ia[k] = va + ia[up] + ia[left] - ia[diag];
                ib[k] = vb + ib[up] + ib[left] - ib[diag];
                iaa[k] = va * va + iaa[up] + iaa[left] - iaa[diag];
                ibb[k] = vb * vb + ibb[up] + ibb[left] - ibb[diag];
                iab[k] = va * vb + iab[up] + iab[left] - iab[diag];
            }
    }
    auto box = [&](const std::vector<double>& I, std::size_t y, std::size_t x) {
        return I[(y + n) * S + x + n] - I[y * S + x + n] - I[(y + n) * S + x] + I[y * S + x];
    };

    double total = 0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + n <= H; ++y)
        for (std::size_t x = 0; x + n <= W; ++x) {
            if (!keep(y + n / 2, x + n / 2)) continue;
            double ma, mb, va, vb, cov;
            if (!o.gaussian) {
                const double inv = 1.0 / static_cast<double>(n * n);
                ma = box(ia, y, x) * inv;
                mb = box(ib, y, x) * inv;
                va = box(iaa, y, x) * inv - ma * ma;
                vb = box(ibb, y, x) * inv - mb * mb;
                cov = box(iab, y, x) * inv - ma * mb;
            } else {
                ma = mb = va = vb = cov = 0;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double w = wts[i * n + j];
                        ma += w * ya[(y + i) * W + x + j];
                        mb += w * yb[(y + i) * W + x + j];
                    }
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double w = wts[i * n + j];
                        const double da = ya[(y + i) * W + x + j] - ma, db = yb[(y + i) * W + x + j] - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
            }
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    if (count == 0) throw InvalidInput("no ssim window falls inside the region");
    return total / static_cast<double>(count);
}

}  // namespace

double mse_img(const RgbImage& a, const RgbImage& b) {
    same_dims(a, b);
    double s = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        s += d * d;
    }
    return s / static_cast<double>(a.pixels.size());
}

double psnr(const RgbImage& a, const RgbImage& b) { return psnr_from_mse(mse_img(a, b)); }

double ssim(const RgbImage& a, const RgbImage& b, const SsimOptions& opts) {
    return ssim_mean(a, b, opts, [](std::size_t, std::size_t) { return true; });
}

double mse_img(const RgbImage& a, const RgbImage& b, const BinaryMask& region) {
    same_dims(a, b);
    region_dims(a, region);
    double s = 0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < a.width * a.height; ++p) {
        if (!region.bits()[p]) continue;
        for (std::size_t c = 0; c < 3; ++c) {
            const double d = static_cast<double>(a.pixels[3 * p + c]) - b.pixels[3 * p + c];
            s += d * d;
        }
        n += 3;
    }
    if (n == 0) throw InvalidInput("empty evaluation region");
    return s / static_cast<double>(n);
}

double psnr(const RgbImage& a, const RgbImage& b, const BinaryMask& region) {
    return psnr_from_mse(mse_img(a, b, region));
}

double ssim(const RgbImage& a, const RgbImage& b, const BinaryMask& region, const SsimOptions& opts) {
    region_dims(a, region);
    return ssim_mean(a, b, opts, [&](std::size_t y, std::size_t x) { return region.at(y, x) != 0; });
}

std::optional<double> lpips(const RgbImage& a, const RgbImage& b, LpipsClient* client) {
    if (!client) return std::nullopt;
    try {
        const double v = client->distance(a, b);
        if (!std::isfinite(v) || v < 0) return std::nullopt;
        return v;
    } catch (const Error&) {
        return std::nullopt;
    }
}

std::optional<double> clip_sim(const RgbImage& image, const std::string& text, ClipClient* client) {
    if (!client) return std::nullopt;
    try {
        const double v = client->similarity(image, text);
        if (!std::isfinite(v)) return std::nullopt;
        return v;
    } catch (const Error&) {
        return std::nullopt;
    }
}

namespace {

nlohmann::ordered_json num(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

nlohmann::ordered_json opt(const std::optional<double>& v) { return v ? num(*v) : nlohmann::ordered_json(nullptr); }

std::string csv_num(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

nlohmann::ordered_json EvalReport::to_json() const {
    nlohmann::ordered_json rows_j = nlohmann::ordered_json::array();
    for (const auto& r : rows)
        rows_j.push_back({{"id", r.id}, {"psnr", num(r.psnr)}, {"ssim", num(r.ssim)}, {"mse", num(r.mse)},
                          {"lpips", opt(r.lpips)}, {"clipsim", opt(r.clipsim)}});
    nlohmann::ordered_json agg{{"psnr", opt(aggregate.psnr)},       {"ssim", opt(aggregate.ssim)},
                               {"mse", opt(aggregate.mse)},         {"lpips", opt(aggregate.lpips)},
                               {"clipsim", opt(aggregate.clipsim)}, {"rows", rows.size()},
                               {"psnr_rows", aggregate.psnr_rows},  {"lpips_rows", aggregate.lpips_rows},
                               {"clipsim_rows", aggregate.clipsim_rows}};
    return {{"config", config}, {"rows", rows_j}, {"aggregate", agg}, {"excluded", excluded}, {"notes", notes}};
}

std::string EvalReport::to_csv() const {
    std::string out = "id,psnr,ssim,mse,lpips,clipsim\n";
    for (const auto& r : rows) {
        out += r.id + "," + csv_num(r.psnr) + "," + csv_num(r.ssim) + "," + csv_num(r.mse) + "," +
               (r.lpips ? csv_num(*r.lpips) : "") + "," + (r.clipsim ? csv_num(*r.clipsim) : "") + "\n";
    }
    return out;
}

EvalReport evaluate_pairs(const corpus::Manifest& generated, const corpus::Manifest& reference, const EvalOptions& opts) {
    EvalReport rep;
    rep.config = {{"ssim_window", opts.ssim.window},     {"ssim_k1", opts.ssim.k1},
                  {"ssim_k2", opts.ssim.k2},             {"ssim_gaussian", opts.ssim.gaussian},
                  {"region", opts.masked_region ? "masked" : "full"},
                  {"lpips_client", opts.lpips != nullptr}, {"clip_client", opts.clip != nullptr}};
    std::map<std::string, const corpus::SmokeSample*> gen_ids;
    for (const auto& g : generated.records) gen_ids.emplace(g.id, &g);
    for (const auto& r : reference.records)
        if (!gen_ids.count(r.id)) rep.excluded.push_back(r.id + ": no generated counterpart");

    double s_psnr = 0, s_ssim = 0, s_mse = 0, s_lp = 0, s_cl = 0;
    for (const auto& g : generated.records) {
        const auto* ref = reference.find(g.id);
        if (!ref) {
            rep.excluded.push_back(g.id + ": no reference counterpart");
            continue;
        }
        try {
            const RgbImage a = load_rgb(generated.resolve(g.image_path));
            const RgbImage b = load_rgb(reference.resolve(ref->image_path));
            EvalRow row;
            row.id = g.id;
            if (opts.masked_region) {
                const auto& mp = g.mask_path ? g.mask_path : ref->mask_path;
                if (!mp) throw InvalidInput("masked-region evaluation needs a mask");
                const BinaryMask m = corpus::load_mask(g.mask_path ? generated.resolve(*mp) : reference.resolve(*mp));
                row.mse = mse_img(a, b, m);
                row.psnr = psnr(a, b, m);
                row.ssim = ssim(a, b, m, opts.ssim);
            } else {
                row.mse = mse_img(a, b);
                row.psnr = psnr(a, b);
                row.ssim = ssim(a, b, opts.ssim);
            }
            row.lpips = lpips(a, b, opts.lpips);
            row.clipsim = clip_sim(a, g.caption, opts.clip);
            rep.rows.push_back(std::move(row));
        } catch (const Error& e) {
            rep.excluded.push_back(g.id + ": " + e.what());
        }
    }
    auto& ag = rep.aggregate;
    std::size_t finite = 0;
    for (const auto& r : rep.rows) {
        if (std::isfinite(r.psnr)) s_psnr += r.psnr, ++ag.psnr_rows;
        if (std::isfinite(r.ssim) && std::isfinite(r.mse)) s_ssim += r.ssim, s_mse += r.mse, ++finite;
        if (r.lpips) s_lp += *r.lpips, ++ag.lpips_rows;
        if (r.clipsim) s_cl += *r.clipsim, ++ag.clipsim_rows;
    }
    if (ag.psnr_rows) ag.psnr = s_psnr / static_cast<double>(ag.psnr_rows);
    if (finite) ag.ssim = s_ssim / static_cast<double>(finite), ag.mse = s_mse / static_cast<double>(finite);
    if (ag.lpips_rows) ag.lpips = s_lp / static_cast<double>(ag.lpips_rows);
    if (ag.clipsim_rows) ag.clipsim = s_cl / static_cast<double>(ag.clipsim_rows);
    if (!rep.rows.empty() && ag.psnr_rows < rep.rows.size())
        rep.notes.push_back("psnr: " + std::to_string(rep.rows.size() - ag.psnr_rows) +
                            " identical pair(s) reported as inf and left out of the mean");
    if (opts.lpips) rep.notes.push_back("lpips coverage " + std::to_string(ag.lpips_rows) + "/" + std::to_string(rep.rows.size()));
    else rep.notes.push_back("lpips absent: no client");
    if (opts.clip) rep.notes.push_back("clipsim coverage " + std::to_string(ag.clipsim_rows) + "/" + std::to_string(rep.rows.size()));
    else rep.notes.push_back("clipsim absent: no client");
    return rep;
}

}  // namespace smokegen::eval
