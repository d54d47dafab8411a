// One line per acceptance criterion; exit status 1 when any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "smokegen/corpus.hpp"
#include "smokegen/curation.hpp"
#include "smokegen/diffusion.hpp"
#include "smokegen/evalkit.hpp"
#include "smokegen/generator.hpp"
#include "smokegen/injection.hpp"
#include "smokegen/mrd.hpp"
#include "smokegen/toy_harness.hpp"
#include "smokegen/trainer.hpp"
#include "support.hpp"

using namespace smokegen;
namespace fs = std::filesystem;
using testing::random_tensor;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (ok) return;
        if (pass) detail = what;
        pass = false;
    }
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome noise_round_trip() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const auto sched = diffusion::make_linear_schedule(100);
    Rng rng(101);
    double worst = 0;
    for (int t = 2; t <= 100; ++t)
        for (int rep = 0; rep < 4; ++rep) {
            const Tensor x0 = random_tensor({4, 8, 8}, rng), eps = random_tensor({4, 8, 8}, rng);
            const Tensor back = diffusion::reverse_step(diffusion::add_noise(x0, eps, t, sched), eps, t, sched);
            const Tensor want = diffusion::add_noise(x0, eps, t - 1, sched);
            double num = 0, den = 0;
            for (std::size_t i = 0; i < want.size(); ++i) num += std::pow(back[i] - want[i], 2), den += want[i] * want[i];
            worst = std::max(worst, std::sqrt(num / den));
        }
    const double secs = seconds_since(t0);
    o.require(worst < 1e-6, "relative error " + fmt("%.3g", worst));
    o.require(secs < 10, "took " + fmt("%.1f s", secs));
    o.detail = o.pass ? "max relative error " + fmt("%.2g", worst) + " over t=2..100" : o.detail;
    return o;
}

Outcome adapter_identity() {
    Outcome o;
    diffusion::ToyUNet unet(diffusion::ToyUNetConfig{.max_t = 100});
    injection::ToyExtractor ex;
    static const diffusion::ToyTextEncoder text;
    const injection::AdapterSet set(injection::default_schedule(), unet.tap_points(8, 8), injection::AdapterConfig{});
    const auto adapted = injection::attach_adapters(unet, set);
    Rng rng(102);
    double worst = 0;
    for (int batch = 0; batch < 20; ++batch)
        for (int k = 0; k < 4; ++k) {
            SampleConditioning c;
            c.text_embedding = text.embed(k % 2 ? "smoke over the ridge" : "");
            const auto mask = testing::random_mask(64, 64, 0.2 + 0.03 * batch, rng);
            c.latent_mask = mask.resized_nearest(8, 8);
            c.masked_latent = random_tensor({3, 8, 8}, rng, 0.5);
            c.features = injection::extract_features(mask, injection::apply_mask(testing::random_image(64, 64, rng), mask), ex);
            const auto x = ag::Var::constant(random_tensor({64, 3}, rng));
            const int t = 1 + (batch * 5 + k) % 100;
            ag::NoGradGuard ng;
            worst = std::max(worst, max_abs_diff(adapted.forward(x, t, c).value(), unet.forward(x, t, c).value()));
        }
    o.require(worst <= 1e-6, "max difference " + fmt("%.3g", worst));
    if (o.pass) o.detail = "max difference " + fmt("%.2g", worst) + " on 20 batches of 4";
    return o;
}

Outcome gradient_checks() {
    Outcome o;
    Rng rng(103);
    double worst = 0;
    std::size_t params = 0;
    auto param = [&](Shape s) { return ag::Var::parameter(random_tensor(std::move(s), rng, 0.5)); };
    for (int heads : {1, 2}) {
        auto x = param({2, 4}), fm = param({3, 3}), fM = param({2, 3});
        auto wq = param({4, 4}), km = param({3, 4}), vm = param({3, 4}), kM = param({3, 4}), vM = param({3, 4});
        injection::FuseMlp mlp{param({8, 5}), param({1, 5}), param({5, 4}), param({1, 4})};
        const Tensor target = random_tensor({2, 4}, rng);
        const auto res = testing::check_gradients(
            {{"x", &x}, {"f_mask", &fm}, {"f_masked", &fM}, {"query", &wq}, {"mask.key", &km}, {"mask.value", &vm},
             {"masked.key", &kM}, {"masked.value", &vM}, {"fuse.w0", &mlp.w0}, {"fuse.b0", &mlp.b0},
             {"fuse.w1", &mlp.w1}, {"fuse.b1", &mlp.b1}},
            [&] {
                return ag::mse(injection::joint_cross_attend(x, fm, fM, wq, {km, vm}, {kM, vM}, mlp, heads),
                               ag::Var::constant(target));
            });
        for (const auto& r : res) {
            ++params;
            worst = std::max(worst, r.rel_error);
            o.require(r.numeric_norm > 0, "zero gradient for " + r.name);
            o.require(r.rel_error < 1e-4, r.name + " relative error " + fmt("%.3g", r.rel_error));
        }
    }
    const Tensor eps = random_tensor({3, 4, 4}, rng);
    const auto m = testing::random_mask(4, 4, 0.5, rng);
    for (double omega : {0.0, 0.4, 1.0}) {
        const Tensor eps_tok = grid_to_tokens(eps);
        auto pred = ag::Var::parameter(grid_to_tokens(random_tensor({3, 4, 4}, rng)));
        const auto res =
            testing::check_gradients({{"pred", &pred}}, [&] { return mrd::total_loss(eps_tok, pred, m, omega); });
        ++params;
        worst = std::max(worst, res[0].rel_error);
        o.require(res[0].rel_error < 1e-4, "total_loss relative error " + fmt("%.3g", res[0].rel_error));
    }
    if (o.pass) o.detail = std::to_string(params) + " parameter tensors, worst relative error " + fmt("%.2g", worst);
    return o;
}

Outcome loss_identities() {
    Outcome o;
    Rng rng(104);
    for (int trial = 0; trial < 10; ++trial) {
        const auto eps = random_tensor({4, 8, 8}, rng), pred = random_tensor({4, 8, 8}, rng);
        const auto m = testing::random_mask(8, 8, 0.1 * (trial % 9 + 1), rng);
        const double base = diffusion::base_loss(eps, pred);
        o.require(mrd::total_loss(eps, pred, m, 0.0).total == base, "omega 0 differs from base_loss");
        for (double w : {0.0, 0.4, 1.0})
            o.require(mrd::total_loss(eps, pred, BinaryMask(8, 8, 1), w).total == base,
                      "all-ones mask differs at omega " + fmt("%.1f", w));
        const double l0 = mrd::total_loss(eps, pred, m, 0.0).total, l1 = mrd::total_loss(eps, pred, m, 1.0).total;
        for (double w : {0.1, 0.25, 0.5, 0.75, 0.9})
            o.require(std::abs(mrd::total_loss(eps, pred, m, w).total - ((1 - w) * l0 + w * l1)) < 1e-12,
                      "not linear at omega " + fmt("%.2f", w));
    }
    if (o.pass) o.detail = "10 random cases";
    return o;
}

Outcome morphology() {
    Outcome o;
    Rng rng(105);
    for (int i = 0; i < 100; ++i) {
        const auto m = testing::random_mask(32, 32, i % 2 ? 0.15 : 0.85, rng);
        for (int k : {1, 3, 10, 20})
            for (auto op : {mrd::MorphOp::dilate, mrd::MorphOp::erode})
                o.require(mrd::morph(m, op, k) == testing::brute_morph(m, op, k),
                          "mask " + std::to_string(i) + " k=" + std::to_string(k) + " " + mrd::to_string(op));
    }
    Rng blob_rng(17);
    const auto blob = toy::random_blob_mask(blob_rng, 128);
    int worst = 0, changed = 0;
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        Rng r(seed);
        const auto p = mrd::perturb_mask(blob, mrd::MrdConfig{}, r);
        const int d = testing::max_change_distance(blob, p.bits);
        changed += p.bits != blob;
        worst = std::max(worst, d);
    }
    o.require(worst <= 60, "pixel changed " + std::to_string(worst) + " px from the boundary");
    if (o.pass)
        o.detail = "800 oracle comparisons; perturbation reach " + std::to_string(worst) + " px (" +
                   std::to_string(changed) + "/6 masks changed)";
    return o;
}

Outcome toy_end_to_end() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const int T = 100;
    const auto sched = diffusion::make_linear_schedule(T);
    toy::ToyStack stack(diffusion::ToyUNetConfig{.max_t = T});
    toy::pretrain_backbone(stack, sched, toy::PretrainConfig{});
    auto bb = stack.backbone();

    const auto blobs = toy::make_blob_dataset(64, 9);
    std::vector<train::PreparedSample> data;
    for (std::size_t i = 0; i < blobs.size(); ++i)
        data.push_back(train::prepare_sample("blob" + std::to_string(i), blobs[i].image, blobs[i].mask, blobs[i].caption, bb));
    injection::AdapterSet adapters(injection::default_schedule(), stack.unet.tap_points(8, 8), injection::AdapterConfig{});
    train::TrainConfig tc;
    tc.learning_rate = 3e-3;
    tc.batch_size = 8;
    tc.max_iters = 300;
    tc.seed = 1;
    train::Trainer trainer(bb, adapters, sched, tc);
    std::vector<double> losses;
    for (int i = 0; i < tc.max_iters; ++i) losses.push_back(trainer.train_step(data).loss);
    double first = 0, last = 0;
    for (int i = 0; i < 50; ++i) first += losses[i] / 50, last += losses[losses.size() - 1 - i] / 50;
    o.require(last < first, "loss did not fall: " + fmt("%.4f", first) + " -> " + fmt("%.4f", last));

    const auto adapted = injection::attach_adapters(stack.unet, adapters);
    int bright = 0;
    for (int s = 0; s < 20; ++s) {
        Rng rng(1000 + s);
        const auto bg = toy::blob_background(rng);
        const auto mask = toy::random_blob_mask(rng);
        const auto c = train::make_conditioning(bg, mask, "a forest with smoke", bb);
        const auto u = train::make_conditioning(bg, mask, "", bb);
        diffusion::SampleOptions so;
        so.seed = static_cast<std::uint64_t>(s);
        const auto x = diffusion::sample_cfg(adapted, {{c}}, {{u}}, sched, so);
        auto img = from_tensor(stack.autoencoder.decode(x.sample(0)));
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t xx = 0; xx < img.width; ++xx)
                if (!mask.at(y, xx))
                    for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, xx, ch) = bg.at(y, xx, ch);
        const auto [inside, outside] = toy::region_means(img, mask);
        bright += inside >= 2 * outside;
    }
    const double secs = seconds_since(t0);
    o.require(bright >= 16, std::to_string(bright) + "/20 samples brighter inside the mask");
    o.require(secs < 300, "took " + fmt("%.0f s", secs));
    if (o.pass)
        o.detail = "loss " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + ", " + std::to_string(bright) +
                   "/20 samples pass, " + fmt("%.0f s", secs);
    return o;
}

Outcome curation_arithmetic() {
    Outcome o;
    o.require(curation::weighted_score(8, 6, 4) == 6.6, "(8,6,4) gave " + fmt("%.17g", curation::weighted_score(8, 6, 4)));
    Rng rng(107);
    std::uniform_int_distribution<int> len(1, 60), pct(1, 100), coarse(0, 20), idc(0, 25);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<curation::ScoreRecord> recs;
        const int n = len(rng);
        for (int i = 0; i < n; ++i) {
            std::string id(1, static_cast<char>('a' + idc(rng)));
            id += std::to_string(i);
            recs.push_back(curation::ScoreRecord::make(id, coarse(rng) / 2.0, coarse(rng) / 2.0, coarse(rng) / 2.0,
                                                       curation::ScorerKind::mock));
        }
        const int p = pct(rng);
        const auto got = curation::select_top(recs, p / 100.0);
        const auto want = testing::oracle_top(recs, p);
        bool same = got.size() == want.size();
        for (std::size_t i = 0; same && i < got.size(); ++i) same = got[i].sample_id == want[i].sample_id;
        o.require(same, "list " + std::to_string(trial) + " differs from the sort oracle");
    }
    std::uniform_real_distribution<double> u(0, 10);
    std::vector<curation::ScoreRecord> big;
    for (int i = 0; i < 60000; ++i)
        big.push_back(curation::ScoreRecord::make("s" + std::to_string(i), u(rng), u(rng), u(rng), curation::ScorerKind::mock));
    const auto top = curation::select_top(big, 0.5);
    o.require(top.size() == 30000, "60000 -> " + std::to_string(top.size()));
    if (o.pass) o.detail = "6.6 exact, 1000 oracle lists, 60000 -> 30000";
    return o;
}

Outcome annotation_export() {
    Outcome o;
    Rng rng(108);
    for (int i = 0; i < 200; ++i) {
        auto m = testing::random_mask(32, 32, 0.1 + 0.4 * (i % 5) / 4.0, rng);
        if (!m.any()) m.set(0, 0, true);
        o.require(corpus::largest_component_bbox(m, corpus::Connectivity::eight) == testing::flood_fill_oracle(m, 8),
                  "mask " + std::to_string(i) + " (8-connected)");
        o.require(corpus::largest_component_bbox(m, corpus::Connectivity::four) == testing::flood_fill_oracle(m, 4),
                  "mask " + std::to_string(i) + " (4-connected)");
    }
    double worst = 0;
    for (int i = 0; i < 500; ++i) {
        const std::size_t W = 1 + rng() % 2000, H = 1 + rng() % 2000;
        const std::size_t x0 = rng() % W, y0 = rng() % H;
        const std::size_t w = 1 + rng() % (W - x0), h = 1 + rng() % (H - y0);
        std::istringstream line(corpus::format_yolo_line(corpus::to_yolo_label({x0, y0, w, h}, W, H)));
        int cls;
        double cx, cy, lw, lh;
        line >> cls >> cx >> cy >> lw >> lh;
        const double errs[] = {std::abs((cx - lw / 2) * W - double(x0)), std::abs((cy - lh / 2) * H - double(y0)),
                               std::abs(lw * W - double(w)), std::abs(lh * H - double(h))};
        for (double e : errs) worst = std::max(worst, e);
    }
    o.require(worst <= 0.5, "YOLO round trip off by " + fmt("%.3f px", worst));

    const fs::path fx = fs::path(SMOKEGEN_FIXTURES) / "export10";
    const auto m = corpus::read_manifest(fx / "manifest.jsonl");
    testing::TempDir dir("acceptance-export");
    corpus::export_yolo(m, dir.path());
    std::size_t identical = 0;
    for (const auto& r : m.records)
        identical += read_text(dir / ("labels/" + r.id + ".txt")) == read_text(fx / "golden" / (r.id + ".txt"));
    o.require(m.size() == 10 && identical == 10, std::to_string(identical) + "/10 label files match");
    if (o.pass) o.detail = "200 masks, round trip within " + fmt("%.3f px", worst) + ", 10/10 golden labels";
    return o;
}

Outcome metrics() {
    Outcome o;
    Rng rng(109);
    double worst = 0;
    for (int i = 0; i < 20; ++i) {
        const auto a = testing::random_image(32, 32, rng);
        auto b = a;
        std::normal_distribution<double> n(0, 10 + 4 * i);
        for (auto& v : b.pixels) v = static_cast<std::uint8_t>(std::clamp(v + n(rng), 0.0, 255.0));
        const double m = testing::ref_mse(a, b);
        eval::SsimOptions g;
        g.gaussian = true;
        g.window = 7;
        for (double d : {eval::mse_img(a, b) - m, eval::psnr(a, b) - 10 * std::log10(255.0 * 255.0 / m),
                         eval::ssim(a, b) - testing::ref_ssim(a, b, 8), eval::ssim(a, b, g) - testing::ref_ssim(a, b, 7, true)})
            worst = std::max(worst, std::abs(d));
    }
    o.require(worst < 1e-9, "reference mismatch " + fmt("%.3g", worst));
    const RgbImage base(16, 16, 100), plus(16, 16, 116);
    const double p = eval::psnr(base, plus);
    o.require(std::abs(p - 24.05) <= 0.01, "constant offset PSNR " + fmt("%.4f", p));
    if (o.pass) o.detail = "max deviation " + fmt("%.2g", worst) + ", offset PSNR " + fmt("%.4f dB", p);
    return o;
}

Outcome pipeline_counts() {
    Outcome o;
    testing::TempDir dir("acceptance-pipeline");
    Rng rng(110);
    corpus::Manifest bgs, real;
    bgs.base_dir = real.base_dir = dir.path();
    fs::create_directories(dir / "bg");
    fs::create_directories(dir / "real");
    for (int i = 0; i < 10; ++i) {
        const std::string id = "bg" + std::to_string(i);
        save_rgb(testing::random_image(32, 32, rng), dir / "bg" / (id + ".png"));
        bgs.records.push_back({id, "bg/" + id + ".png", std::nullopt, "a pine forest", corpus::Source::real,
                               corpus::Split::train});
    }
    for (int i = 0; i < 30; ++i) {
        const std::string id = "real" + std::to_string(i);
        save_rgb(testing::random_image(32, 32, rng), dir / "real" / (id + ".png"));
        real.records.push_back({id, "real/" + id + ".png", std::nullopt, "", corpus::Source::real, corpus::Split::train});
    }
    std::vector<BinaryMask> pool;
    for (std::size_t i = 0; i < 8; ++i) pool.push_back(testing::rect_mask(32, 32, 2 + i, 3 + i % 4, 10, 12));

    gen::GenConfig gc;
    gc.seed = 4;
    const auto pairs = gen::pair_masks(bgs, pool, gc, gen::file_dims(bgs));
    const auto generated = gen::generate_batch(pairs, gen::MockBackend{}, gc, dir / "gen");
    o.require(pairs.size() == 20, std::to_string(pairs.size()) + " pairs");
    o.require(generated.manifest.size() == 60 && generated.quarantined.empty(),
              std::to_string(generated.manifest.size()) + " generated records");
    std::map<std::string, int> per_background, per_pair;
    for (const auto& r : generated.manifest.records) {
        ++per_background[r.id.substr(0, r.id.find('_'))];
        ++per_pair[r.id.substr(0, r.id.rfind('_'))];
    }
    bool multipliers = per_background.size() == 10 && per_pair.size() == 20;
    for (const auto& [id, n] : per_background) multipliers = multipliers && n == 6;
    for (const auto& [id, n] : per_pair) multipliers = multipliers && n == 3;
    o.require(multipliers, "per-background or per-pair multipliers not honored");

    const auto scores = curation::score_candidates(
        generated.manifest, [] { return std::make_unique<curation::MockScorer>(); }, curation::ScoreOptions{});
    const auto selected = curation::select_manifest(scores, generated.manifest, 0.5);
    o.require(selected.size() == 30, "top half kept " + std::to_string(selected.size()));

    const auto mixed = corpus::mix_datasets(real, selected, {1, 1}, {1, 1}, 5);
    std::size_t synth = 0, pos = 0;
    for (const auto& r : mixed.records) synth += r.source == corpus::Source::synthetic, pos += r.positive();
    o.require(mixed.size() == 60 && synth == 30 && pos == 30,
              "mixed " + std::to_string(mixed.size()) + " records, " + std::to_string(synth) + " synthetic");
    if (o.pass) o.detail = "10 x 2 x 3 = 60 -> 30 -> 60 mixed (30 real, 30 synthetic)";
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"noise/denoise round trip", noise_round_trip},
        {"adapter identity at init", adapter_identity},
        {"gradient correctness", gradient_checks},
        {"loss identities", loss_identities},
        {"morphology oracle and perturbation reach", morphology},
        {"toy end-to-end", toy_end_to_end},
        {"curation arithmetic", curation_arithmetic},
        {"annotation and export oracles", annotation_export},
        {"metric correctness", metrics},
        {"pipeline counts", pipeline_counts},
    };
    int failed = 0;
    for (const auto& [name, fn] : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("threw: ") + e.what();
        }
        failed += !o.pass;
        std::printf("%s  %-42s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
    return failed ? 1 : 0;
}
