#include "smokegen/toy_harness.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::toy {

namespace {

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

const char* const kWords[] = {"a", "forest", "hillside", "valley", "trees", "mountain", "sky", "road", "field", "lake",
                              "view", "of", "the", "green", "distant", "ridge", "cloudy", "pine"};

}  // namespace

BinaryMask random_blob_mask(Rng& rng, std::size_t size) {
    const std::size_t g = size / kLatentFactor;
    std::uniform_real_distribution<double> centre(1.5, static_cast<double>(g) - 2.5);
    std::uniform_real_distribution<double> radius(1.2, 2.6);
    BinaryMask small(g, g);
    while (!small.any()) {
        const double cy = centre(rng), cx = centre(rng), ry = radius(rng), rx = radius(rng);
        for (std::size_t y = 0; y < g; ++y)
            for (std::size_t x = 0; x < g; ++x) {
                const double dy = (static_cast<double>(y) - cy) / ry, dx = (static_cast<double>(x) - cx) / rx;
                small.set(y, x, dy * dy + dx * dx <= 1.0);
            }
    }
    return small.resized_nearest(size, size);
}

RgbImage blob_background(Rng& rng, std::size_t size) {
    std::normal_distribution<double> noise(0.0, 8.0);
    std::uniform_real_distribution<double> tint(-6.0, 6.0);
    const double tr = tint(rng), tg = tint(rng), tb = tint(rng);
    RgbImage img(size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double base = 50.0 + noise(rng);
            img.at(y, x, 0) = clamp_byte(base + tr);
            img.at(y, x, 1) = clamp_byte(base + tg);
            img.at(y, x, 2) = clamp_byte(base + tb);
        }
    return img;
}

std::vector<Scene> make_blob_dataset(std::size_t n, std::uint64_t seed, std::size_t size) {
    std::vector<Scene> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "blob" + std::to_string(i)));
        Scene s{blob_background(rng, size), random_blob_mask(rng, size), "a forest with a thick white smoke plume"};
        std::normal_distribution<double> noise(0.0, 8.0);
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
                if (s.mask.at(y, x)) {
                    const double v = 230.0 + noise(rng);
                    for (std::size_t c = 0; c < 3; ++c) s.image.at(y, x, c) = clamp_byte(v);
                }
        out.push_back(std::move(s));
    }
    return out;
}

Scene generic_scene(Rng& rng, std::size_t size) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 6.0);
    double base[3], grad_y[3], grad_x[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = 20.0 + 215.0 * u(rng);
        grad_y[c] = (u(rng) - 0.5) * 80.0;
        grad_x[c] = (u(rng) - 0.5) * 80.0;
    }
    Scene s{RgbImage(size, size), BinaryMask(size, size), ""};
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = base[c] + grad_y[c] * (static_cast<double>(y) / size - 0.5) +
                                 grad_x[c] * (static_cast<double>(x) / size - 0.5) + noise(rng);
                s.image.at(y, x, static_cast<std::size_t>(c)) = clamp_byte(v);
            }
    const int rects = static_cast<int>(u(rng) * 3.0);
    for (int r = 0; r < rects; ++r) {
        const std::size_t w = 8 + static_cast<std::size_t>(u(rng) * (size / 2.0));
        const std::size_t h = 8 + static_cast<std::size_t>(u(rng) * (size / 2.0));
        const std::size_t x0 = static_cast<std::size_t>(u(rng) * static_cast<double>(size - w));
        const std::size_t y0 = static_cast<std::size_t>(u(rng) * static_cast<double>(size - h));
        double col[3];
        for (double& c : col) c = 20.0 + 215.0 * u(rng);
        for (std::size_t y = y0; y < y0 + h; ++y)
            for (std::size_t x = x0; x < x0 + w; ++x)
                for (std::size_t c = 0; c < 3; ++c) s.image.at(y, x, c) = clamp_byte(col[c] + noise(rng));
    }
    // Mask coverage anywhere between nothing and a bit over half the frame.
    const double fill = 0.6 * u(rng);
    if (fill > 0.05) {
        const std::size_t g = size / kLatentFactor;
        BinaryMask small(g, g);
        const double cy = u(rng) * g, cx = u(rng) * g;
        const double area = fill * static_cast<double>(g * g);
        const double aspect = 0.5 + u(rng);
        const double ry = std::sqrt(area / 3.14159 * aspect), rx = std::sqrt(area / 3.14159 / aspect);
        for (std::size_t y = 0; y < g; ++y)
            for (std::size_t x = 0; x < g; ++x) {
                const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
                small.set(y, x, dy * dy + dx * dx <= 1.0);
            }
        s.mask = small.resized_nearest(size, size);
    }
    if (u(rng) >= 0.1) {
        const int words = 2 + static_cast<int>(u(rng) * 5);
        for (int i = 0; i < words; ++i) {
            if (i) s.caption += ' ';
            s.caption += kWords[static_cast<std::size_t>(u(rng) * std::size(kWords)) % std::size(kWords)];
        }
    }
    return s;
}

std::vector<double> pretrain_backbone(ToyStack& stack, const diffusion::NoiseSchedule& schedule,
                                      const PretrainConfig& cfg) {
    if (cfg.steps < 0 || cfg.batch < 1 || cfg.pool < 1) throw InvalidConfig("toy pretraining counts must be positive");
    Rng rng(cfg.seed);
    auto bb = stack.backbone();
    std::vector<train::PreparedSample> pool;
    for (int i = 0; i < cfg.pool; ++i) {
        Scene s = generic_scene(rng);
        pool.push_back(train::prepare_sample("g" + std::to_string(i), s.image, s.mask, s.caption, bb));
    }
    auto& params = stack.unet.params();
    params.set_trainable(true);
    train::AdamW opt(0.9, 0.999, 0.0, 1e-8);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::uniform_int_distribution<int> pick_t(1, schedule.steps());
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> losses;
    for (int step = 0; step < cfg.steps; ++step) {
        params.zero_grad();
        ag::Var acc;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& s = pool[pick(rng)];
            const int t = pick_t(rng);
            Tensor eps(s.x0.shape());
            for (auto& v : eps.storage()) v = normal(rng);
            const Tensor x_t = diffusion::add_noise(s.x0, eps, t, schedule);
            auto pred = stack.unet.forward(ag::Var::constant(grid_to_tokens(x_t)), t, s.cond);
            auto l = ag::scale(ag::mse(pred, ag::Var::constant(grid_to_tokens(eps))), 1.0 / cfg.batch);
            acc = acc.defined() ? acc + l : l;
        }
        ag::backward(acc);
        losses.push_back(acc.value()[0]);
        opt.step(params, cfg.learning_rate);
    }
    params.set_trainable(false);
    params.zero_grad();
    return losses;
}

void save_backbone(const ToyStack& stack, const std::filesystem::path& path) {
    const auto& c = stack.unet.config();
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["kind"] = "toy-backbone";
    j["config"] = {{"latent_channels", c.latent_channels}, {"width1", c.width1}, {"width2", c.width2},
                   {"text_dim", c.text_dim}, {"time_dim", c.time_dim},   {"emb_dim", c.emb_dim},
                   {"max_t", c.max_t},       {"seed", c.seed}};
    nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
    for (const auto& [name, v] : stack.unet.params()) tensors[name] = injection::tensor_to_json(v.value());
    j["tensors"] = std::move(tensors);
    write_text_atomic(path, j.dump() + "\n");
}

void load_backbone(ToyStack& stack, const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
        if (j.at("kind") != "toy-backbone" || j.at("version") != 1) throw CheckpointError("not a toy backbone file");
        const auto& c = stack.unet.config();
        const auto& jc = j.at("config");
        if (jc.at("latent_channels") != c.latent_channels || jc.at("width1") != c.width1 || jc.at("width2") != c.width2 ||
            jc.at("text_dim") != c.text_dim || jc.at("time_dim") != c.time_dim || jc.at("emb_dim") != c.emb_dim ||
            jc.at("max_t") != c.max_t)
            throw CheckpointError("backbone file " + path.string() + " was saved for a different architecture");
        std::map<std::string, Tensor> values;
        for (const auto& [name, t] : j.at("tensors").items()) values.emplace(name, injection::tensor_from_json(t));
        if (values.size() != stack.unet.params().size()) throw CheckpointError("backbone file tensor count mismatch");
        stack.unet.params().load(values);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("backbone file " + path.string() + " is malformed: " + e.what());
    } catch (const InvalidConfig& e) {
        throw CheckpointError("backbone file " + path.string() + ": " + e.what());
    }
}

std::pair<double, double> region_means(const RgbImage& image, const BinaryMask& mask) {
    if (image.width != mask.width() || image.height != mask.height())
        throw InvalidInput("region_means: image and mask dimensions differ");
    double in = 0, out = 0;
    std::size_t nin = 0, nout = 0;
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x) {
            const double v = (image.at(y, x, 0) + image.at(y, x, 1) + image.at(y, x, 2)) / 3.0;
            if (mask.at(y, x)) in += v, ++nin;
            else out += v, ++nout;
        }
    return {nin ? in / nin : 0.0, nout ? out / nout : 0.0};
}

}  // namespace smokegen::toy
