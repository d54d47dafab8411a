#include "smokegen/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <json.hpp>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha) : alpha_(std::move(alpha)) {
    if (alpha_.empty()) throw InvalidInput("noise schedule: empty alpha array");
    for (std::size_t i = 0; i < alpha_.size(); ++i) {
        const double a = alpha_[i];
        if (!std::isfinite(a) || a <= 0.0 || a > 1.0)
            throw InvalidInput("noise schedule: alpha_" + std::to_string(i + 1) + " outside (0, 1]");
        if (i > 0 && a > alpha_[i - 1])
            throw InvalidInput("noise schedule: alpha increases at t=" + std::to_string(i + 1));
    }
}

double NoiseSchedule::alpha(int t) const {
    if (t < 1 || t > steps())
        throw InvalidStep("step " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
    return alpha_[static_cast<std::size_t>(t - 1)];
}

std::string NoiseSchedule::to_json() const {
    nlohmann::ordered_json j;
    j["T"] = steps();
    j["alpha"] = alpha_;
    return j.dump();
}

NoiseSchedule NoiseSchedule::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("noise schedule json: ") + e.what());
    }
    if (!j.contains("T") || !j.contains("alpha")) throw InvalidInput("noise schedule json: needs T and alpha");
    auto alpha = j.at("alpha").get<std::vector<double>>();
    if (j.at("T").get<int>() != static_cast<int>(alpha.size()))
        throw InvalidInput("noise schedule json: T does not match alpha length");
    return NoiseSchedule(std::move(alpha));
}

NoiseSchedule make_linear_schedule(int T) {
    if (T < 2) throw InvalidInput("schedule needs T >= 2");
    // Betas on the usual 1e-4..0.02 range for T=1000, rescaled so shorter
    // schedules reach a comparable final noise level.
    const double scale = 1000.0 / T;
    const double b0 = std::min(scale * 1e-4, 0.999);
    const double b1 = std::min(scale * 0.02, 0.999);
    std::vector<double> alpha(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double beta = b0 + (b1 - b0) * i / (T - 1);
        prod *= 1.0 - beta;
        alpha[static_cast<std::size_t>(i)] = prod;
    }
    return NoiseSchedule(std::move(alpha));
}

NoiseSchedule make_cosine_schedule(int T) {
    if (T < 2) throw InvalidInput("schedule needs T >= 2");
    constexpr double s = 0.008;
    auto f = [&](double t) {
        const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    std::vector<double> alpha(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
        prod *= 1.0 - beta;
        alpha[static_cast<std::size_t>(t - 1)] = prod;
    }
    return NoiseSchedule(std::move(alpha));
}

Tensor LatentBatch::sample(std::size_t i) const {
    const std::size_t c = channels(), h = height(), w = width();
    const std::size_t n = c * h * w;
    std::vector<double> v(data.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                          data.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    return Tensor({c, h, w}, std::move(v));
}

void LatentBatch::set_sample(std::size_t i, const Tensor& chw) {
    const std::size_t n = channels() * height() * width();
    if (chw.size() != n) throw InvalidInput("latent batch: sample shape mismatch");
    std::copy(chw.data().begin(), chw.data().end(), data.data().begin() + static_cast<std::ptrdiff_t>(i * n));
}

LatentBatch LatentBatch::stack(const std::vector<Tensor>& samples, Space space) {
    if (samples.empty()) throw InvalidInput("latent batch: no samples");
    const Shape s = samples.front().shape();
    if (s.size() != 3) throw InvalidInput("latent batch: samples must be (C, H, W)");
    LatentBatch out{Tensor({samples.size(), s[0], s[1], s[2]}), space};
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].shape() != s) throw InvalidInput("latent batch: ragged samples");
        out.set_sample(i, samples[i]);
    }
    return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw InvalidInput(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add_noise(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched) {
    return noise_to_level(x0, eps, sched.alpha(t));
}

Tensor noise_to_level(const Tensor& x0, const Tensor& eps, double a) {
    require_same_shape(x0, eps, "add_noise");
    if (!(a >= 0.0 && a <= 1.0)) throw InvalidInput("noise level outside [0, 1]");
    const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa * x0[i] + sn * eps[i];
    return out;
}

LatentBatch add_noise(const LatentBatch& x0, const LatentBatch& eps, int t, const NoiseSchedule& sched) {
    return {add_noise(x0.data, eps.data, t, sched), x0.space};
}

Tensor reverse_update(const Tensor& x_t, const Tensor& eps_pred, double alpha_t, double alpha_prev) {
    require_same_shape(x_t, eps_pred, "reverse_step");
    if (alpha_t == 0.0) throw SingularityError("reverse step with alpha_t = 0");
    const double c1 = std::sqrt(alpha_prev) / std::sqrt(alpha_t);
    const double c2 = std::sqrt(alpha_prev) * (std::sqrt(1.0 / alpha_prev - 1.0) - std::sqrt(1.0 / alpha_t - 1.0));
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c1 * x_t[i] + c2 * eps_pred[i];
    return out;
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched) {
    if (t < 2 || t > sched.steps())
        throw InvalidStep("reverse step " + std::to_string(t) + " outside 2.." + std::to_string(sched.steps()));
    return reverse_update(x_t, eps_pred, sched.alpha(t), sched.alpha(t - 1));
}

LatentBatch reverse_step(const LatentBatch& x_t, const LatentBatch& eps_pred, int t, const NoiseSchedule& sched) {
    return {reverse_step(x_t.data, eps_pred.data, t, sched), x_t.space};
}

double base_loss(const Tensor& eps, const Tensor& eps_pred) {
    require_same_shape(eps, eps_pred, "base_loss");
    if (eps.empty()) throw InvalidInput("base_loss: empty tensors");
    double s = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = eps[i] - eps_pred[i];
        s += d * d;
    }
    return s / static_cast<double>(eps.size());
}

double base_loss(const LatentBatch& eps, const LatentBatch& eps_pred) { return base_loss(eps.data, eps_pred.data); }

LatentBatch Denoiser::predict(const LatentBatch& x_t, int t, const ConditioningBundle& cond) const {
    if (x_t.data.rank() != 4) throw InvalidInput("predict: expected a B x C x H x W batch");
    if (cond.size() != x_t.batch()) throw InvalidInput("predict: conditioning does not match batch size");
    ag::NoGradGuard guard;
    LatentBatch out{Tensor(x_t.data.shape()), x_t.space};
    for (std::size_t i = 0; i < x_t.batch(); ++i) {
        const Tensor chw = x_t.sample(i);
        auto eps = forward(ag::Var::constant(grid_to_tokens(chw)), t, cond[i]);
        out.set_sample(i, tokens_to_grid(eps.value(), x_t.height(), x_t.width()));
    }
    return out;
}

std::vector<int> strided_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw InvalidInput("sampling steps " + std::to_string(steps) + " must be in 1.." + std::to_string(T));
    if (steps == 1) return {T};
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        const double v = T - static_cast<double>(T - 1) * i / (steps - 1);
        ts.push_back(static_cast<int>(std::lround(v)));
    }
    return ts;
}

LatentBatch sample_cfg(const Denoiser& denoiser, const ConditioningBundle& cond, const ConditioningBundle& uncond,
                       const NoiseSchedule& sched, const SampleOptions& opts) {
    if (cond.size() == 0) throw InvalidInput("sample_cfg: empty conditioning");
    const auto& first = cond[0].masked_latent;
    if (first.rank() != 3) throw InvalidInput("sample_cfg: masked latent must be (C, H, W)");
    Rng rng(opts.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    LatentBatch x{Tensor({cond.size(), first.dim(0), first.dim(1), first.dim(2)}), Space::latent};
    for (auto& v : x.data.storage()) v = normal(rng);
    return sample_cfg_from(denoiser, std::move(x), cond, uncond, sched, opts);
}

LatentBatch sample_cfg_from(const Denoiser& denoiser, LatentBatch x, const ConditioningBundle& cond,
                            const ConditioningBundle& uncond, const NoiseSchedule& sched, const SampleOptions& opts) {
    if (cond.size() != uncond.size()) throw InvalidInput("sample_cfg: cond/uncond batch sizes differ");
    if (cond.size() != x.batch()) throw InvalidInput("sample_cfg: conditioning does not match batch size");
    for (std::size_t i = 0; i < cond.size(); ++i)
        if (cond[i].masked_latent.shape() != uncond[i].masked_latent.shape())
            throw InvalidInput("sample_cfg: cond/uncond shapes disagree");
    const auto ts = strided_timesteps(sched.steps(), opts.steps);
    const double g = opts.guidance;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        try {
            const LatentBatch ec = denoiser.predict(x, t, cond);
            Tensor eps(ec.data.shape());
            if (g == 1.0) {
                eps = ec.data;
            } else {
                const LatentBatch eu = denoiser.predict(x, t, uncond);
                if (g == 0.0) {
                    eps = eu.data;
                } else {
                    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (1.0 - g) * eu.data[i] + g * ec.data[i];
                }
            }
            const double a_prev = k + 1 < ts.size() ? sched.alpha(ts[k + 1]) : 1.0;
            x.data = reverse_update(x.data, eps, sched.alpha(t), a_prev);
        } catch (const Error& e) {
            throw Error(e.kind(), "sampling step t=" + std::to_string(t) + ": " + e.what());
        }
        if (!x.data.all_finite()) throw Error("non-finite", "sampling step t=" + std::to_string(t) + " produced non-finite values");
    }
    return x;
}

// ---- autoencoders ------------------------------------------------------

Tensor IdentityAutoencoder::encode(const Tensor& pixels) const {
    if (pixels.rank() != 3) throw InvalidInput("encode: expected (C, H, W)");
    return pixels;
}

Tensor IdentityAutoencoder::decode(const Tensor& latent) const {
    if (latent.rank() != 3) throw InvalidInput("decode: expected (C, H, W)");
    return latent;
}

AvgPoolAutoencoder::AvgPoolAutoencoder(int factor) : factor_(factor) {
    if (factor < 1) throw InvalidConfig("autoencoder factor must be positive");
}

Tensor AvgPoolAutoencoder::encode(const Tensor& pixels) const {
    if (pixels.rank() != 3) throw InvalidInput("encode: expected (C, H, W)");
    const std::size_t f = static_cast<std::size_t>(factor_);
    const std::size_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
    if (h % f || w % f) throw InvalidInput("encode: image dims must be multiples of " + std::to_string(f));
    Tensor out({c, h / f, w / f});
    const double inv = 1.0 / static_cast<double>(f * f);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(ch, y / f, x / f) += inv * pixels.at(ch, y, x);
    return out;
}

Tensor AvgPoolAutoencoder::decode(const Tensor& latent) const {
    if (latent.rank() != 3) throw InvalidInput("decode: expected (C, H, W)");
    const std::size_t f = static_cast<std::size_t>(factor_);
    const std::size_t c = latent.dim(0), h = latent.dim(1) * f, w = latent.dim(2) * f;
    Tensor out({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(ch, y, x) = latent.at(ch, y / f, x / f);
    return out;
}

}  // namespace smokegen::diffusion
