#include <doctest.h>

#include <cmath>

#include "smokegen/diffusion.hpp"
#include "smokegen/error.hpp"
#include "smokegen/toy_models.hpp"
#include "support.hpp"

using namespace smokegen;
using namespace smokegen::diffusion;
using testing::random_tensor;

namespace {

SampleConditioning toy_cond(const std::string& prompt, Rng& rng, std::size_t hw = 8) {
    static const ToyTextEncoder text;
    SampleConditioning c;
    c.text_embedding = text.embed(prompt);
    c.latent_mask = testing::random_mask(hw, hw, 0.3, rng);
    c.masked_latent = random_tensor({3, hw, hw}, rng, 0.5);
    return c;
}

/// Predicts the exact noise that separates x_t from a known x0.
class OracleDenoiser final : public Denoiser {
public:
    OracleDenoiser(Tensor x0_tokens, NoiseSchedule s) : x0_(std::move(x0_tokens)), s_(std::move(s)) {}
    ag::Var forward(const ag::Var& x_t, int t, const SampleConditioning&, const TapHook*) const override {
        const double a = s_.alpha(t);
        Tensor e(x_t.value().shape());
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = (x_t.value()[i] - std::sqrt(a) * x0_[i]) / std::sqrt(1 - a);
        return ag::Var::constant(e);
    }
    std::vector<TapInfo> tap_points(std::size_t, std::size_t) const override { return {}; }
    std::size_t latent_channels() const override { return 3; }

private:
    Tensor x0_;
    NoiseSchedule s_;
};

class FailingDenoiser final : public Denoiser {
public:
    ag::Var forward(const ag::Var&, int t, const SampleConditioning&, const TapHook*) const override {
        if (t < 50) throw InvalidInput("backbone exploded");
        return ag::Var::constant(Tensor({64, 3}, 0.0));
    }
    std::vector<TapInfo> tap_points(std::size_t, std::size_t) const override { return {}; }
    std::size_t latent_channels() const override { return 3; }
};

}  // namespace

TEST_CASE("add_noise examples") {
    Rng rng(1);
    Tensor x0 = random_tensor({2, 3, 3}, rng), eps = random_tensor({2, 3, 3}, rng);
    NoiseSchedule one({1.0, 0.5});
    CHECK(add_noise(x0, eps, 1, one) == x0);
    CHECK(noise_to_level(x0, eps, 0.0) == eps);
    Tensor a({1}, 2.0), b({1}, 1.0);
    CHECK(noise_to_level(a, b, 0.25)[0] == doctest::Approx(1.8660254).epsilon(1e-7));
    CHECK_THROWS_AS(add_noise(x0, eps, 0, one), InvalidStep);
    CHECK_THROWS_AS(add_noise(x0, eps, 3, one), InvalidStep);
    CHECK_THROWS_AS(add_noise(x0, Tensor({2, 3}), 1, one), InvalidInput);
}

TEST_CASE("reverse_step examples") {
    Rng rng(2);
    Tensor x = random_tensor({3, 4, 4}, rng), e = random_tensor({3, 4, 4}, rng);
    NoiseSchedule flat({0.5, 0.5});
    auto same = reverse_step(x, e, 2, flat);
    CHECK(max_abs_diff(same, x) < 1e-15);

    NoiseSchedule s({0.9, 0.4});
    auto r = reverse_step(x, Tensor(x.shape(), 0.0), 2, s);
    const double c = std::sqrt(0.9) / std::sqrt(0.4);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(r[i] == doctest::Approx(c * x[i]).epsilon(1e-14));

    CHECK_THROWS_AS(reverse_step(x, e, 1, s), InvalidStep);
    CHECK_THROWS_AS(reverse_update(x, e, 0.0, 0.5), SingularityError);
}

TEST_CASE("reverse_step inverts add_noise across the schedule") {
    for (auto sched : {make_linear_schedule(100), make_cosine_schedule(100)}) {
        Rng rng(3);
        for (int t = 2; t <= 100; ++t) {
            Tensor x0 = random_tensor({3, 8, 8}, rng), eps = random_tensor({3, 8, 8}, rng);
            Tensor back = reverse_step(add_noise(x0, eps, t, sched), eps, t, sched);
            Tensor want = add_noise(x0, eps, t - 1, sched);
            double num = 0, den = 0;
            for (std::size_t i = 0; i < want.size(); ++i) num += std::pow(back[i] - want[i], 2), den += want[i] * want[i];
            CHECK(std::sqrt(num / den) < 1e-6);
        }
    }
}

TEST_CASE("base_loss examples") {
    Rng rng(4);
    Tensor a = random_tensor({2, 5, 7}, rng), b = random_tensor({2, 5, 7}, rng);
    CHECK(base_loss(a, a) == 0.0);
    CHECK(base_loss(Tensor({3, 2, 2}, 0.0), Tensor({3, 2, 2}, 1.0)) == 1.0);
    double s = 0;
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 7; ++x) s += std::pow(a.at(c, y, x) - b.at(c, y, x), 2);
    CHECK(std::abs(base_loss(a, b) - s / 70) < 1e-12);
    CHECK_THROWS_AS(base_loss(a, Tensor({2, 5, 6})), InvalidInput);
}

TEST_CASE("schedules are valid") {
    auto lin2 = make_linear_schedule(2);
    CHECK(lin2.alpha(1) > lin2.alpha(2));
    CHECK(lin2.alpha(1) <= 1.0);
    CHECK(lin2.alpha(2) > 0.0);
    for (int T : {2, 3, 10, 100, 1000, 4000}) {
        for (const auto& s : {make_linear_schedule(T), make_cosine_schedule(T)}) {
            CHECK(s.steps() == T);
            for (int t = 2; t <= T; ++t) CHECK(s.alpha(t) <= s.alpha(t - 1));
            CHECK(s.alpha(T) > 0.0);
        }
    }
    auto cos = make_cosine_schedule(1000);
    CHECK(cos.alpha(1) > 0.999);
    CHECK(cos.alpha(1000) < 0.01);
    CHECK_THROWS_AS(make_linear_schedule(1), InvalidInput);
    CHECK_THROWS_AS(make_cosine_schedule(0), InvalidInput);
    CHECK_THROWS_AS(NoiseSchedule({0.5, 0.6}), InvalidInput);
    CHECK_THROWS_AS(NoiseSchedule({0.5, 0.0}), InvalidInput);
    auto back = NoiseSchedule::from_json(cos.to_json());
    CHECK(back.alphas() == cos.alphas());
    CHECK(cos.to_json().find("\"T\":1000") != std::string::npos);
}

TEST_CASE("strided timesteps") {
    auto ts = strided_timesteps(1000, 50);
    CHECK(ts.size() == 50);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 1);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
    CHECK(strided_timesteps(100, 100).size() == 100);
    CHECK(strided_timesteps(10, 1) == std::vector<int>{10});
    CHECK_THROWS_AS(strided_timesteps(10, 11), InvalidInput);
}

TEST_CASE("toy denoiser keeps shapes at every tap") {
    ToyUNet net(ToyUNetConfig{.max_t = 100});
    Rng rng(5);
    for (std::size_t hw : {4, 8, 12}) {
        auto taps = net.tap_points(hw, hw);
        REQUIRE(taps.size() == 9);
        for (std::size_t i = 0; i < taps.size(); ++i) CHECK(taps[i].id == int(i));
        auto c = toy_cond("smoke", rng, hw);
        LatentBatch x{random_tensor({2, 3, hw, hw}, rng)};
        auto out = net.predict(x, 17, ConditioningBundle{{c, c}});
        CHECK(out.data.shape() == x.data.shape());
        CHECK(out.data.all_finite());
    }
    CHECK_THROWS(net.tap_points(6, 6));
}

TEST_CASE("autoencoders preserve pixel shape") {
    Rng rng(6);
    Tensor px = random_tensor({3, 64, 48}, rng);
    AvgPoolAutoencoder ae(8);
    auto lat = ae.encode(px);
    CHECK(lat.shape() == Shape{3, 8, 6});
    CHECK(ae.decode(lat).shape() == px.shape());
    IdentityAutoencoder id;
    CHECK(id.decode(id.encode(px)) == px);
    CHECK(id.downsample_factor() == 1);
}

TEST_CASE("sample_cfg guidance endpoints and determinism") {
    ToyUNet net(ToyUNetConfig{.max_t = 100});
    auto sched = make_linear_schedule(100);
    Rng rng(7);
    auto c = toy_cond("thick smoke", rng);
    auto u = c;
    u.text_embedding = ToyTextEncoder().embed("");
    ConditioningBundle cond{{c}}, uncond{{u}};
    SampleOptions o;
    o.steps = 10;
    o.seed = 42;

    auto a = sample_cfg(net, cond, uncond, sched, o);
    auto b = sample_cfg(net, cond, uncond, sched, o);
    CHECK(a.data == b.data);
    o.seed = 43;
    CHECK_FALSE(sample_cfg(net, cond, uncond, sched, o).data == a.data);
    o.seed = 42;

    // Manual conditional-only and unconditional-only loops.
    auto manual = [&](const ConditioningBundle& which) {
        Rng r(42);
        LatentBatch x = a;
        std::normal_distribution<double> n(0, 1);
        for (auto& v : x.data.storage()) v = n(r);
        auto ts = strided_timesteps(100, 10);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            const double prev = k + 1 < ts.size() ? sched.alpha(ts[k + 1]) : 1.0;
            x.data = reverse_update(x.data, net.predict(x, ts[k], which).data, sched.alpha(ts[k]), prev);
        }
        return x;
    };
    o.guidance = 1.0;
    CHECK(sample_cfg(net, cond, uncond, sched, o).data == manual(cond).data);
    o.guidance = 0.0;
    CHECK(sample_cfg(net, cond, uncond, sched, o).data == manual(uncond).data);
}

TEST_CASE("the sampler lands on x0 with a perfect noise predictor") {
    auto sched = make_linear_schedule(100);
    Rng rng(8);
    Tensor x0 = random_tensor({3, 8, 8}, rng);
    OracleDenoiser oracle(grid_to_tokens(x0), sched);
    SampleConditioning c;
    c.masked_latent = Tensor({3, 8, 8});
    c.latent_mask = BinaryMask(8, 8);
    c.text_embedding = Tensor({1, 16});
    for (int steps : {1, 7, 50, 100}) {
        SampleOptions o;
        o.steps = steps;
        o.guidance = 7.5;
        auto out = sample_cfg(oracle, {{c}}, {{c}}, sched, o);
        CHECK(max_abs_diff(out.sample(0), x0) < 1e-9);
    }
}

TEST_CASE("sampling errors carry the step") {
    FailingDenoiser bad;
    SampleConditioning c;
    c.masked_latent = Tensor({3, 8, 8});
    c.latent_mask = BinaryMask(8, 8);
    c.text_embedding = Tensor({1, 16});
    SampleOptions o;
    o.steps = 10;
    try {
        sample_cfg(bad, {{c}}, {{c}}, make_linear_schedule(100), o);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == "invalid-input");
        CHECK(std::string(e.what()).find("t=45") != std::string::npos);
    }
    CHECK_THROWS_AS(sample_cfg(bad, {{c}}, {}, make_linear_schedule(100), o), InvalidInput);
}

TEST_CASE("latent batch stacking") {
    Rng rng(9);
    Tensor a = random_tensor({3, 2, 2}, rng), b = random_tensor({3, 2, 2}, rng);
    auto lb = LatentBatch::stack({a, b});
    CHECK(lb.batch() == 2);
    CHECK(lb.sample(1) == b);
    lb.set_sample(0, b);
    CHECK(lb.sample(0) == b);
}
