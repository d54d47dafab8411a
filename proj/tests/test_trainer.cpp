#include <doctest.h>

#include <cmath>
#include <fstream>

#include "smokegen/error.hpp"
#include "smokegen/toy_harness.hpp"
#include "smokegen/trainer.hpp"
#include "support.hpp"

using namespace smokegen;
using namespace smokegen::train;

namespace {

diffusion::ToyUNetConfig small_unet() {
    diffusion::ToyUNetConfig c;
    c.max_t = 100;
    return c;
}

struct Fixture {
    toy::ToyStack stack{small_unet()};
    diffusion::NoiseSchedule schedule = diffusion::make_linear_schedule(100);
    std::vector<PreparedSample> data;

    Fixture() {
        const auto scenes = toy::make_blob_dataset(6, 9);
        for (std::size_t i = 0; i < scenes.size(); ++i)
            data.push_back(prepare_sample("blob" + std::to_string(i), scenes[i].image, scenes[i].mask,
                                          scenes[i].caption, stack.backbone()));
    }

    injection::AdapterSet adapters(bool zero_final = true) {
        injection::AdapterConfig cfg;
        cfg.zero_final = zero_final;
        return injection::AdapterSet(injection::default_schedule(), stack.unet.tap_points(8, 8), cfg);
    }
};

TrainConfig small_config() {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.batch_size = 4;
    c.max_iters = 6;
    c.checkpoint_every = 2;
    c.seed = 42;
    return c;
}

}  // namespace

TEST_CASE("train config") {
    CHECK_NOTHROW(TrainConfig{}.validate());
    CHECK(TrainConfig{}.learning_rate == 1e-4);
    CHECK(TrainConfig{}.mrd.omega == 0.4);
    const auto c = small_config();
    const auto back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    for (const char* bad : {R"({"learning_rate": -1})", R"({"batch_size": 0})", R"({"max_iters": 0})",
                            R"({"mrd": {"omega": 1.2}})", R"({"batch_size": 6, "micro_batch": 4})",
                            R"({"beta1": 1.0})", R"({"learning_rate": "fast"})"}) {
        INFO(bad);
        CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(bad)), InvalidConfig);
    }
    TrainConfig w;
    w.warmup_iters = 4;
    w.learning_rate = 1.0;
    CHECK(w.lr_at(0) == 0.25);
    CHECK(w.lr_at(3) == 1.0);
    CHECK(w.lr_at(10) == 1.0);
}

TEST_CASE("freeze policy") {
    using K = FreezePolicy::Kind;
    CHECK(FreezePolicy::classify("tap4.mask.key") == K::trainable);
    CHECK(FreezePolicy::classify("backbone.down1.w") == K::frozen);
    CHECK(FreezePolicy::classify("extractor.w1") == K::frozen);
    CHECK_THROWS_AS(FreezePolicy::classify("mystery"), InvalidConfig);
}

TEST_CASE("zero-initialized adapters with omega 0 reproduce the backbone loss") {
    Fixture fx;
    auto set = fx.adapters();
    auto cfg = small_config();
    cfg.mrd.omega = 0.0;
    Trainer trainer(fx.stack.backbone(), set, fx.schedule, cfg);
    const auto r = trainer.train_step(fx.data);

    Rng rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, fx.data.size() - 1);
    std::uniform_int_distribution<int> pick_t(1, 100);
    std::normal_distribution<double> normal(0.0, 1.0);
    double want = 0;
    for (int k = 0; k < cfg.batch_size; ++k) {
        const auto& s = fx.data[pick(rng)];
        const int t = pick_t(rng);
        Tensor eps(s.x0.shape());
        for (auto& v : eps.storage()) v = normal(rng);
        mrd::perturb_mask(s.pixel_mask, cfg.mrd, rng);
        const Tensor x_t = diffusion::add_noise(s.x0, eps, t, fx.schedule);
        ag::NoGradGuard ng;
        const auto pred = fx.stack.unet.forward(ag::Var::constant(grid_to_tokens(x_t)), t, s.cond);
        want += diffusion::base_loss(eps, tokens_to_grid(pred.value(), 8, 8)) / cfg.batch_size;
    }
    CHECK(std::abs(r.loss - want) < 1e-12);
    CHECK(r.omega_term == 0.0);
}

TEST_CASE("training is deterministic and respects the freeze policy") {
    Fixture fx;
    std::vector<double> losses[2];
    for (int run = 0; run < 2; ++run) {
        auto set = fx.adapters();
        Trainer trainer(fx.stack.backbone(), set, fx.schedule, small_config());
        const auto before = trainer.snapshot();
        for (int i = 0; i < 4; ++i) losses[run].push_back(trainer.train_step(fx.data).loss);
        const auto rep = verify_freeze(before, trainer.snapshot());
        CHECK(rep.ok);
        CHECK(rep.frozen_drifted.empty());
        CHECK_FALSE(rep.trainable_changed.empty());
    }
    CHECK(losses[0] == losses[1]);
    for (double l : losses[0]) CHECK(std::isfinite(l));
}

TEST_CASE("verify_freeze negative cases") {
    SUBCASE("unfrozen backbone is named") {
        Fixture fx;
        auto set = fx.adapters();
        auto cfg = small_config();
        cfg.unfreeze_backbone = true;
        Trainer trainer(fx.stack.backbone(), set, fx.schedule, cfg);
        const auto before = trainer.snapshot();
        trainer.train_step(fx.data);
        const auto rep = verify_freeze(before, trainer.snapshot());
        CHECK_FALSE(rep.ok);
        REQUIRE_FALSE(rep.frozen_drifted.empty());
        for (const auto& n : rep.frozen_drifted) CHECK(n.rfind("backbone.", 0) == 0);
        CHECK(rep.summary().find(rep.frozen_drifted.front()) != std::string::npos);
        fx.stack.unet.params().set_trainable(false);
    }
    SUBCASE("zero learning rate is flagged as a no-op") {
        Fixture fx;
        auto set = fx.adapters();
        auto cfg = small_config();
        cfg.learning_rate = 0.0;
        Trainer trainer(fx.stack.backbone(), set, fx.schedule, cfg);
        const auto before = trainer.snapshot();
        trainer.train_step(fx.data);
        const auto rep = verify_freeze(before, trainer.snapshot());
        CHECK_FALSE(rep.ok);
        CHECK(rep.no_op);
        CHECK(rep.summary().find("no-op training") != std::string::npos);
    }
}

TEST_CASE("micro-batches accumulate to the full-batch update") {
    Fixture fx;
    auto a = fx.adapters(false), b = fx.adapters(false);
    auto cfg = small_config();
    Trainer ta(fx.stack.backbone(), a, fx.schedule, cfg);
    cfg.micro_batch = 2;
    Trainer tb(fx.stack.backbone(), b, fx.schedule, cfg);
    for (int i = 0; i < 2; ++i) {
        const auto ra = ta.train_step(fx.data), rb = tb.train_step(fx.data);
        CHECK(std::abs(ra.loss - rb.loss) < 1e-12);
    }
    const auto sa = a.params().snapshot(), sb = b.params().snapshot();
    for (const auto& [name, t] : sa) CHECK(max_abs_diff(t, sb.at(name)) < 1e-9);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
    Fixture fx;
    auto set = fx.adapters();
    set.params().get("tap0.fuse.b1").mutable_value()[0] = std::nan("");
    Trainer trainer(fx.stack.backbone(), set, fx.schedule, small_config());
    try {
        trainer.train_step(fx.data);
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(std::string(e.what()).find("iter 1") != std::string::npos);
    }
}

TEST_CASE("run_training checkpoints and metrics") {
    Fixture fx;
    testing::TempDir dir("train");
    SUBCASE("max_iters 1 writes one checkpoint and one metrics line") {
        auto set = fx.adapters();
        auto cfg = small_config();
        cfg.max_iters = 1;
        Trainer trainer(fx.stack.backbone(), set, fx.schedule, cfg);
        const auto s = run_training(trainer, fx.data, {dir.path()});
        CHECK(s.steps.size() == 1);
        int ckpts = 0;
        for (const auto& e : std::filesystem::directory_iterator(dir.path()))
            if (e.path().filename().string().rfind("checkpoint-", 0) == 0) ++ckpts;
        CHECK(ckpts == 1);
        const auto lines = read_lines(dir / "metrics.jsonl");
        REQUIRE(lines.size() == 1);
        const auto j = nlohmann::json::parse(lines[0]);
        for (const char* k : {"iter", "loss", "omega_term", "base_term", "lr", "wallclock"}) CHECK(j.contains(k));
        CHECK(j["iter"] == 1);

        const auto loaded = load_adapters(s.last_checkpoint, fx.stack.unet);
        CHECK(loaded.iter == 1);
        CHECK(loaded.schedule.steps() == 100);
        CHECK(loaded.adapters.params().snapshot() == set.params().snapshot());
        CHECK(loaded.adapters.schedule().assignment == injection::default_schedule().assignment);
    }
    SUBCASE("resume continues the same stream") {
        std::vector<double> straight;
        {
            testing::TempDir ref("train-ref");
            auto set = fx.adapters();
            Trainer trainer(fx.stack.backbone(), set, fx.schedule, small_config());
            for (const auto& r : run_training(trainer, fx.data, {ref.path()}).steps) straight.push_back(r.loss);
        }
        REQUIRE(straight.size() == 6);
        {
            auto set = fx.adapters();
            Trainer trainer(fx.stack.backbone(), set, fx.schedule, small_config());
            RunOptions o{dir.path()};
            o.stop_after = 3;
            CHECK(run_training(trainer, fx.data, o).end_iter == 3);
        }
        auto set = fx.adapters();
        Trainer trainer(fx.stack.backbone(), set, fx.schedule, small_config());
        const auto s = run_training(trainer, fx.data, {dir.path()});
        CHECK(s.start_iter == 2);
        REQUIRE(s.steps.size() == 4);
        CHECK(s.steps.front().iter == 3);
        for (std::size_t i = 0; i < 4; ++i) CHECK(s.steps[i].loss == straight[i + 2]);
        const auto lines = read_lines(dir / "metrics.jsonl");
        REQUIRE(lines.size() == 6);
        for (std::size_t i = 0; i < 6; ++i) CHECK(nlohmann::json::parse(lines[i])["iter"] == i + 1);
    }
    SUBCASE("corrupt checkpoint refuses to resume without restart") {
        auto cfg = small_config();
        cfg.max_iters = 2;
        {
            auto set = fx.adapters();
            Trainer trainer(fx.stack.backbone(), set, fx.schedule, cfg);
            run_training(trainer, fx.data, {dir.path()});
        }
        const auto latest = latest_checkpoint(dir.path());
        REQUIRE(latest);
        auto text = read_text(*latest);
        const auto pos = text.find("\"iter\":2");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 8, "\"iter\":1");
        write_text_atomic(*latest, text);
        cfg.max_iters = 4;
        auto set = fx.adapters();
        Trainer trainer(fx.stack.backbone(), set, fx.schedule, cfg);
        CHECK_THROWS_AS(run_training(trainer, fx.data, {dir.path()}), CheckpointError);
        write_text_atomic(*latest, "{not json");
        CHECK_THROWS_AS(run_training(trainer, fx.data, {dir.path()}), CheckpointError);
        RunOptions o{dir.path()};
        o.restart = true;
        const auto s = run_training(trainer, fx.data, o);
        CHECK(s.start_iter == 0);
        CHECK(s.end_iter == 4);
    }
}
