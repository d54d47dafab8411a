#include "smokegen/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <regex>
#include <sstream>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::train {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InvalidConfig("train.learning_rate must be >= 0");
    if (batch_size < 1) throw InvalidConfig("train.batch_size must be positive");
    if (micro_batch < 0 || (micro_batch > 0 && batch_size % micro_batch))
        throw InvalidConfig("train.micro_batch must divide train.batch_size");
    if (max_iters < 1) throw InvalidConfig("train.max_iters must be positive");
    if (checkpoint_every < 1) throw InvalidConfig("train.checkpoint_every must be positive");
    if (warmup_iters < 0) throw InvalidConfig("train.warmup_iters must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw InvalidConfig("optimizer betas must be in [0, 1)");
    if (weight_decay < 0) throw InvalidConfig("train.weight_decay must be >= 0");
    mrd.validate();
}

double TrainConfig::lr_at(int iter) const {
    if (warmup_iters == 0 || iter >= warmup_iters) return learning_rate;
    return learning_rate * static_cast<double>(iter + 1) / static_cast<double>(warmup_iters);
}

ordered_json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"warmup_iters", warmup_iters},
            {"batch_size", batch_size},
            {"micro_batch", micro_batch},
            {"max_iters", max_iters},
            {"beta1", beta1},
            {"beta2", beta2},
            {"weight_decay", weight_decay},
            {"adam_eps", adam_eps},
            {"mrd",
             {{"omega", mrd.omega},
              {"kernel_min", mrd.kernel_min},
              {"kernel_max", mrd.kernel_max},
              {"max_rounds", mrd.max_rounds},
              {"fixed_rounds", mrd.fixed_rounds},
              {"xor_difference", mrd.xor_difference}}},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"unfreeze_backbone", unfreeze_backbone}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    try {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.micro_batch = j.value("micro_batch", c.micro_batch);
        c.max_iters = j.value("max_iters", c.max_iters);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        if (j.contains("mrd")) {
            const auto& m = j.at("mrd");
            c.mrd.omega = m.value("omega", c.mrd.omega);
            c.mrd.kernel_min = m.value("kernel_min", c.mrd.kernel_min);
            c.mrd.kernel_max = m.value("kernel_max", c.mrd.kernel_max);
            c.mrd.max_rounds = m.value("max_rounds", c.mrd.max_rounds);
            c.mrd.fixed_rounds = m.value("fixed_rounds", c.mrd.fixed_rounds);
            c.mrd.xor_difference = m.value("xor_difference", c.mrd.xor_difference);
        }
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.unfreeze_backbone = j.value("unfreeze_backbone", c.unfreeze_backbone);
    } catch (const json::exception& e) {
        throw InvalidConfig(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---- optimizer ---------------------------------------------------------

AdamW::AdamW(double beta1, double beta2, double weight_decay, double eps)
    : b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {}

void AdamW::step(ParameterSet& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (auto& [name, var] : params) {
        if (!var.requires_grad()) continue;
        Tensor& p = var.mutable_value();
        const Tensor& g = var.grad();
        const bool has_grad = g.shape() == p.shape();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.shape() != p.shape()) m = Tensor(p.shape()), v = Tensor(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = has_grad ? g[i] : 0.0;
            m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
            v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
            p[i] -= lr * wd_ * p[i];
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

ordered_json AdamW::to_json() const {
    ordered_json j;
    j["t"] = t_;
    ordered_json m = ordered_json::object(), v = ordered_json::object();
    for (const auto& [k, t] : m_) m[k] = injection::tensor_to_json(t);
    for (const auto& [k, t] : v_) v[k] = injection::tensor_to_json(t);
    j["m"] = std::move(m);
    j["v"] = std::move(v);
    return j;
}

void AdamW::load_json(const json& j) {
    t_ = j.at("t").get<int>();
    m_.clear();
    v_.clear();
    for (const auto& [k, t] : j.at("m").items()) m_[k] = injection::tensor_from_json(t);
    for (const auto& [k, t] : j.at("v").items()) v_[k] = injection::tensor_from_json(t);
}

// ---- freezing ----------------------------------------------------------

FreezePolicy::Kind FreezePolicy::classify(const std::string& name) {
    if (name.rfind("tap", 0) == 0) return Kind::trainable;
    for (const char* prefix : {"backbone.", "autoencoder.", "text.", "extractor."})
        if (name.rfind(prefix, 0) == 0) return Kind::frozen;
    throw InvalidConfig("parameter '" + name + "' is not covered by the freeze policy");
}

std::string FreezeReport::summary() const {
    std::ostringstream os;
    if (!frozen_drifted.empty()) {
        os << "frozen parameters changed:";
        for (const auto& n : frozen_drifted) os << ' ' << n;
        os << '\n';
    }
    if (no_op) os << "no-op training: no trainable parameter changed\n";
    if (ok) os << "freeze ok (" << trainable_changed.size() << " trainable tensors updated)\n";
    return os.str();
}

FreezeReport verify_freeze(const std::map<std::string, Tensor>& before, const std::map<std::string, Tensor>& after) {
    FreezeReport r;
    for (const auto& [name, t0] : before) {
        auto it = after.find(name);
        if (it == after.end()) throw InvalidInput("verify_freeze: '" + name + "' missing from the later snapshot");
        const bool changed = !(it->second == t0);
        if (FreezePolicy::classify(name) == FreezePolicy::Kind::frozen) {
            if (changed) r.frozen_drifted.push_back(name);
        } else if (changed) {
            r.trainable_changed.push_back(name);
        }
    }
    r.no_op = r.trainable_changed.empty();
    r.ok = r.frozen_drifted.empty() && !r.no_op;
    return r;
}

// ---- sample preparation --------------------------------------------------

namespace {

void require_backbone(const Backbone& b) {
    if (!b.autoencoder || !b.text || !b.extractor || !b.unet) throw InvalidConfig("backbone binding is incomplete");
}

}  // namespace

SampleConditioning make_conditioning(const RgbImage& image, const BinaryMask& mask, const std::string& caption,
                                     const Backbone& backbone) {
    require_backbone(backbone);
    if (image.width != mask.width() || image.height != mask.height())
        throw InvalidInput("image and mask dimensions differ");
    const int f = backbone.autoencoder->downsample_factor();
    Tensor masked = to_tensor(image);
    const std::size_t hw = image.width * image.height;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < hw; ++i)
            if (mask.bits()[i]) masked[c * hw + i] = 0.0;
    SampleConditioning cond;
    cond.text_embedding = backbone.text->embed(caption);
    cond.latent_mask = mrd::downsample_mask(mask, f);
    cond.masked_latent = backbone.autoencoder->encode(masked);
    cond.features = injection::extract_features(mask, injection::apply_mask(image, mask), *backbone.extractor);
    return cond;
}

PreparedSample prepare_sample(const std::string& id, const RgbImage& image, const BinaryMask& mask,
                              const std::string& caption, const Backbone& backbone) {
    PreparedSample s;
    s.id = id;
    s.cond = make_conditioning(image, mask, caption, backbone);
    s.x0 = backbone.autoencoder->encode(to_tensor(image));
    s.pixel_mask = mask;
    return s;
}

// ---- trainer -----------------------------------------------------------

Trainer::Trainer(const Backbone& backbone, injection::AdapterSet& adapters, diffusion::NoiseSchedule schedule,
                 TrainConfig cfg)
    : backbone_(backbone),
      adapters_(&adapters),
      schedule_(std::move(schedule)),
      cfg_(cfg),
      opt_(cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps),
      rng_(cfg.seed) {
    require_backbone(backbone_);
    cfg_.validate();
    adapters_->params().set_trainable(true);
    if (backbone_.unet_params) backbone_.unet_params->set_trainable(cfg_.unfreeze_backbone);
    if (cfg_.unfreeze_backbone && !backbone_.unet_params)
        throw InvalidConfig("unfreeze_backbone needs access to the backbone parameters");
}

StepResult Trainer::train_step(const std::vector<PreparedSample>& data) {
    if (data.empty()) throw InvalidInput("train_step: empty dataset");
    const auto adapted = injection::attach_adapters(*backbone_.unet, *adapters_);
    const int B = cfg_.batch_size;
    const int micro = cfg_.micro_batch > 0 ? cfg_.micro_batch : B;
    const int f = backbone_.autoencoder->downsample_factor();
    adapters_->params().zero_grad();
    if (backbone_.unet_params) backbone_.unet_params->zero_grad();

    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::uniform_int_distribution<int> pick_t(1, schedule_.steps());
    std::normal_distribution<double> normal(0.0, 1.0);

    StepResult r;
    r.iter = iter_ + 1;
    r.lr = cfg_.lr_at(iter_);
    std::vector<double> per_sample;
    for (int start = 0; start < B; start += micro) {
        ag::Var acc;
        for (int k = start; k < start + micro; ++k) {
            const PreparedSample& s = data[pick(rng_)];
            const int t = pick_t(rng_);
            Tensor eps(s.x0.shape());
            for (auto& v : eps.storage()) v = normal(rng_);
            const auto mp = mrd::perturb_mask(s.pixel_mask, cfg_.mrd, rng_);
            const BinaryMask m_latent = mrd::downsample_mask(mp.bits, f);
            const Tensor x_t = diffusion::add_noise(s.x0, eps, t, schedule_);
            auto pred = adapted.forward(ag::Var::constant(grid_to_tokens(x_t)), t, s.cond);
            const Tensor eps_tok = grid_to_tokens(eps);
            auto loss = mrd::total_loss(eps_tok, pred, m_latent, cfg_.mrd.omega);
            const auto terms = mrd::total_loss(eps, tokens_to_grid(pred.value(), s.x0.dim(1), s.x0.dim(2)), m_latent,
                                               cfg_.mrd.omega);
            per_sample.push_back(loss.value()[0]);
            r.omega_term += cfg_.mrd.omega * terms.masked_mse / B;
            r.base_term += (1.0 - cfg_.mrd.omega) * terms.base_mse / B;
            auto scaled = ag::scale(loss, 1.0 / B);
            acc = acc.defined() ? acc + scaled : scaled;
        }
        ag::backward(acc);
    }
    for (double v : per_sample) r.loss += v / B;
    if (!std::isfinite(r.loss)) {
        std::ostringstream os;
        os << "non-finite loss at iter " << r.iter << "; per-sample losses:";
        for (double v : per_sample) os << ' ' << v;
        throw NonFiniteLoss(os.str());
    }
    opt_.step(adapters_->params(), r.lr);
    if (backbone_.unet_params && cfg_.unfreeze_backbone) opt_.step(*backbone_.unet_params, r.lr);
    ++iter_;
    return r;
}

std::map<std::string, Tensor> Trainer::snapshot() const {
    auto out = adapters_->params().snapshot();
    if (backbone_.unet_params)
        for (auto& [k, v] : backbone_.unet_params->snapshot()) out.emplace(k, std::move(v));
    return out;
}

ordered_json Trainer::checkpoint_json() const {
    ordered_json j;
    j["version"] = 1;
    j["kind"] = "adapter-checkpoint";
    j["iter"] = iter_;
    j["noise_schedule"] = json::parse(schedule_.to_json());
    j["config"] = cfg_.to_json();
    j["adapters"] = injection::adapters_to_json(*adapters_);
    j["optimizer"] = opt_.to_json();
    std::ostringstream rs;
    rs << rng_;
    j["rng"] = rs.str();
    return j;
}

void Trainer::restore(const json& ckpt) {
    try {
        const auto loaded = injection::adapters_from_json(ckpt.at("adapters"), *backbone_.unet);
        if (loaded.schedule().assignment != adapters_->schedule().assignment)
            throw CheckpointError("checkpoint injection schedule differs from the configured one");
        adapters_->params().load(loaded.params().snapshot());
        opt_.load_json(ckpt.at("optimizer"));
        std::istringstream rs(ckpt.at("rng").get<std::string>());
        rs >> rng_;
        if (rs.fail()) throw CheckpointError("checkpoint rng state is unreadable");
        iter_ = ckpt.at("iter").get<int>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    }
}

// ---- checkpoints -------------------------------------------------------

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int iter) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "checkpoint-%07d.json", iter);
    return dir / buf;
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) return std::nullopt;
    static const std::regex re(R"(checkpoint-(\d+)\.json)");
    std::optional<std::filesystem::path> best;
    long best_iter = -1;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = e.path().filename().string();
        if (!std::regex_match(name, m, re)) continue;
        const long it = std::stol(m[1]);
        if (it > best_iter) best_iter = it, best = e.path();
    }
    return best;
}

namespace {

std::string checksum_of(const ordered_json& payload) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(payload.dump())));
    return buf;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ordered_json& ckpt) {
    ordered_json j = ckpt;
    j.erase("checksum");
    const std::string sum = checksum_of(j);
    j["checksum"] = sum;
    write_text_atomic(path, j.dump() + "\n");
}

json read_checkpoint(const std::filesystem::path& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text(path));
    } catch (const ordered_json::exception& e) {
        throw CheckpointError("checkpoint " + path.string() + " is corrupt: " + e.what());
    } catch (const Error& e) {
        throw CheckpointError("checkpoint " + path.string() + " is unreadable: " + e.what());
    }
    if (!j.is_object() || !j.contains("checksum") || !j.contains("version"))
        throw CheckpointError("checkpoint " + path.string() + " lacks version or checksum");
    const std::string stored = j["checksum"].is_string() ? j["checksum"].get<std::string>() : "";
    j.erase("checksum");
    if (checksum_of(j) != stored) throw CheckpointError("checkpoint " + path.string() + " failed its checksum");
    return json(j);
}

LoadedAdapters load_adapters(const std::filesystem::path& path, const diffusion::Denoiser& base) {
    const json j = read_checkpoint(path);
    try {
        return {injection::adapters_from_json(j.at("adapters"), base),
                diffusion::NoiseSchedule::from_json(j.at("noise_schedule").dump()), TrainConfig::from_json(j.at("config")),
                j.at("iter").get<int>()};
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    } catch (const InvalidInput& e) {
        throw CheckpointError(std::string("checkpoint noise schedule: ") + e.what());
    }
}

RunSummary run_training(Trainer& trainer, const std::vector<PreparedSample>& data, const RunOptions& opts) {
    if (data.empty()) throw InvalidInput("run_training: empty training set");
    const auto& cfg = trainer.config();
    std::filesystem::create_directories(opts.out_dir);
    const auto metrics_path = opts.out_dir / "metrics.jsonl";

    if (opts.restart) {
        for (const auto& e : std::filesystem::directory_iterator(opts.out_dir))
            if (e.path().filename().string().rfind("checkpoint-", 0) == 0) std::filesystem::remove(e.path());
        std::filesystem::remove(metrics_path);
    } else if (auto latest = latest_checkpoint(opts.out_dir)) {
        try {
            trainer.restore(read_checkpoint(*latest));
        } catch (const CheckpointError& e) {
            throw CheckpointError(std::string(e.what()) + "; rerun with the restart flag to start over");
        }
        // Drop metric lines past the checkpoint so the log has no duplicates.
        std::string kept;
        for (const auto& line : read_lines(metrics_path)) {
            const auto j = json::parse(line, nullptr, false);
            if (!j.is_discarded() && j.value("iter", 0) <= trainer.iter()) kept += line + "\n";
        }
        write_text_atomic(metrics_path, kept);
    }

    RunSummary summary;
    summary.start_iter = trainer.iter();
    const auto t0 = std::chrono::steady_clock::now();
    while (trainer.iter() < cfg.max_iters) {
        if (opts.stop_after && trainer.iter() >= *opts.stop_after) break;
        const auto r = trainer.train_step(data);
        summary.steps.push_back(r);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ordered_json line = {{"iter", r.iter}, {"loss", r.loss}, {"omega_term", r.omega_term},
                             {"base_term", r.base_term}, {"lr", r.lr}, {"wallclock", wall}};
        append_line_durable(metrics_path, line.dump());
        if (opts.on_step) opts.on_step(r);
        if (r.iter % cfg.checkpoint_every == 0 || r.iter == cfg.max_iters) {
            summary.last_checkpoint = checkpoint_path(opts.out_dir, r.iter);
            write_checkpoint(summary.last_checkpoint, trainer.checkpoint_json());
        }
    }
    summary.end_iter = trainer.iter();
    return summary;
}

}  // namespace smokegen::train
