#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "smokegen/diffusion.hpp"
#include "smokegen/injection.hpp"
#include "smokegen/mrd.hpp"
#include "smokegen/toy_models.hpp"

namespace smokegen::train {

struct TrainConfig {
    double learning_rate = 1e-4;
    int warmup_iters = 0;
    int batch_size = 32;
    int micro_batch = 0;  // 0: whole batch at once; otherwise accumulate
    int max_iters = 20000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;
    mrd::MrdConfig mrd;
    std::uint64_t seed = 0;
    int checkpoint_every = 1000;
    bool unfreeze_backbone = false;  // for negative tests only

    void validate() const;
    double lr_at(int iter) const;
    nlohmann::ordered_json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Decoupled weight decay Adam. Only parameters that currently require
/// gradients are touched.
class AdamW {
public:
    AdamW(double beta1, double beta2, double weight_decay, double eps);
    void step(ParameterSet& params, double lr);
    int steps_taken() const { return t_; }

    nlohmann::ordered_json to_json() const;
    void load_json(const nlohmann::json& j);

private:
    double b1_, b2_, wd_, eps_;
    int t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

/// Trainable iff the name belongs to an adapter ("tap..."). Backbone,
/// autoencoder, text encoder and extractor parameters are frozen.
struct FreezePolicy {
    enum class Kind { trainable, frozen };
    static Kind classify(const std::string& name);
};

struct FreezeReport {
    bool ok = true;
    bool no_op = false;
    std::vector<std::string> frozen_drifted;
    std::vector<std::string> trainable_changed;
    std::string summary() const;
};

/// Compares parameter snapshots taken before and after training.
FreezeReport verify_freeze(const std::map<std::string, Tensor>& before, const std::map<std::string, Tensor>& after);

/// Frozen model components the trainer and generator run against.
struct Backbone {
    const diffusion::AutoencoderClient* autoencoder = nullptr;
    const diffusion::TextEncoder* text = nullptr;
    const injection::FeatureExtractor* extractor = nullptr;
    const diffusion::Denoiser* unet = nullptr;
    ParameterSet* unet_params = nullptr;  // may be null for external bindings
};

/// Everything a training step needs for one triple, computed once.
struct PreparedSample {
    std::string id;
    Tensor x0;               // (C, h, w) latent
    BinaryMask pixel_mask;   // image resolution
    SampleConditioning cond;
};

/// Encodes the image, builds the masked-image latent, the latent mask, the
/// caption embedding and the extractor features.
PreparedSample prepare_sample(const std::string& id, const RgbImage& image, const BinaryMask& mask,
                              const std::string& caption, const Backbone& backbone);

/// Conditioning for inference on a background: same recipe without x0.
SampleConditioning make_conditioning(const RgbImage& image, const BinaryMask& mask, const std::string& caption,
                                     const Backbone& backbone);

struct StepResult {
    int iter = 0;
    double loss = 0.0;
    double omega_term = 0.0;
    double base_term = 0.0;
    double lr = 0.0;
};

class Trainer {
public:
    Trainer(const Backbone& backbone, injection::AdapterSet& adapters, diffusion::NoiseSchedule schedule,
            TrainConfig cfg);

    /// One optimizer update on `batch_size` samples drawn from `data`.
    StepResult train_step(const std::vector<PreparedSample>& data);

    int iter() const { return iter_; }
    const TrainConfig& config() const { return cfg_; }
    const diffusion::NoiseSchedule& schedule() const { return schedule_; }
    const injection::AdapterSet& adapters() const { return *adapters_; }

    /// All model parameters, backbone and adapters, keyed by name.
    std::map<std::string, Tensor> snapshot() const;

    nlohmann::ordered_json checkpoint_json() const;
    void restore(const nlohmann::json& ckpt);

private:
    Backbone backbone_;
    injection::AdapterSet* adapters_;
    diffusion::NoiseSchedule schedule_;
    TrainConfig cfg_;
    AdamW opt_;
    Rng rng_;
    int iter_ = 0;
};

struct RunOptions {
    std::filesystem::path out_dir;
    bool restart = false;                   // ignore existing (possibly corrupt) checkpoints
    std::optional<int> stop_after;          // simulate an interruption
    std::function<void(const StepResult&)> on_step;
};

struct RunSummary {
    int start_iter = 0;
    int end_iter = 0;
    std::vector<StepResult> steps;
    std::filesystem::path last_checkpoint;
};

/// Trains to cfg.max_iters, writing metrics.jsonl and checkpoints into
/// out_dir. Resumes from the newest checkpoint unless `restart` is set; a
/// corrupt checkpoint aborts with CheckpointError.
RunSummary run_training(Trainer& trainer, const std::vector<PreparedSample>& data, const RunOptions& opts);

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int iter);
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir);

void write_checkpoint(const std::filesystem::path& path, const nlohmann::ordered_json& ckpt);
/// Parses and verifies the checksum.
nlohmann::json read_checkpoint(const std::filesystem::path& path);

/// Adapter weights, injection schedule and noise schedule from a checkpoint.
struct LoadedAdapters {
    injection::AdapterSet adapters;
    diffusion::NoiseSchedule schedule;
    TrainConfig config;
    int iter = 0;
};
LoadedAdapters load_adapters(const std::filesystem::path& path, const diffusion::Denoiser& base);

}  // namespace smokegen::train
