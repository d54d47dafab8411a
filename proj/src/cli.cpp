#include "smokegen/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include <unistd.h>

#include <CLI11.hpp>

#include "smokegen/annotate.hpp"
#include "smokegen/corpus.hpp"
#include "smokegen/curation.hpp"
#include "smokegen/error.hpp"
#include "smokegen/evalkit.hpp"
#include "smokegen/generator.hpp"
#include "smokegen/prep.hpp"
#include "smokegen/toy_harness.hpp"
#include "smokegen/util.hpp"

#ifndef SMOKEGEN_GIT_DESCRIBE
#define SMOKEGEN_GIT_DESCRIBE "unknown"
#endif

namespace smokegen::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string git_describe() { return SMOKEGEN_GIT_DESCRIBE; }

// ---- config -----------------------------------------------------------

namespace {

const std::vector<std::string> kStages = {"prep", "train", "generate", "score", "select", "export", "eval", "annotate"};
const json kEmpty = json::object();

}  // namespace

PipelineConfig PipelineConfig::load(const fs::path& path) {
    if (!fs::exists(path)) throw InvalidInput("config file not found: " + path.string());
    PipelineConfig c;
    try {
        c.root = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw InvalidConfig(path.string() + ": " + e.what());
    }
    if (!c.root.is_object()) throw InvalidConfig(path.string() + ": top level must be an object");
    c.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    return c;
}

const json& PipelineConfig::stage(const std::string& name) const {
    auto it = root.find(name);
    if (it == root.end() || !it->is_object()) return kEmpty;
    return *it;
}

fs::path PipelineConfig::data_root() const {
    const auto& g = stage("global");
    fs::path r = g.contains("data_root") && g["data_root"].is_string() ? fs::path(g["data_root"].get<std::string>())
                                                                      : fs::path(".");
    return r.is_absolute() ? r : base_dir / r;
}

fs::path PipelineConfig::resolve(const std::string& path) const {
    fs::path p(path);
    return (p.is_absolute() ? p : data_root() / p).lexically_normal();
}

namespace {

struct PathRule {
    std::string stage, key;
    bool required;
};

// Inputs checked for existence, and outputs that later stages may consume.
const std::vector<PathRule> kInputs = {
    {"prep", "detections", true},      {"train", "manifest", false},     {"train", "backbone", false},
    {"generate", "backgrounds", true}, {"generate", "masks", true},      {"generate", "checkpoint", false},
    {"generate", "backbone", false},   {"score", "manifest", true},      {"select", "scores", true},
    {"select", "manifest", true},      {"select", "annotations", false}, {"export", "manifest", true},
    {"export", "real", false},         {"eval", "generated", true},      {"eval", "reference", true},
    {"annotate", "manifest", true},
};
const std::vector<PathRule> kOutputs = {
    {"prep", "out", false},   {"train", "out", false},  {"generate", "out", false},
    {"score", "out", false},  {"select", "out", false}, {"export", "out", false},
};

int stage_rank(const std::string& s) {
    for (std::size_t i = 0; i < kStages.size(); ++i)
        if (kStages[i] == s) return static_cast<int>(i);
    return -1;
}

bool within(const fs::path& p, const fs::path& dir) {
    auto pi = p.begin();
    for (auto di = dir.begin(); di != dir.end(); ++di, ++pi) {
        if (di->empty()) continue;
        if (pi == p.end() || *pi != *di) return false;
    }
    return true;
}

}  // namespace

std::vector<std::string> validate_config(const PipelineConfig& cfg, bool check_paths) {
    std::vector<std::string> problems;
    for (const auto& [key, value] : cfg.root.items()) {
        if (key != "global" && stage_rank(key) < 0) problems.push_back("unknown top-level key '" + key + "'");
        else if (!value.is_object()) problems.push_back("'" + key + "' must be an object");
    }
    auto num = [&](const std::string& stage, const std::string& key, double lo, double hi) {
        const auto& s = cfg.stage(stage);
        if (!s.contains(key)) return;
        if (!s[key].is_number() || s[key].get<double>() < lo || s[key].get<double>() > hi)
            problems.push_back(stage + "." + key + " must be a number in [" + std::to_string(lo) + ", " +
                               std::to_string(hi) + "]");
    };
    num("global", "seed", 0, 1.8e19);
    num("global", "workers", 1, 1024);
    num("prep", "max_tokens", 1, 1e6);
    num("prep", "threshold", 1, 255);
    num("prep", "val_fraction", 0, 1);
    num("train", "timesteps", 2, 1e6);
    num("train", "pretrain_steps", 0, 1e9);
    num("score", "retries", 0, 1000);
    num("select", "fraction", 1e-12, 1);

    try {
        train::TrainConfig::from_json(cfg.stage("train"));
    } catch (const Error& e) {
        problems.push_back(e.what());
    }
    try {
        const auto& g = cfg.stage("generate");
        gen::GenConfig gc;
        gc.guidance_scale = g.value("guidance_scale", gc.guidance_scale);
        gc.steps = g.value("steps", gc.steps);
        gc.masks_per_background = g.value("masks_per_background", gc.masks_per_background);
        gc.samples_per_pair = g.value("samples_per_pair", gc.samples_per_pair);
        gc.validate();
    } catch (const json::exception& e) {
        problems.push_back(std::string("generate: ") + e.what());
    } catch (const Error& e) {
        problems.push_back(e.what());
    }
    for (const char* k : {"real_synth", "pos_neg"}) {
        const auto& e = cfg.stage("export");
        if (!e.contains(k)) continue;
        try {
            corpus::parse_ratio(e[k].get<std::string>());
        } catch (const std::exception& ex) {
            problems.push_back(std::string("export.") + k + ": " + ex.what());
        }
    }
    if (!check_paths) return problems;

    for (const auto& rule : kInputs) {
        const auto& s = cfg.stage(rule.stage);
        if (!cfg.root.contains(rule.stage)) continue;
        if (!s.contains(rule.key)) {
            if (rule.required) problems.push_back(rule.stage + "." + rule.key + " is required");
            continue;
        }
        if (!s[rule.key].is_string()) {
            problems.push_back(rule.stage + "." + rule.key + " must be a path string");
            continue;
        }
        const fs::path p = cfg.resolve(s[rule.key].get<std::string>());
        if (fs::exists(p)) continue;
        bool produced = false;
        for (const auto& out : kOutputs) {
            if (stage_rank(out.stage) >= stage_rank(rule.stage)) continue;
            const auto& os = cfg.stage(out.stage);
            if (os.contains(out.key) && os[out.key].is_string() &&
                within(p, cfg.resolve(os[out.key].get<std::string>())))
                produced = true;
        }
        if (!produced) problems.push_back(rule.stage + "." + rule.key + ": path does not exist: " + p.string());
    }
    return problems;
}

// ---- argument plumbing ------------------------------------------------

namespace {

/// Flag values by config key; a flag given on the command line wins over
/// the stage block, which wins over the built-in default.
class Params {
public:
    Params(std::string stage, const PipelineConfig& cfg) : stage_(std::move(stage)), cfg_(cfg) {}

    std::map<std::string, std::string> flags;
    std::map<std::string, std::vector<std::string>> lists;
    ordered_json effective;

    std::optional<std::string> raw(const std::string& key) const {
        auto it = flags.find(key);
        if (it != flags.end() && !it->second.empty()) return it->second;
        const auto& s = cfg_.stage(stage_);
        if (s.contains(key) && !s[key].is_null()) return s[key].is_string() ? s[key].get<std::string>() : s[key].dump();
        return std::nullopt;
    }

    std::string str(const std::string& key, const std::string& def) {
        auto v = raw(key).value_or(def);
        effective[key] = v;
        return v;
    }
    std::string required(const std::string& key) {
        auto v = raw(key);
        if (!v) throw InvalidInput("missing required flag --" + dashed(key));
        effective[key] = *v;
        return *v;
    }
    fs::path required_path(const std::string& key) {
        auto p = from_flag(key) ? fs::path(required(key)) : cfg_.resolve(required(key));
        effective[key] = p.string();
        return p;
    }
    std::optional<fs::path> opt_path(const std::string& key) {
        auto v = raw(key);
        if (!v) return std::nullopt;
        auto p = from_flag(key) ? fs::path(*v) : cfg_.resolve(*v);
        effective[key] = p.string();
        return p;
    }
    long integer(const std::string& key, long def) {
        auto v = raw(key);
        long r = def;
        if (v) {
            try {
                std::size_t used = 0;
                r = std::stol(*v, &used);
                if (used != v->size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw InvalidInput("--" + dashed(key) + " expects an integer, got '" + *v + "'");
            }
        }
        effective[key] = r;
        return r;
    }
    double number(const std::string& key, double def) {
        auto v = raw(key);
        double r = def;
        if (v) {
            try {
                std::size_t used = 0;
                r = std::stod(*v, &used);
                if (used != v->size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw InvalidInput("--" + dashed(key) + " expects a number, got '" + *v + "'");
            }
        }
        effective[key] = r;
        return r;
    }
    bool boolean(const std::string& key, bool def) {
        auto v = raw(key);
        bool r = def;
        if (v) r = *v == "true" || *v == "1";
        effective[key] = r;
        return r;
    }
    std::vector<std::string> list(const std::string& key) {
        std::vector<std::string> out;
        const auto& s = cfg_.stage(stage_);
        if (s.contains(key) && s[key].is_array())
            for (const auto& v : s[key]) out.push_back(v.get<std::string>());
        for (const auto& v : lists[key]) out.push_back(v);
        effective[key] = out;
        return out;
    }
    std::uint64_t seed() {
        auto v = raw("seed");
        std::uint64_t s = 0;
        if (!v) {
            const auto& g = cfg_.stage("global");
            if (g.contains("seed")) s = g["seed"].get<std::uint64_t>();
        } else {
            try {
                s = std::stoull(*v);
            } catch (const std::exception&) {
                throw InvalidInput("--seed expects a non-negative integer");
            }
        }
        effective["seed"] = s;
        return s;
    }
    int workers() {
        long w = 1;
        const auto& g = cfg_.stage("global");
        if (g.contains("workers")) w = g["workers"].get<long>();
        w = integer("workers", w);
        if (w < 1) throw InvalidInput("--workers must be positive");
        return static_cast<int>(w);
    }

    static std::string dashed(std::string key) {
        for (auto& c : key)
            if (c == '_') c = '-';
        return key;
    }

private:
    bool from_flag(const std::string& key) const {
        auto it = flags.find(key);
        return it != flags.end() && !it->second.empty();
    }

    std::string stage_;
    const PipelineConfig& cfg_;
};

std::string utc_stamp(const char* fmt) {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, fmt, &tm);
    return buf;
}

std::vector<BinaryMask> load_mask_pool(const fs::path& source) {
    std::vector<BinaryMask> pool;
    if (fs::is_directory(source)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(source))
            if (e.is_regular_file() && to_lower(e.path().extension().string()) == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) pool.push_back(corpus::load_mask(f));
    } else {
        const auto m = corpus::read_manifest(source);
        for (const auto& r : m.records)
            if (r.mask_path) pool.push_back(corpus::load_mask(m.resolve(*r.mask_path)));
    }
    if (pool.empty()) throw InvalidInput("no masks found in " + source.string());
    return pool;
}

/// Toy backbone from file, or pretrained and saved when the file is absent.
void ensure_backbone(toy::ToyStack& stack, const fs::path& path, const diffusion::NoiseSchedule& schedule,
                     const toy::PretrainConfig& pc, std::ostream& out) {
    if (fs::exists(path)) {
        toy::load_backbone(stack, path);
        out << "loaded backbone " << path.string() << "\n";
        return;
    }
    out << "pretraining toy backbone for " << pc.steps << " steps\n" << std::flush;
    const auto losses = toy::pretrain_backbone(stack, schedule, pc);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    toy::save_backbone(stack, path);
    if (!losses.empty()) out << "pretrain final loss " << losses.back() << "\n";
}

std::atomic<annotate::AnnotationServer*> g_server{nullptr};

extern "C" void on_signal(int) {
    if (auto* s = g_server.load()) s->stop();
}

// ---- subcommands --------------------------------------------------------

struct Context {
    std::ostream& out;
    std::ostream& err;
    ordered_json outputs = ordered_json::object();
};

int cmd_prep(Params& p, Context& ctx) {
    const auto detections = prep::read_detection_manifest(p.required_path("detections"));
    prep::PrepOptions o;
    o.out_dir = p.required_path("out");
    o.max_tokens = static_cast<int>(p.integer("max_tokens", o.max_tokens));
    o.workers = p.workers();
    o.threshold = static_cast<int>(p.integer("threshold", o.threshold));
    o.transport_retries = static_cast<int>(p.integer("retries", o.transport_retries));
    o.val_fraction = p.number("val_fraction", o.val_fraction);
    o.stop_patterns = p.list("stop_patterns");
    if (auto lim = p.raw("limit")) o.limit = static_cast<std::size_t>(p.integer("limit", 0));

    const std::string seg = p.str("seg_endpoint", "mock-box");
    const std::string cap = p.str("cap_endpoint", "mock:smoke rising above a forest");
    prep::SegFactory sf;
    if (seg == "mock-box")
        sf = [] { return std::make_unique<prep::BoxSegmenter>(); };
    else if (seg.rfind("http", 0) == 0)
        sf = [seg] { return std::make_unique<prep::HttpSegmentationClient>(seg); };
    else
        throw InvalidInput("--seg-endpoint must be mock-box or an http endpoint");
    prep::CapFactory cf;
    if (cap.rfind("mock:", 0) == 0)
        cf = [text = cap.substr(5)] { return std::make_unique<prep::FixedCaptioner>(text); };
    else if (cap.rfind("http", 0) == 0)
        cf = [cap] { return std::make_unique<prep::HttpCaptionClient>(cap); };
    else
        throw InvalidInput("--cap-endpoint must be mock:<text> or an http endpoint");

    const auto s = prep::build_training_set(detections, sf, cf, o);
    ctx.out << "prep: " << s.added << " added, " << s.skipped << " already done, " << s.quarantined.size()
            << " quarantined, manifest holds " << s.manifest.size() << "\n";
    ctx.outputs["manifest"] = (o.out_dir / "manifest.jsonl").string();
    ctx.outputs["records"] = s.manifest.size();
    ctx.outputs["quarantined"] = s.quarantined.size();
    return kOk;
}

int cmd_train(Params& p, Context& ctx, const PipelineConfig& cfg) {
    const fs::path out = p.required_path("out");
    const int T = static_cast<int>(p.integer("timesteps", 100));
    const std::string sched_kind = p.str("noise_schedule", "linear");
    if (sched_kind != "linear" && sched_kind != "cosine") throw InvalidInput("--noise-schedule must be linear or cosine");
    const auto schedule = sched_kind == "linear" ? diffusion::make_linear_schedule(T) : diffusion::make_cosine_schedule(T);

    // Desk-scale defaults; the stage block and flags override them.
    json tj = {{"learning_rate", 3e-3}, {"batch_size", 8}, {"max_iters", 300}, {"checkpoint_every", 100}};
    tj.update(cfg.stage("train"));
    train::TrainConfig tc = train::TrainConfig::from_json(tj);
    tc.learning_rate = p.number("learning_rate", tc.learning_rate);
    tc.batch_size = static_cast<int>(p.integer("batch_size", tc.batch_size));
    tc.max_iters = static_cast<int>(p.integer("max_iters", tc.max_iters));
    tc.checkpoint_every = static_cast<int>(p.integer("checkpoint_every", tc.checkpoint_every));
    tc.mrd.omega = p.number("omega", tc.mrd.omega);
    tc.seed = p.seed();
    tc.validate();
    p.effective["train_config"] = tc.to_json();

    toy::ToyStack stack(diffusion::ToyUNetConfig{.max_t = T});
    toy::PretrainConfig pc;
    pc.steps = static_cast<int>(p.integer("pretrain_steps", pc.steps));
    const fs::path backbone_path = p.opt_path("backbone").value_or(out / "backbone.json");
    ensure_backbone(stack, backbone_path, schedule, pc, ctx.out);
    auto bb = stack.backbone();

    std::vector<train::PreparedSample> data;
    if (auto manifest_path = p.opt_path("manifest")) {
        const auto m = corpus::read_manifest(*manifest_path);
        for (const auto& r : m.records) {
            if (!r.mask_path) continue;
            const auto img = resize_area(load_rgb(m.resolve(r.image_path)), toy::kImageSize, toy::kImageSize);
            const auto mask = corpus::load_mask(m.resolve(*r.mask_path)).resized_nearest(toy::kImageSize, toy::kImageSize);
            data.push_back(train::prepare_sample(r.id, img, mask, r.caption, bb));
        }
    } else {
        const long n = p.integer("blobs", 64);
        const auto scenes = toy::make_blob_dataset(static_cast<std::size_t>(n), derive_seed(tc.seed, "blobs"));
        for (std::size_t i = 0; i < scenes.size(); ++i)
            data.push_back(train::prepare_sample("blob" + std::to_string(i), scenes[i].image, scenes[i].mask,
                                                 scenes[i].caption, bb));
    }
    if (data.empty()) throw InvalidInput("no training samples with masks");

    injection::InjectionSchedule inj = injection::default_schedule();
    if (cfg.stage("train").contains("injection")) inj = injection::InjectionSchedule::from_json(cfg.stage("train")["injection"]);
    injection::AdapterConfig ac;
    if (cfg.stage("train").contains("adapter")) ac = injection::AdapterConfig::from_json(cfg.stage("train")["adapter"]);
    const std::size_t lat = toy::kImageSize / toy::kLatentFactor;
    ac.latent_h = ac.latent_w = lat;
    injection::AdapterSet adapters(inj, stack.unet.tap_points(lat, lat), ac);
    train::Trainer trainer(bb, adapters, schedule, tc);

    train::RunOptions ro;
    ro.out_dir = out;
    ro.restart = p.boolean("restart", false);
    const int every = std::max(1, tc.max_iters / 10);
    ro.on_step = [&](const train::StepResult& s) {
        if (s.iter % every == 0) ctx.out << "iter " << s.iter << " loss " << s.loss << "\n" << std::flush;
    };
    const auto summary = train::run_training(trainer, data, ro);
    ctx.out << "train: iterations " << summary.start_iter << " -> " << summary.end_iter << ", checkpoint "
            << summary.last_checkpoint.string() << "\n";
    ctx.outputs["checkpoint"] = summary.last_checkpoint.string();
    ctx.outputs["backbone"] = backbone_path.string();
    ctx.outputs["iterations"] = summary.end_iter;
    return kOk;
}

int cmd_generate(Params& p, Context& ctx) {
    const auto bg_path = p.required_path("backgrounds");
    const auto masks_path = p.required_path("masks");
    const fs::path out = p.required_path("out");
    gen::GenConfig gc;
    gc.guidance_scale = p.number("guidance_scale", gc.guidance_scale);
    gc.steps = static_cast<int>(p.integer("steps", gc.steps));
    gc.masks_per_background = static_cast<int>(p.integer("masks_per_background", gc.masks_per_background));
    gc.samples_per_pair = static_cast<int>(p.integer("samples_per_pair", gc.samples_per_pair));
    gc.output_resolution = static_cast<std::size_t>(p.integer("output_resolution", 0));
    gc.seed = p.seed();
    gc.validate();

    const auto backgrounds = corpus::read_manifest(bg_path);
    const auto pool = load_mask_pool(masks_path);
    const auto pairs = gen::pair_masks(backgrounds, pool, gc, gen::file_dims(backgrounds));

    const std::string backend = p.str("backend", "diffusion");
    gen::GenerateSummary s;
    if (backend == "mock") {
        s = gen::generate_batch(pairs, gen::MockBackend{}, gc, out);
    } else if (backend == "diffusion") {
        const auto ckpt = p.required_path("checkpoint");
        const auto backbone_path = p.opt_path("backbone").value_or(ckpt.parent_path() / "backbone.json");
        const auto header = train::read_checkpoint(ckpt);
        const diffusion::NoiseSchedule schedule = diffusion::NoiseSchedule::from_json(header.at("noise_schedule").dump());
        toy::ToyStack stack(diffusion::ToyUNetConfig{.max_t = schedule.steps()});
        toy::load_backbone(stack, backbone_path);
        auto loaded = train::load_adapters(ckpt, stack.unet);
        auto adapted = injection::attach_adapters(stack.unet, loaded.adapters);
        gen::DiffusionBackend db(stack.backbone(), adapted, loaded.schedule, gc.guidance_scale, gc.steps,
                                 toy::kImageSize);
        s = gen::generate_batch(pairs, db, gc, out);
    } else {
        throw InvalidInput("--backend must be diffusion or mock");
    }
    ctx.out << "generate: " << s.manifest.size() << " samples (" << s.reused << " reused), " << s.quarantined.size()
            << " quarantined\n";
    ctx.outputs["manifest"] = (out / "manifest.jsonl").string();
    ctx.outputs["records"] = s.manifest.size();
    return kOk;
}

int cmd_score(Params& p, Context& ctx) {
    const auto manifest = corpus::read_manifest(p.required_path("manifest"));
    const fs::path out = p.required_path("out");
    curation::ScoreOptions o;
    o.workers = p.workers();
    o.retries = static_cast<int>(p.integer("retries", o.retries));
    o.prompt = p.str("prompt", o.prompt);
    o.partial_path = out.string() + ".partial";
    const std::string scorer = p.str("scorer", "mock");
    curation::ScorerFactory f;
    if (scorer == "mock")
        f = [] { return std::make_unique<curation::MockScorer>(); };
    else if (scorer.rfind("http", 0) == 0)
        f = [scorer] { return std::make_unique<curation::HttpScorer>(scorer); };
    else
        throw InvalidInput("--scorer must be mock or an http endpoint");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    const auto records = curation::score_candidates(manifest, f, o);
    curation::write_scores(records, out);
    fs::remove(o.partial_path);
    std::size_t quarantined = 0;
    for (const auto& r : records) quarantined += r.quarantined;
    ctx.out << "score: " << records.size() << " records, " << quarantined << " quarantined\n";
    ctx.outputs["scores"] = out.string();
    ctx.outputs["records"] = records.size();
    return kOk;
}

int cmd_select(Params& p, Context& ctx) {
    const auto scores = curation::read_scores(p.required_path("scores"));
    const auto manifest = corpus::read_manifest(p.required_path("manifest"));
    const fs::path out = p.required_path("out");
    const double fraction = p.number("fraction", 0.5);
    auto selected = curation::select_manifest(scores, manifest, fraction);
    // Paths stay valid from the new location.
    for (auto& r : selected.records) {
        r.image_path = fs::absolute(manifest.resolve(r.image_path)).lexically_normal().string();
        if (r.mask_path) r.mask_path = fs::absolute(manifest.resolve(*r.mask_path)).lexically_normal().string();
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    corpus::write_manifest(selected, out);
    ctx.out << "select: kept " << selected.size() << " of " << scores.size() << "\n";
    ctx.outputs["manifest"] = out.string();
    ctx.outputs["records"] = selected.size();

    if (auto ann = p.opt_path("annotations")) {
        const fs::path ft = p.opt_path("finetune_out").value_or(out.parent_path() / "finetune.jsonl");
        const auto s = curation::assemble_finetune_set(curation::read_scores(*ann), manifest, ft);
        ctx.out << "finetune set: " << s.written << " lines, " << s.dangling.size() << " dangling, "
                << s.invalid.size() << " invalid, " << s.conflicts.size() << " conflicts\n";
        ctx.outputs["finetune"] = ft.string();
    }
    return kOk;
}

int cmd_export(Params& p, Context& ctx) {
    auto synthetic = corpus::read_manifest(p.required_path("manifest"));
    const fs::path out = p.required_path("out");
    corpus::Manifest mixed = synthetic;
    if (auto real_path = p.opt_path("real")) {
        const auto real = corpus::read_manifest(*real_path);
        const auto rs = corpus::parse_ratio(p.str("real_synth", "1:1"));
        const auto pn = corpus::parse_ratio(p.str("pos_neg", "1:1"));
        std::optional<std::size_t> target;
        if (p.raw("target")) target = static_cast<std::size_t>(p.integer("target", 0));
        mixed = corpus::mix_datasets(real, synthetic, rs, pn, p.seed(), target);
    }
    for (auto& r : mixed.records) {
        r.image_path = fs::absolute(mixed.resolve(r.image_path)).lexically_normal().string();
        if (r.mask_path) r.mask_path = fs::absolute(mixed.resolve(*r.mask_path)).lexically_normal().string();
    }
    mixed.base_dir.clear();
    corpus::ExportOptions eo;
    eo.class_name = p.str("class_name", eo.class_name);
    const auto s = corpus::export_yolo(mixed, out, eo);
    corpus::write_manifest(mixed, out / "manifest.jsonl");
    ctx.out << "export: " << s.images << " images (" << s.positives << " with smoke, " << s.negatives
            << " without)\n";
    for (const auto& id : s.empty_masks) log_warn("mask without foreground: " + id);
    ctx.outputs["images"] = s.images;
    ctx.outputs["positives"] = s.positives;
    ctx.outputs["negatives"] = s.negatives;
    return kOk;
}

int cmd_eval(Params& p, Context& ctx) {
    const auto generated = corpus::read_manifest(p.required_path("generated"));
    const auto reference = corpus::read_manifest(p.required_path("reference"));
    const fs::path out = p.required_path("out");
    eval::EvalOptions eo;
    eo.masked_region = p.boolean("masked_region", false);
    const auto report = eval::evaluate_pairs(generated, reference, eo);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_text_atomic(out, report.to_json().dump(2) + "\n");
    auto csv = out;
    csv.replace_extension(".csv");
    write_text_atomic(csv, report.to_csv());
    ctx.out << "eval: " << report.rows.size() << " pairs, " << report.excluded.size() << " excluded\n";
    ctx.outputs["report"] = out.string();
    return kOk;
}

int cmd_annotate(Params& p, Context& ctx) {
    const auto manifest = corpus::read_manifest(p.required_path("manifest"));
    const fs::path store = p.opt_path("store").value_or(manifest.base_dir / "annotations.jsonl");
    const std::string host = p.str("host", "127.0.0.1");
    const int port = static_cast<int>(p.integer("port", 8080));
    const fs::path static_dir = p.opt_path("static_dir").value_or(fs::path{});
    annotate::AnnotationServer server(manifest, store, static_dir);
    const int bound = server.bind(host, port);
    ctx.out << "listening on http://" << host << ":" << bound << "\n" << std::flush;
    g_server = &server;
    auto prev_int = std::signal(SIGINT, on_signal);
    auto prev_term = std::signal(SIGTERM, on_signal);
    server.listen();
    std::signal(SIGINT, prev_int);
    std::signal(SIGTERM, prev_term);
    g_server = nullptr;
    ctx.out << "annotate: " << server.scored() << "/" << server.total() << " scored\n";
    ctx.outputs["store"] = store.string();
    ctx.outputs["scored"] = server.scored();
    return kOk;
}

int cmd_validate(const PipelineConfig& cfg, Context& ctx) {
    const auto problems = validate_config(cfg);
    for (const auto& msg : problems) ctx.err << "config: " << msg << "\n";
    if (problems.empty()) ctx.out << "config ok\n";
    ctx.outputs["problems"] = problems;
    return problems.empty() ? kOk : kUserError;
}

int exit_code_for(const Error& e) {
    static const std::set<std::string> user = {"invalid-input", "invalid-config", "invalid-step",
                                               "no-foreground", "capacity",       "checkpoint"};
    return user.count(e.kind()) ? kUserError : kInternalError;
}

void write_run_record(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
                      const ordered_json& effective, const ordered_json& outputs, const std::string& started,
                      double seconds, int code, const std::string& error, std::ostream& err) {
    static std::atomic<int> counter{0};
    ordered_json r;
    r["command"] = command;
    r["args"] = args;
    r["config"] = effective;
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(effective.dump())));
    r["config_hash"] = hash;
    r["git_describe"] = git_describe();
    r["started"] = started;
    r["seconds"] = seconds;
    r["exit_code"] = code;
    if (!error.empty()) r["error"] = error;
    r["outputs"] = outputs;
    try {
        fs::create_directories(dir);
        const auto name = command + "-" + utc_stamp("%Y%m%dT%H%M%SZ") + "-" + std::to_string(::getpid()) + "-" +
                          std::to_string(counter++) + ".json";
        write_text_atomic(dir / name, r.dump(2) + "\n");
    } catch (const std::exception& e) {
        err << "warning: could not write run record: " << e.what() << "\n";
    }
}

struct CommandDef {
    const char* name;
    const char* help;
    std::vector<std::pair<const char*, const char*>> options;  // name, help
    std::vector<std::pair<const char*, const char*>> flags;
    std::vector<std::pair<const char*, const char*>> lists;
};

const std::vector<CommandDef>& command_defs() {
    static const std::vector<CommandDef> s = {
        {"prep", "Segment and caption an annotated detection set into training triples",
         {{"detections", "detection manifest JSONL {id, image_path, bboxes}"},
          {"out", "output directory"},
          {"seg-endpoint", "mock-box or http endpoint"},
          {"cap-endpoint", "mock:<text> or http endpoint"},
          {"max-tokens", "caption token budget (20)"},
          {"threshold", "mask binarization threshold (128)"},
          {"retries", "transport retries per call (2)"},
          {"val-fraction", "share of samples put in the val split (0.1)"},
          {"limit", "process at most this many images"}},
         {},
         {{"stop-pattern", "regex removed from captions; repeatable"}}},
        {"train", "Train injection adapters on top of the toy backbone",
         {{"manifest", "training manifest; synthetic blobs when absent"},
          {"blobs", "number of synthetic blob samples (64)"},
          {"out", "run directory for checkpoints and metrics"},
          {"backbone", "backbone weights; pretrained and saved when missing"},
          {"pretrain-steps", "backbone pretraining steps (1500)"},
          {"timesteps", "diffusion steps T (100)"},
          {"noise-schedule", "linear or cosine"},
          {"max-iters", "adapter iterations (300)"},
          {"learning-rate", "AdamW learning rate (3e-3)"},
          {"batch-size", "batch size (8)"},
          {"checkpoint-every", "checkpoint interval (100)"},
          {"omega", "MRD weight (0.4)"}},
         {{"restart", "ignore existing checkpoints"}},
         {}},
        {"generate", "Inpaint smoke into backgrounds",
         {{"backgrounds", "background manifest"},
          {"masks", "mask directory or manifest with masks"},
          {"out", "output directory"},
          {"backend", "diffusion or mock"},
          {"checkpoint|ckpt", "adapter checkpoint"},
          {"backbone", "backbone weights (next to the checkpoint by default)"},
          {"guidance-scale", "classifier-free guidance (7.5)"},
          {"steps", "sampling steps (50)"},
          {"masks-per-background", "masks per background (2)"},
          {"samples-per-pair", "samples per pair (3)"},
          {"output-resolution", "square output size; 0 keeps background size"}},
         {},
         {}},
        {"score", "Score generated samples",
         {{"manifest", "generated manifest"},
          {"out", "scores JSONL"},
          {"scorer", "mock or http endpoint"},
          {"retries", "retries per sample (2)"},
          {"prompt", "scoring prompt"}},
         {},
         {}},
        {"select", "Keep the top-scoring fraction",
         {{"scores", "scores JSONL"},
          {"manifest", "generated manifest"},
          {"out", "selected manifest path"},
          {"fraction", "kept fraction (0.5)"},
          {"annotations", "human scores; also writes a fine-tune set"},
          {"finetune-out", "fine-tune JSONL path"}},
         {},
         {}},
        {"export", "Mix with real data and write a YOLO dataset",
         {{"manifest", "synthetic manifest"},
          {"real", "real manifest to mix in"},
          {"real-synth", "real:synthetic ratio (1:1)"},
          {"pos-neg", "positive:negative ratio (1:1)"},
          {"target", "total records"},
          {"class-name", "class name (smoke)"},
          {"out", "export directory"}},
         {},
         {}},
        {"eval", "Compare generated images with references",
         {{"generated", "generated manifest"}, {"reference", "reference manifest"}, {"out", "report JSON path"}},
         {{"masked-region", "restrict metrics to the mask"}},
         {}},
        {"annotate-serve", "Serve the human scoring API",
         {{"manifest", "manifest to annotate"},
          {"store", "annotations JSONL"},
          {"host", "bind address (127.0.0.1)"},
          {"port", "port (8080, 0 picks one)"},
          {"static-dir", "directory served at /"}},
         {},
         {}},
        {"validate", "Check a pipeline config", {}, {}, {}},
    };
    return s;
}

std::string key_of(const char* name) {
    std::string k = name;
    k = k.substr(0, k.find('|'));
    for (auto& c : k)
        if (c == '-') c = '_';
    return k;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Synthetic smoke dataset factory", "smokegen"};
    app.require_subcommand(1);
    std::string config_path;
    std::string runs_dir_flag;
    std::map<std::string, std::map<std::string, std::string>> flags;
    std::map<std::string, std::map<std::string, std::vector<std::string>>> lists;
    std::map<std::string, std::map<std::string, bool>> bools;

    for (const auto& def : command_defs()) {
        auto* sub = app.add_subcommand(def.name, def.help);
        auto& f = flags[def.name];
        sub->add_option("--config", config_path, "pipeline config JSON");
        sub->add_option("--runs-dir", runs_dir_flag, "where run records go (runs)");
        if (std::string(def.name) != "validate") {
            sub->add_option("--seed", f["seed"], "global seed");
            sub->add_option("--workers", f["workers"], "worker threads");
        }
        for (const auto& [name, help] : def.options) {
            std::string names = std::string("--") + name;
            if (auto bar = names.find('|'); bar != std::string::npos) names.replace(bar, 1, ",--");
            sub->add_option(names, f[key_of(name)], help);
        }
        for (const auto& [name, help] : def.flags) sub->add_flag(std::string("--") + name, bools[def.name][key_of(name)], help);
        for (const auto& [name, help] : def.lists)
            sub->add_option(std::string("--") + name, lists[def.name][key_of(name) + "s"], help);
    }

    if (!args.empty() && !args[0].empty() && args[0][0] != '-' && !app.get_subcommand_no_throw(args[0])) {
        err << "error: unknown subcommand '" << args[0] << "'\n" << app.help();
        return kUserError;
    }
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return kUserError;
    }
    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    if (command == "validate" && config_path.empty()) {
        err << "error: missing required flag --config\n";
        return kUserError;
    }

    const std::string started = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
    const auto t0 = std::chrono::steady_clock::now();
    Context ctx{out, err};
    ordered_json effective;
    std::string error_text;
    int code = kOk;
    fs::path runs_dir = runs_dir_flag.empty() ? fs::path("runs") : fs::path(runs_dir_flag);

    PipelineConfig cfg;
    std::optional<Params> params;
    try {
        if (!config_path.empty()) {
            cfg = PipelineConfig::load(config_path);
            const auto& g = cfg.stage("global");
            if (runs_dir_flag.empty() && g.contains("runs_dir")) runs_dir = cfg.resolve(g["runs_dir"].get<std::string>());
        }
        const std::string stage = command == "annotate-serve" ? "annotate" : command;
        Params& p = params.emplace(stage, cfg);
        p.flags = flags[command];
        p.lists = lists[command];
        for (const auto& [k, v] : bools[command])
            if (v) p.flags[k] = "true";
        if (!config_path.empty()) p.effective["config_file"] = fs::absolute(config_path).string();

        if (command == "prep") code = cmd_prep(p, ctx);
        else if (command == "train") code = cmd_train(p, ctx, cfg);
        else if (command == "generate") code = cmd_generate(p, ctx);
        else if (command == "score") code = cmd_score(p, ctx);
        else if (command == "select") code = cmd_select(p, ctx);
        else if (command == "export") code = cmd_export(p, ctx);
        else if (command == "eval") code = cmd_eval(p, ctx);
        else if (command == "annotate-serve") code = cmd_annotate(p, ctx);
        else if (command == "validate") code = cmd_validate(cfg, ctx);
    } catch (const Error& e) {
        code = exit_code_for(e);
        error_text = e.what();
    } catch (const fs::filesystem_error& e) {
        code = kUserError;
        error_text = e.what();
    } catch (const nlohmann::json::exception& e) {
        code = kUserError;
        error_text = std::string("config: ") + e.what();
    } catch (const std::exception& e) {
        code = kInternalError;
        error_text = std::string("internal error: ") + e.what();
    }
    if (params) effective = params->effective;
    if (!error_text.empty()) err << "error: " << error_text << "\n";
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_record(runs_dir, command, args, effective, ctx.outputs, started, seconds, code, error_text, err);
    return code;
}

}  // namespace smokegen::cli
