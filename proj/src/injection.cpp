#include "smokegen/injection.hpp"

#include <cmath>
#include <set>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::injection {

std::string to_string(Role r) {
    switch (r) {
        case Role::none: return "none";
        case Role::mask: return "mask";
        case Role::masked_image: return "masked_image";
        case Role::both: return "both";
    }
    return "none";
}

Role parse_role(const std::string& s) {
    if (s == "none") return Role::none;
    if (s == "mask") return Role::mask;
    if (s == "masked_image") return Role::masked_image;
    if (s == "both") return Role::both;
    throw InvalidConfig("unknown injection role '" + s + "'");
}

Role InjectionSchedule::at(int tap) const {
    auto it = assignment.find(tap);
    if (it == assignment.end()) throw InvalidConfig("tap " + std::to_string(tap) + " missing from schedule");
    return it->second;
}

bool InjectionSchedule::any_active() const {
    for (const auto& [_, r] : assignment)
        if (r != Role::none) return true;
    return false;
}

void InjectionSchedule::validate(const std::vector<int>& registry, bool require_active) const {
    std::set<int> known(registry.begin(), registry.end());
    for (const auto& [id, _] : assignment)
        if (!known.count(id)) throw InvalidConfig("schedule names unknown tap " + std::to_string(id));
    for (int id : registry)
        if (!assignment.count(id)) throw InvalidConfig("schedule has no entry for tap " + std::to_string(id));
    if (require_active && !any_active()) throw InvalidConfig("schedule injects nothing");
}

nlohmann::ordered_json InjectionSchedule::to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [id, r] : assignment) j[std::to_string(id)] = to_string(r);
    return j;
}

InjectionSchedule InjectionSchedule::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidConfig("schedule must be an object of tap -> role");
    InjectionSchedule s;
    for (const auto& [k, v] : j.items()) {
        int id = 0;
        try {
            std::size_t used = 0;
            id = std::stoi(k, &used);
            if (used != k.size()) throw std::invalid_argument(k);
        } catch (const std::exception&) {
            throw InvalidConfig("schedule key '" + k + "' is not a tap id");
        }
        s.assignment[id] = parse_role(v.get<std::string>());
    }
    return s;
}

InjectionSchedule default_schedule() {
    InjectionSchedule s;
    for (int i = 0; i < 9; ++i) s.assignment[i] = Role::none;
    s.assignment[0] = Role::masked_image;
    s.assignment[1] = Role::both;
    s.assignment[4] = Role::mask;
    s.assignment[7] = Role::both;
    s.assignment[8] = Role::masked_image;
    return s;
}

InjectionSchedule all_none_schedule(int taps) {
    InjectionSchedule s;
    for (int i = 0; i < taps; ++i) s.assignment[i] = Role::none;
    return s;
}

// ---- feature extraction ------------------------------------------------

ToyExtractor::ToyExtractor(std::size_t native, std::size_t hidden, std::size_t out, std::uint64_t seed)
    : native_(native), hidden_(hidden), out_(out) {
    if (native % 4 || native == 0) throw InvalidConfig("toy extractor native size must be a positive multiple of 4");
    Rng rng(seed);
    w1_ = random_normal({hidden, 3, 2, 2}, 1.0 / std::sqrt(12.0), rng);
    b1_ = random_normal({hidden}, 0.5, rng);
    w2_ = random_normal({out, hidden, 2, 2}, 1.0 / std::sqrt(4.0 * hidden), rng);
    b2_ = random_normal({out}, 0.5, rng);
}

namespace {

Tensor conv2x2_stride2_silu(const Tensor& in, const Tensor& w, const Tensor& b) {
    const std::size_t ci = in.dim(0), h = in.dim(1) / 2, wd = in.dim(2) / 2, co = w.dim(0);
    Tensor out({co, h, wd});
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < wd; ++x) {
                double s = b[o];
                for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx)
                            s += w[((o * ci + c) * 2 + dy) * 2 + dx] * in.at(c, 2 * y + dy, 2 * x + dx);
                out.at(o, y, x) = s / (1.0 + std::exp(-s));
            }
    return out;
}

}  // namespace

Tensor ToyExtractor::extract(const RgbImage& image) const {
    if (image.width != native_ || image.height != native_)
        throw InvalidInput("toy extractor expects " + std::to_string(native_) + "x" + std::to_string(native_) + " input");
    Tensor in({3, native_, native_});
    for (std::size_t y = 0; y < native_; ++y)
        for (std::size_t x = 0; x < native_; ++x)
            for (std::size_t c = 0; c < 3; ++c) in.at(c, y, x) = image.at(y, x, c) / 255.0;
    return conv2x2_stride2_silu(conv2x2_stride2_silu(in, w1_, b1_), w2_, b2_);
}

ExtractorGeometry resnet50_prepool_geometry(std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw InvalidInput("extractor input must be non-empty");
    auto down = [](std::size_t n, std::size_t k, std::size_t s, std::size_t p) { return (n + 2 * p - k) / s + 1; };
    auto chain = [&](std::size_t n) {
        n = down(n, 7, 2, 3);  // stem convolution
        n = down(n, 3, 2, 1);  // stem max-pool
        for (int stage = 0; stage < 3; ++stage) n = down(n, 3, 2, 1);  // stages 2..4 stride 2
        return n;
    };
    return {2048, chain(height), chain(width)};
}

RgbImage apply_mask(const RgbImage& image, const BinaryMask& mask) {
    if (image.width != mask.width() || image.height != mask.height())
        throw InvalidInput("apply_mask: image and mask dimensions differ");
    RgbImage out = image;
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x)
            if (mask.at(y, x))
                for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = 0;
    return out;
}

FeatureBundle extract_features(const BinaryMask& mask, const RgbImage& masked_image, const FeatureExtractor& extractor) {
    if (mask.empty() || masked_image.empty()) throw InvalidInput("extract_features: empty input");
    const std::size_t nw = extractor.native_width(), nh = extractor.native_height();
    const BinaryMask small = mask.resized_nearest(nw, nh);
    RgbImage mask_rgb(nw, nh);
    for (std::size_t y = 0; y < nh; ++y)
        for (std::size_t x = 0; x < nw; ++x)
            for (std::size_t c = 0; c < 3; ++c) mask_rgb.at(y, x, c) = small.at(y, x) ? 255 : 0;
    const RgbImage img = (masked_image.width == nw && masked_image.height == nh) ? masked_image
                                                                                 : resize_area(masked_image, nw, nh);
    FeatureBundle out{extractor.extract(mask_rgb), extractor.extract(img)};
    if (!out.mask_features.all_finite() || !out.masked_image_features.all_finite())
        throw Error("non-finite", "feature extractor produced non-finite values");
    return out;
}

// ---- attention ---------------------------------------------------------

ag::Var project_features(const Tensor& features, const ag::Var& weight, const ag::Var& bias) {
    if (features.rank() != 3) throw InvalidInput("project_features: expected (C, H, W) features");
    if (weight.value().rank() != 2 || weight.rows() != features.dim(0))
        throw InvalidConfig("projection expects " + std::to_string(weight.value().rank() == 2 ? weight.rows() : 0) +
                            " input channels, features have " + std::to_string(features.dim(0)));
    return linear(ag::Var::constant(grid_to_tokens(features)), weight, bias);
}

namespace {

std::size_t check_stream(const ag::Var& x, const ag::Var& f, const ag::Var& query, const StreamParams& s, int heads) {
    const std::size_t d = query.cols();
    if (d == 0) throw InvalidConfig("attention dim must be positive");
    if (heads < 1 || d % static_cast<std::size_t>(heads)) throw InvalidConfig("attention dim must divide into heads");
    if (query.rows() != x.cols()) throw InvalidConfig("query projection does not match tap width");
    if (s.key.rows() != f.cols() || s.value.rows() != f.cols()) throw InvalidConfig("key/value projection does not match stream width");
    if (s.key.cols() != d || s.value.cols() != d) throw InvalidConfig("key/value projections must map to the attention dim");
    return d;
}

}  // namespace

std::vector<ag::Var> attention_weights(const ag::Var& x, const ag::Var& f, const ag::Var& query,
                                       const StreamParams& stream, int heads) {
    const std::size_t d = check_stream(x, f, query, stream, heads);
    const std::size_t dh = d / static_cast<std::size_t>(heads);
    auto q = ag::matmul(x, query);
    auto k = ag::matmul(f, stream.key);
    std::vector<ag::Var> out;
    for (int h = 0; h < heads; ++h) {
        const std::size_t b = static_cast<std::size_t>(h) * dh;
        auto qh = heads == 1 ? q : ag::slice_cols(q, b, b + dh);
        auto kh = heads == 1 ? k : ag::slice_cols(k, b, b + dh);
        auto s = ag::scale(ag::matmul(qh, ag::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        out.push_back(ag::softmax_rows(s));
    }
    return out;
}

ag::Var attend(const ag::Var& x, const ag::Var& f, const ag::Var& query, const StreamParams& stream, int heads) {
    const auto weights = attention_weights(x, f, query, stream, heads);
    const std::size_t dh = query.cols() / static_cast<std::size_t>(heads);
    auto v = ag::matmul(f, stream.value);
    ag::Var z;
    for (int h = 0; h < heads; ++h) {
        const std::size_t b = static_cast<std::size_t>(h) * dh;
        auto zh = ag::matmul(weights[static_cast<std::size_t>(h)], heads == 1 ? v : ag::slice_cols(v, b, b + dh));
        z = z.defined() ? ag::concat_cols(z, zh) : zh;
    }
    return z;
}

ag::Var apply_mlp(const ag::Var& z, const FuseMlp& mlp) {
    if (mlp.w0.rows() != z.cols()) throw InvalidConfig("fuse mlp input width does not match attention output");
    return linear(ag::silu(linear(z, mlp.w0, mlp.b0)), mlp.w1, mlp.b1);
}

ag::Var cross_attend(const ag::Var& x, const ag::Var& f, const ag::Var& query, const StreamParams& stream,
                     const FuseMlp& mlp, int heads) {
    auto out = apply_mlp(attend(x, f, query, stream, heads), mlp);
    if (out.shape() != x.shape()) throw InvalidConfig("fuse mlp must map back to the tap width");
    return x + out;
}

ag::Var joint_cross_attend(const ag::Var& x, const ag::Var& f_mask, const ag::Var& f_masked, const ag::Var& query,
                           const StreamParams& p_mask, const StreamParams& p_masked, const FuseMlp& mlp, int heads) {
    if (p_mask.key.cols() != p_masked.key.cols() || f_mask.cols() != f_masked.cols())
        throw InvalidConfig("joint cross-attention streams differ in width");
    auto z1 = attend(x, f_mask, query, p_mask, heads);
    auto z2 = attend(x, f_masked, query, p_masked, heads);
    auto out = apply_mlp(ag::concat_cols(z1, z2), mlp);
    if (out.shape() != x.shape()) throw InvalidConfig("fuse mlp must map back to the tap width");
    return x + out;
}

// ---- adapters ----------------------------------------------------------

nlohmann::ordered_json AdapterConfig::to_json() const {
    return {{"attention_dim", attention_dim}, {"hidden", hidden},         {"heads", heads},
            {"init_std", init_std},           {"zero_final", zero_final}, {"latent_h", latent_h},
            {"latent_w", latent_w},           {"feature_channels", feature_channels}, {"seed", seed}};
}

AdapterConfig AdapterConfig::from_json(const nlohmann::json& j) {
    AdapterConfig c;
    c.attention_dim = j.value("attention_dim", c.attention_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.init_std = j.value("init_std", c.init_std);
    c.zero_final = j.value("zero_final", c.zero_final);
    c.latent_h = j.value("latent_h", c.latent_h);
    c.latent_w = j.value("latent_w", c.latent_w);
    c.feature_channels = j.value("feature_channels", c.feature_channels);
    c.seed = j.value("seed", c.seed);
    return c;
}

namespace {

std::string pname(int tap, const std::string& stream, const std::string& matrix) {
    return "tap" + std::to_string(tap) + "." + stream + "." + matrix;
}

bool uses_mask(Role r) { return r == Role::mask || r == Role::both; }
bool uses_masked_image(Role r) { return r == Role::masked_image || r == Role::both; }

}  // namespace

AdapterSet::AdapterSet(InjectionSchedule schedule, const std::vector<diffusion::TapInfo>& registry, AdapterConfig cfg)
    : schedule_(std::move(schedule)), cfg_(cfg) {
    std::vector<int> ids;
    for (const auto& t : registry) {
        ids.push_back(t.id);
        taps_[t.id] = t;
    }
    schedule_.validate(ids, false);
    if (cfg_.heads < 1) throw InvalidConfig("adapter heads must be >= 1");
    if (cfg_.feature_channels == 0) throw InvalidConfig("adapter feature_channels must be positive");
    for (const auto& [id, role] : schedule_.assignment) {
        if (role == Role::none) continue;
        Rng rng(derive_seed(cfg_.seed, "tap" + std::to_string(id)));
        const std::size_t c2 = taps_.at(id).channels;
        const std::size_t d = cfg_.attention_dim ? cfg_.attention_dim : c2;
        const std::size_t hidden = cfg_.hidden ? cfg_.hidden : c2;
        if (d % static_cast<std::size_t>(cfg_.heads)) throw InvalidConfig("attention dim must divide into heads");
        auto init = [&](std::size_t in, std::size_t out) {
            const double sd = cfg_.init_std > 0 ? cfg_.init_std : 1.0 / std::sqrt(static_cast<double>(in));
            return random_normal({in, out}, sd, rng);
        };
        std::size_t streams = 0;
        for (const std::string stream : {"mask", "masked_image"}) {
            if ((stream == "mask" && !uses_mask(role)) || (stream == "masked_image" && !uses_masked_image(role))) continue;
            ++streams;
            params_.add(pname(id, stream, "proj_weight"), init(cfg_.feature_channels, c2), true);
            params_.add(pname(id, stream, "proj_bias"), Tensor({1, c2}), true);
            params_.add(pname(id, stream, "key"), init(c2, d), true);
            params_.add(pname(id, stream, "value"), init(c2, d), true);
        }
        params_.add(pname(id, "query", "weight"), init(c2, d), true);
        params_.add(pname(id, "fuse", "w0"), init(streams * d, hidden), true);
        params_.add(pname(id, "fuse", "b0"), Tensor({1, hidden}), true);
        params_.add(pname(id, "fuse", "w1"), cfg_.zero_final ? Tensor({hidden, c2}) : init(hidden, c2), true);
        params_.add(pname(id, "fuse", "b1"), Tensor({1, c2}), true);
    }
}

const diffusion::TapInfo& AdapterSet::tap(int id) const {
    auto it = taps_.find(id);
    if (it == taps_.end()) throw InvalidConfig("unknown tap " + std::to_string(id));
    return it->second;
}

const ag::Var& AdapterSet::p(int tap, const std::string& stream, const std::string& matrix) const {
    return params_.get(pname(tap, stream, matrix));
}

ag::Var AdapterSet::stream_tokens(int tap, const std::string& stream, const Tensor& features) const {
    return project_features(features, p(tap, stream, "proj_weight"), p(tap, stream, "proj_bias"));
}

ag::Var AdapterSet::apply(const diffusion::TapInfo& info, const ag::Var& x, const SampleConditioning& cond) const {
    auto it = schedule_.assignment.find(info.id);
    if (it == schedule_.assignment.end() || it->second == Role::none) return x;
    const Role role = it->second;
    if (!cond.features) throw InvalidInput("tap " + std::to_string(info.id) + " needs extracted features");
    const FeatureBundle& fb = *cond.features;
    const FuseMlp mlp{p(info.id, "fuse", "w0"), p(info.id, "fuse", "b0"), p(info.id, "fuse", "w1"),
                      p(info.id, "fuse", "b1")};
    const auto& q = p(info.id, "query", "weight");
    auto stream = [&](const std::string& s) { return StreamParams{p(info.id, s, "key"), p(info.id, s, "value")}; };
    if (role == Role::both)
        return joint_cross_attend(x, stream_tokens(info.id, "mask", fb.mask_features),
                                  stream_tokens(info.id, "masked_image", fb.masked_image_features), q, stream("mask"),
                                  stream("masked_image"), mlp, cfg_.heads);
    const std::string s = role == Role::mask ? "mask" : "masked_image";
    const Tensor& f = role == Role::mask ? fb.mask_features : fb.masked_image_features;
    return cross_attend(x, stream_tokens(info.id, s, f), q, stream(s), mlp, cfg_.heads);
}

class AdaptedDenoiser::Hook final : public diffusion::TapHook {
public:
    Hook(const AdapterSet& a, const diffusion::TapHook* outer) : adapters_(a), outer_(outer) {}
    ag::Var at_tap(const diffusion::TapInfo& tap, const ag::Var& x, const SampleConditioning& cond) const override {
        auto y = adapters_.apply(tap, x, cond);
        return outer_ ? outer_->at_tap(tap, y, cond) : y;
    }

private:
    const AdapterSet& adapters_;
    const diffusion::TapHook* outer_;
};

AdaptedDenoiser::AdaptedDenoiser(const diffusion::Denoiser& base, const AdapterSet& adapters)
    : base_(&base), adapters_(&adapters) {}

ag::Var AdaptedDenoiser::forward(const ag::Var& x_t, int t, const SampleConditioning& cond,
                                 const diffusion::TapHook* hook) const {
    Hook h(*adapters_, hook);
    return base_->forward(x_t, t, cond, &h);
}

AdaptedDenoiser attach_adapters(const diffusion::Denoiser& base, const AdapterSet& adapters) {
    const auto& cfg = adapters.config();
    const auto registry = base.tap_points(cfg.latent_h, cfg.latent_w);
    std::vector<int> ids;
    for (const auto& t : registry) ids.push_back(t.id);
    adapters.schedule().validate(ids, false);
    for (const auto& t : registry) {
        if (adapters.schedule().at(t.id) == Role::none) continue;
        if (adapters.tap(t.id).channels != t.channels)
            throw InvalidConfig("adapter for tap " + std::to_string(t.id) + " was built for a different channel width");
    }
    return AdaptedDenoiser(base, adapters);
}

// ---- serialization -----------------------------------------------------

nlohmann::ordered_json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", t.storage()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
    auto shape = j.at("shape").get<Shape>();
    auto data = j.at("data").get<std::vector<double>>();
    if (shape_numel(shape) != data.size()) throw CheckpointError("tensor data does not match its shape");
    return Tensor(std::move(shape), std::move(data));
}

nlohmann::ordered_json adapters_to_json(const AdapterSet& adapters) {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["schedule"] = adapters.schedule().to_json();
    j["config"] = adapters.config().to_json();
    nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
    for (const auto& [name, v] : adapters.params()) tensors[name] = tensor_to_json(v.value());
    j["tensors"] = std::move(tensors);
    return j;
}

AdapterSet adapters_from_json(const nlohmann::json& j, const diffusion::Denoiser& base) {
    try {
        if (!j.contains("version")) throw CheckpointError("adapter archive has no version field");
        if (j.at("version").get<int>() != 1)
            throw CheckpointError("unsupported adapter archive version " + j.at("version").dump());
        const auto schedule = InjectionSchedule::from_json(j.at("schedule"));
        const auto cfg = AdapterConfig::from_json(j.at("config"));
        AdapterSet set(schedule, base.tap_points(cfg.latent_h, cfg.latent_w), cfg);
        std::map<std::string, Tensor> values;
        for (const auto& [name, t] : j.at("tensors").items()) values.emplace(name, tensor_from_json(t));
        if (values.size() != set.params().size())
            throw CheckpointError("adapter archive holds " + std::to_string(values.size()) + " tensors, expected " +
                                  std::to_string(set.params().size()));
        set.params().load(values);
        return set;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed adapter archive: ") + e.what());
    } catch (const InvalidConfig& e) {
        throw CheckpointError(std::string("adapter archive does not fit the backbone: ") + e.what());
    }
}

}  // namespace smokegen::injection
