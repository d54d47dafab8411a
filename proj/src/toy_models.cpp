#include "smokegen/toy_models.hpp"

#include <cmath>

#include "smokegen/error.hpp"
#include "smokegen/util.hpp"

namespace smokegen::diffusion {

ToyTextEncoder::ToyTextEncoder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim == 0) throw InvalidConfig("text encoder dim must be positive");
}

Tensor ToyTextEncoder::embed(const std::string& prompt) const {
    auto words = split_words(to_lower(prompt));
    if (words.empty()) words.push_back("<|empty|>");
    Tensor out({words.size(), dim_});
    const double s = 1.0 / std::sqrt(static_cast<double>(dim_));
    for (std::size_t i = 0; i < words.size(); ++i) {
        Rng rng(derive_seed(seed_, words[i]));
        std::normal_distribution<double> n(0.0, s);
        for (std::size_t j = 0; j < dim_; ++j) out.at(i, j) = n(rng);
    }
    return out;
}

Tensor timestep_features(int t, std::size_t dim, int max_t) {
    Tensor out({1, dim});
    const std::size_t half = dim / 2;
    const double pos = static_cast<double>(t) / static_cast<double>(max_t) * 1000.0;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out.at(0, i) = std::sin(pos * freq);
        out.at(0, half + i) = std::cos(pos * freq);
    }
    return out;
}

ToyUNet::ToyUNet(ToyUNetConfig cfg) : cfg_(cfg) {
    if (cfg_.latent_channels == 0 || cfg_.width1 == 0 || cfg_.width2 == 0 || cfg_.emb_dim == 0)
        throw InvalidConfig("toy unet widths must be positive");
    Rng rng(cfg_.seed);
    auto lin = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
        params_.add("backbone." + name + ".w", random_normal({in, out}, gain / std::sqrt(static_cast<double>(in)), rng), false);
        params_.add("backbone." + name + ".b", Tensor({1, out}), false);
    };
    const std::size_t c = cfg_.latent_channels, w1 = cfg_.width1, w2 = cfg_.width2, e = cfg_.emb_dim;
    lin("time.0", cfg_.time_dim, e);
    lin("time.1", e, e);
    lin("text", cfg_.text_dim, e);
    lin("in", 2 * c + 1, w1);
    lin("down1", w1, w2);
    lin("up8", w2, w1);
    const std::size_t widths[9] = {w1, w2, w2, w2, w2, w2, w2, w2, w1};
    for (int i = 0; i < 9; ++i) {
        const std::string b = "block" + std::to_string(i);
        const std::size_t w = widths[i];
        lin(b + ".0", w, w);
        lin(b + ".emb", e, w);
        lin(b + ".1", w, w, 0.5);
    }
    lin("out", w1, c, 0.5);
}

std::vector<TapInfo> ToyUNet::tap_points(std::size_t h, std::size_t w) const {
    if (h % 4 || w % 4 || h == 0 || w == 0) throw InvalidInput("toy unet needs latent dims divisible by 4");
    const std::size_t w1 = cfg_.width1, w2 = cfg_.width2;
    return {
        {0, w1, h, w},         {1, w2, h / 2, w / 2}, {2, w2, h / 4, w / 4}, {3, w2, h / 4, w / 4},
        {4, w2, h / 4, w / 4}, {5, w2, h / 4, w / 4}, {6, w2, h / 4, w / 4}, {7, w2, h / 2, w / 2},
        {8, w1, h, w},
    };
}

ag::Var ToyUNet::embedding(int t, const SampleConditioning& cond) const {
    auto temb = ag::Var::constant(timestep_features(t, cfg_.time_dim, cfg_.max_t));
    temb = linear(ag::silu(linear(temb, p("time.0.w"), p("time.0.b"))), p("time.1.w"), p("time.1.b"));
    const Tensor& te = cond.text_embedding;
    if (te.rank() != 2 || te.cols() != cfg_.text_dim || te.rows() == 0)
        throw InvalidInput("toy unet: text embedding must be (tokens, " + std::to_string(cfg_.text_dim) + ")");
    Tensor pooled({1, cfg_.text_dim});
    for (std::size_t r = 0; r < te.rows(); ++r)
        for (std::size_t j = 0; j < te.cols(); ++j) pooled.at(0, j) += te.at(r, j) / static_cast<double>(te.rows());
    auto txt = linear(ag::Var::constant(pooled), p("text.w"), p("text.b"));
    return ag::silu(temb + txt);
}

ag::Var ToyUNet::block(const std::string& name, const ag::Var& h, const ag::Var& emb) const {
    auto e = linear(emb, p(name + ".emb.w"), p(name + ".emb.b"));
    auto a = ag::add_bias(linear(h, p(name + ".0.w"), p(name + ".0.b")), e);
    return h + linear(ag::silu(a), p(name + ".1.w"), p(name + ".1.b"));
}

ag::Var ToyUNet::forward(const ag::Var& x_t, int t, const SampleConditioning& cond, const TapHook* hook) const {
    const std::size_t c = cfg_.latent_channels;
    const Tensor& ml = cond.masked_latent;
    if (ml.rank() != 3 || ml.dim(0) != c) throw InvalidInput("toy unet: masked latent must be (C, H, W)");
    const std::size_t H = ml.dim(1), W = ml.dim(2);
    if (x_t.value().rank() != 2 || x_t.rows() != H * W || x_t.cols() != c)
        throw InvalidInput("toy unet: x_t tokens " + shape_str(x_t.shape()) + " do not match latent " + shape_str(ml.shape()));
    if (cond.latent_mask.height() != H || cond.latent_mask.width() != W)
        throw InvalidInput("toy unet: latent mask resolution mismatch");
    const auto taps = tap_points(H, W);

    Tensor extra({H * W, c + 1});
    const Tensor mlt = grid_to_tokens(ml);
    for (std::size_t i = 0; i < H * W; ++i) {
        extra.at(i, 0) = cond.latent_mask.bits()[i];
        for (std::size_t j = 0; j < c; ++j) extra.at(i, 1 + j) = mlt.at(i, j);
    }
    const auto emb = embedding(t, cond);
    auto tap = [&](int id, ag::Var h) { return hook ? hook->at_tap(taps[static_cast<std::size_t>(id)], h, cond) : h; };

    auto x = ag::concat_cols(x_t, ag::Var::constant(std::move(extra)));
    auto h0 = tap(0, block("block0", linear(x, p("in.w"), p("in.b")), emb));
    auto h1 = tap(1, block("block1", linear(ag::avgpool2(h0, H, W), p("down1.w"), p("down1.b")), emb));
    auto h2 = tap(2, block("block2", ag::avgpool2(h1, H / 2, W / 2), emb));
    auto h3 = tap(3, block("block3", h2, emb));
    auto h4 = tap(4, block("block4", h3, emb));
    auto h5 = tap(5, block("block5", h4 + h3, emb));
    auto h6 = tap(6, block("block6", h5 + h2, emb));
    auto h7 = tap(7, block("block7", ag::upsample2(h6, H / 4, W / 4) + h1, emb));
    auto up = linear(ag::upsample2(h7, H / 2, W / 2), p("up8.w"), p("up8.b"));
    auto h8 = tap(8, block("block8", up + h0, emb));
    return linear(ag::silu(h8), p("out.w"), p("out.b"));
}

}  // namespace smokegen::diffusion
