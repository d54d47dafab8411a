#include "smokegen/mrd.hpp"

#include <algorithm>

#include "smokegen/error.hpp"

namespace smokegen::mrd {

std::string to_string(MorphOp op) { return op == MorphOp::dilate ? "dilate" : "erode"; }

BinaryMask morph(const BinaryMask& mask, MorphOp op, int kernel) {
    if (kernel < 1) throw InvalidInput("morph: kernel must be >= 1, got " + std::to_string(kernel));
    if (mask.empty()) throw InvalidInput("morph: empty mask");
    if (kernel == 1) return mask;
    const long H = static_cast<long>(mask.height()), W = static_cast<long>(mask.width());
    // Prefix sums of the pixels that decide the outcome: ones for dilation,
    // zeros for erosion.
    const std::uint8_t want = op == MorphOp::dilate ? 1 : 0;
    std::vector<long> ps(static_cast<std::size_t>((H + 1) * (W + 1)), 0);
    auto P = [&](long y, long x) -> long& { return ps[static_cast<std::size_t>(y * (W + 1) + x)]; };
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            P(y + 1, x + 1) = P(y, x + 1) + P(y + 1, x) - P(y, x) +
                              (mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == want ? 1 : 0);
    const long a = (kernel - 1) / 2;
    BinaryMask out(mask.width(), mask.height());
    for (long y = 0; y < H; ++y) {
        const long y0 = std::max(0L, y - a), y1 = std::min(H, y - a + kernel);
        for (long x = 0; x < W; ++x) {
            const long x0 = std::max(0L, x - a), x1 = std::min(W, x - a + kernel);
            const long n = P(y1, x1) - P(y0, x1) - P(y1, x0) + P(y0, x0);
            const bool on = op == MorphOp::dilate ? n > 0 : n == 0;
            out.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x), on);
        }
    }
    return out;
}

void MrdConfig::validate() const {
    if (!(omega >= 0.0 && omega <= 1.0)) throw InvalidConfig("mrd.omega must be in [0, 1]");
    if (max_rounds < 1) throw InvalidConfig("mrd.max_rounds must be >= 1");
    if (kernel_min < 1) throw InvalidConfig("mrd.kernel_min must be >= 1");
    if (kernel_min > kernel_max) throw InvalidConfig("mrd.kernel_min exceeds mrd.kernel_max");
}

PerturbedMask perturb_mask(const BinaryMask& mask, const MrdConfig& cfg, Rng& rng) {
    cfg.validate();
    if (mask.empty()) throw InvalidInput("perturb_mask: empty mask");
    PerturbedMask out{mask, {}, mask};
    std::uniform_int_distribution<int> rounds_dist(1, cfg.max_rounds);
    std::uniform_int_distribution<int> op_dist(0, 1);
    std::uniform_int_distribution<int> k_dist(cfg.kernel_min, cfg.kernel_max);
    const int rounds = cfg.fixed_rounds ? cfg.max_rounds : rounds_dist(rng);
    for (int r = 0; r < rounds; ++r) {
        const MorphOp op = op_dist(rng) == 0 ? MorphOp::dilate : MorphOp::erode;
        const int k = k_dist(rng);
        out.rounds.push_back({op, k});
        out.bits = morph(out.bits, op, k);
    }
    if (cfg.xor_difference) {
        BinaryMask x(mask.width(), mask.height());
        for (std::size_t y = 0; y < mask.height(); ++y)
            for (std::size_t c = 0; c < mask.width(); ++c) x.set(y, c, mask.at(y, c) != out.bits.at(y, c));
        out.bits = std::move(x);
    }
    return out;
}

BinaryMask downsample_mask(const BinaryMask& mask, int factor) {
    if (factor < 1) throw InvalidInput("downsample_mask: factor must be >= 1");
    const auto f = static_cast<std::size_t>(factor);
    if (mask.width() % f || mask.height() % f)
        throw InvalidInput("downsample_mask: " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                           " is not divisible by " + std::to_string(factor));
    BinaryMask out(mask.width() / f, mask.height() / f);
    for (std::size_t y = 0; y < out.height(); ++y)
        for (std::size_t x = 0; x < out.width(); ++x) out.set(y, x, mask.at(y * f, x * f));
    return out;
}

namespace {

void check_shapes(const Tensor& eps, const Tensor& pred, const BinaryMask& m) {
    if (eps.shape() != pred.shape())
        throw InvalidInput("total_loss: shape mismatch " + shape_str(eps.shape()) + " vs " + shape_str(pred.shape()));
    if (eps.rank() != 3) throw InvalidInput("total_loss: expected (C, H, W) tensors");
    if (m.height() != eps.dim(1) || m.width() != eps.dim(2))
        throw InvalidInput("total_loss: mask " + std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                           " does not match latent " + shape_str(eps.shape()));
}

void check_omega(double omega) {
    if (!(omega >= 0.0 && omega <= 1.0)) throw InvalidInput("total_loss: omega must be in [0, 1]");
}

}  // namespace

LossTerms total_loss(const Tensor& eps, const Tensor& eps_pred, const BinaryMask& m, double omega) {
    check_shapes(eps, eps_pred, m);
    check_omega(omega);
    const std::size_t hw = m.width() * m.height();
    double sm = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double mv = m.bits()[i % hw];
        const double dm = mv * eps[i] - mv * eps_pred[i];
        const double d = eps[i] - eps_pred[i];
        sm += dm * dm;
        sb += d * d;
    }
    const double n = static_cast<double>(eps.size());
    LossTerms out;
    out.masked_mse = sm / n;
    out.base_mse = sb / n;
    // Exact at omega = 0 and when masked == base.
    out.total = out.base_mse + omega * (out.masked_mse - out.base_mse);
    return out;
}

Tensor total_loss_grad(const Tensor& eps, const Tensor& eps_pred, const BinaryMask& m, double omega) {
    check_shapes(eps, eps_pred, m);
    check_omega(omega);
    const std::size_t hw = m.width() * m.height();
    const double n = static_cast<double>(eps.size());
    Tensor g(eps.shape());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double mv = m.bits()[i % hw];
        g[i] = -2.0 / n * (omega * mv * mv + (1.0 - omega)) * (eps[i] - eps_pred[i]);
    }
    return g;
}

ag::Var total_loss(const Tensor& eps_tokens, const ag::Var& pred_tokens, const BinaryMask& m, double omega) {
    check_omega(omega);
    if (eps_tokens.shape() != pred_tokens.shape() || eps_tokens.rank() != 2)
        throw InvalidInput("total_loss: token shape mismatch");
    if (eps_tokens.rows() != m.width() * m.height()) throw InvalidInput("total_loss: mask does not match token count");
    Tensor mt(eps_tokens.shape());
    Tensor masked_eps(eps_tokens.shape());
    for (std::size_t r = 0; r < eps_tokens.rows(); ++r)
        for (std::size_t c = 0; c < eps_tokens.cols(); ++c) {
            mt.at(r, c) = m.bits()[r];
            masked_eps.at(r, c) = m.bits()[r] * eps_tokens.at(r, c);
        }
    const auto eps = ag::Var::constant(eps_tokens);
    auto masked = ag::mse(ag::Var::constant(std::move(masked_eps)), ag::mul_const(pred_tokens, mt));
    auto base = ag::mse(eps, pred_tokens);
    return ag::scale(masked, omega) + ag::scale(base, 1.0 - omega);
}

}  // namespace smokegen::mrd
