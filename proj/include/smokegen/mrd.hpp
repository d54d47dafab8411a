#pragma once

#include <string>
#include <vector>

#include "smokegen/autograd.hpp"
#include "smokegen/mask.hpp"
#include "smokegen/util.hpp"

namespace smokegen::mrd {

enum class MorphOp { dilate, erode };

std::string to_string(MorphOp op);

/// k x k square window anchored at floor((k-1)/2): output (y, x) looks at
/// rows y-a .. y-a+k-1 and the same columns. Dilation treats the outside as
/// 0, erosion treats it as 1.
BinaryMask morph(const BinaryMask& mask, MorphOp op, int kernel);

struct MorphRound {
    MorphOp op;
    int kernel;
    bool operator==(const MorphRound&) const = default;
};

struct MrdConfig {
    double omega = 0.4;
    int max_rounds = 3;
    int kernel_min = 10;
    int kernel_max = 20;
    bool fixed_rounds = false;    // always apply max_rounds rounds
    bool xor_difference = false;  // M' = M xor perturbed(M) instead of perturbed(M)

    void validate() const;
};

struct PerturbedMask {
    BinaryMask bits;
    std::vector<MorphRound> rounds;
    BinaryMask source;
};

/// Draws the round count, then per round an op and a kernel size, and
/// applies them in order.
PerturbedMask perturb_mask(const BinaryMask& mask, const MrdConfig& cfg, Rng& rng);

/// Nearest-neighbour subsampling at stride `factor`.
BinaryMask downsample_mask(const BinaryMask& mask, int factor);

struct LossTerms {
    double total = 0.0;
    double masked_mse = 0.0;  // MSE(M' * eps, M' * eps_pred)
    double base_mse = 0.0;    // MSE(eps, eps_pred)
};

/// omega * MSE(M' eps, M' eps_pred) + (1 - omega) * MSE(eps, eps_pred).
/// eps / eps_pred are (C, H, W); the mask is broadcast over channels and
/// both terms divide by the full element count.
LossTerms total_loss(const Tensor& eps, const Tensor& eps_pred, const BinaryMask& m_prime, double omega);

/// Closed-form gradient of total_loss with respect to eps_pred.
Tensor total_loss_grad(const Tensor& eps, const Tensor& eps_pred, const BinaryMask& m_prime, double omega);

/// Differentiable form over (H*W, C) token matrices.
ag::Var total_loss(const Tensor& eps_tokens, const ag::Var& pred_tokens, const BinaryMask& m_prime, double omega);

}  // namespace smokegen::mrd
