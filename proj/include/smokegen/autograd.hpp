#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D tensors.
// Token matrices are (rows = tokens, cols = channels). Enough surface for the
// toy denoiser, the injection adapters and the training losses.

#include <functional>
#include <memory>
#include <vector>

#include "smokegen/tensor.hpp"

namespace smokegen::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    static Var constant(Tensor value) { return Var(std::move(value), false); }
    static Var parameter(Tensor value) { return Var(std::move(value), true); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    void zero_grad() { node_->grad = Tensor(); }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    friend Var make_result(Tensor, std::vector<Var>, std::function<void(Node&)>);
    std::shared_ptr<Node> node_;
};

/// While alive, operations do not record the graph (inference only).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Accumulates d(root)/d(leaf) into every reachable leaf with requires_grad.
/// `root` must hold a single element.
void backward(const Var& root);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// Elementwise product with a constant tensor (no gradient to `c`).
Var mul_const(const Var& a, const Tensor& c);
Var scale(const Var& a, double s);
/// a (N x M) + bias (1 x M) broadcast over rows.
Var add_bias(const Var& a, const Var& bias);
Var silu(const Var& a);
Var softmax_rows(const Var& a);
Var transpose(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
/// 2x2 average pooling of a (H*W, C) token matrix.
Var avgpool2(const Var& tokens, std::size_t height, std::size_t width);
/// 2x nearest upsampling of a (H*W, C) token matrix.
Var upsample2(const Var& tokens, std::size_t height, std::size_t width);
Var sum(const Var& a);
Var mean(const Var& a);
/// Mean of squared differences over all elements.
Var mse(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

}  // namespace smokegen::ag
