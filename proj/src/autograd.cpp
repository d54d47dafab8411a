#include "smokegen/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "smokegen/error.hpp"

namespace smokegen::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw InvalidInput(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw InvalidInput(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void accumulate(Node& n, const Tensor& g) {
    if (!n.requires_grad) return;
    auto& buf = n.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    const std::size_t n = ta ? a.cols() : a.rows();
    const std::size_t k = ta ? a.rows() : a.cols();
    const std::size_t kb = tb ? b.cols() : b.rows();
    const std::size_t m = tb ? b.rows() : b.cols();
    if (k != kb)
        throw InvalidInput("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out({n, m});
    const std::size_t ac = a.cols(), bc = b.cols();
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ta ? ad[p * ac + i] : ad[i * ac + p];
            if (av == 0.0) continue;
            double* orow = od + i * m;
            if (!tb) {
                const double* brow = bd + p * bc;
                for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
            } else {
                for (std::size_t j = 0; j < m; ++j) orow[j] += av * bd[j * bc + p];
            }
        }
    }
    return out;
}

}  // namespace

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(value);
    bool any = false;
    if (g_grad_enabled)
        for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
        out.node_->requires_grad = true;
        for (auto& in : inputs) out.node_->inputs.push_back(in.node());
        out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
}

Tensor& Node::grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
    if (!root.defined() || root.value().size() != 1) throw InvalidInput("backward: root must be a scalar");
    if (!root.requires_grad()) return;
    // Iterative post-order DFS to get a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.shape() == n->value.shape()) n->backward_fn(*n);
    }
    // Interior gradients are no longer needed; keep only leaf grads.
    for (Node* n : order)
        if (n->backward_fn) n->grad = Tensor();
}

Var matmul(const Var& a, const Var& b) {
    require_rank2(a.value(), "matmul");
    require_rank2(b.value(), "matmul");
    Tensor v = matmul_raw(a.value(), b.value(), false, false);
    return make_result(std::move(v), {a, b}, [](Node& n) {
        Node& na = *n.inputs[0];
        Node& nb = *n.inputs[1];
        if (na.requires_grad) accumulate(na, matmul_raw(n.grad, nb.value, false, true));
        if (nb.requires_grad) accumulate(nb, matmul_raw(na.value, n.grad, true, false));
    });
}

Var add(const Var& a, const Var& b) {
    require_same(a.value(), b.value(), "add");
    Tensor v = a.value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += b.value()[i];
    return make_result(std::move(v), {a, b}, [](Node& n) {
        accumulate(*n.inputs[0], n.grad);
        accumulate(*n.inputs[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a.value(), b.value(), "sub");
    Tensor v = a.value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.value()[i];
    return make_result(std::move(v), {a, b}, [](Node& n) {
        accumulate(*n.inputs[0], n.grad);
        if (n.inputs[1]->requires_grad) {
            Tensor g = n.grad;
            for (auto& x : g.storage()) x = -x;
            accumulate(*n.inputs[1], g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a.value(), b.value(), "mul");
    Tensor v = a.value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b.value()[i];
    return make_result(std::move(v), {a, b}, [](Node& n) {
        Node& na = *n.inputs[0];
        Node& nb = *n.inputs[1];
        if (na.requires_grad) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= nb.value[i];
            accumulate(na, g);
        }
        if (nb.requires_grad) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= na.value[i];
            accumulate(nb, g);
        }
    });
}

Var mul_const(const Var& a, const Tensor& c) {
    require_same(a.value(), c, "mul_const");
    Tensor v = a.value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= c[i];
    return make_result(std::move(v), {a}, [c](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c[i];
        accumulate(*n.inputs[0], g);
    });
}

Var scale(const Var& a, double s) {
    Tensor v = a.value();
    for (auto& x : v.storage()) x *= s;
    return make_result(std::move(v), {a}, [s](Node& n) {
        Tensor g = n.grad;
        for (auto& x : g.storage()) x *= s;
        accumulate(*n.inputs[0], g);
    });
}

Var add_bias(const Var& a, const Var& bias) {
    require_rank2(a.value(), "add_bias");
    const std::size_t rows = a.rows(), cols = a.cols();
    if (bias.value().size() != cols)
        throw InvalidInput("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(a.shape()));
    Tensor v = a.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) v.at(r, c) += bias.value()[c];
    return make_result(std::move(v), {a, bias}, [rows, cols](Node& n) {
        accumulate(*n.inputs[0], n.grad);
        Node& nb = *n.inputs[1];
        if (nb.requires_grad) {
            Tensor g(nb.value.shape(), 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[c] += n.grad.at(r, c);
            accumulate(nb, g);
        }
    });
}

Var silu(const Var& a) {
    Tensor v = a.value();
    for (auto& x : v.storage()) x = x / (1.0 + std::exp(-x));
    return make_result(std::move(v), {a}, [](Node& n) {
        const Tensor& x = n.inputs[0]->value;
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            g[i] *= s * (1.0 + x[i] * (1.0 - s));
        }
        accumulate(*n.inputs[0], g);
    });
}

Var softmax_rows(const Var& a) {
    require_rank2(a.value(), "softmax_rows");
    const std::size_t rows = a.rows(), cols = a.cols();
    Tensor v = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double m = v.at(r, 0);
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, v.at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (v.at(r, c) = std::exp(v.at(r, c) - m));
        for (std::size_t c = 0; c < cols; ++c) v.at(r, c) /= z;
    }
    return make_result(std::move(v), {a}, [rows, cols](Node& n) {
        const Tensor& s = n.value;
        Tensor g(s.shape(), 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += n.grad.at(r, c) * s.at(r, c);
            for (std::size_t c = 0; c < cols; ++c) g.at(r, c) = s.at(r, c) * (n.grad.at(r, c) - dot);
        }
        accumulate(*n.inputs[0], g);
    });
}

Var transpose(const Var& a) {
    require_rank2(a.value(), "transpose");
    const std::size_t rows = a.rows(), cols = a.cols();
    Tensor v({cols, rows});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) v.at(c, r) = a.value().at(r, c);
    return make_result(std::move(v), {a}, [rows, cols](Node& n) {
        Tensor g({rows, cols});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g.at(r, c) = n.grad.at(c, r);
        accumulate(*n.inputs[0], g);
    });
}

Var concat_cols(const Var& a, const Var& b) {
    require_rank2(a.value(), "concat_cols");
    require_rank2(b.value(), "concat_cols");
    if (a.rows() != b.rows())
        throw InvalidInput("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor v({rows, ca + cb});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < ca; ++c) v.at(r, c) = a.value().at(r, c);
        for (std::size_t c = 0; c < cb; ++c) v.at(r, ca + c) = b.value().at(r, c);
    }
    return make_result(std::move(v), {a, b}, [rows, ca, cb](Node& n) {
        if (n.inputs[0]->requires_grad) {
            Tensor g({rows, ca});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < ca; ++c) g.at(r, c) = n.grad.at(r, c);
            accumulate(*n.inputs[0], g);
        }
        if (n.inputs[1]->requires_grad) {
            Tensor g({rows, cb});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cb; ++c) g.at(r, c) = n.grad.at(r, ca + c);
            accumulate(*n.inputs[1], g);
        }
    });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
    require_rank2(a.value(), "slice_cols");
    if (begin >= end || end > a.cols()) throw InvalidInput("slice_cols: bad column range");
    const std::size_t rows = a.rows(), cols = a.cols(), w = end - begin;
    Tensor v({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) v.at(r, c) = a.value().at(r, begin + c);
    return make_result(std::move(v), {a}, [rows, cols, begin, w](Node& n) {
        Tensor g({rows, cols});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) g.at(r, begin + c) = n.grad.at(r, c);
        accumulate(*n.inputs[0], g);
    });
}

Var avgpool2(const Var& tokens, std::size_t height, std::size_t width) {
    require_rank2(tokens.value(), "avgpool2");
    if (tokens.rows() != height * width || height % 2 || width % 2)
        throw InvalidInput("avgpool2: token count must cover an even-sized grid");
    const std::size_t c = tokens.cols(), oh = height / 2, ow = width / 2;
    Tensor v({oh * ow, c});
    const Tensor& in = tokens.value();
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) v.at((y / 2) * ow + x / 2, ch) += 0.25 * in.at(y * width + x, ch);
    return make_result(std::move(v), {tokens}, [height, width, c, ow](Node& n) {
        Tensor g({height * width, c});
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) g.at(y * width + x, ch) = 0.25 * n.grad.at((y / 2) * ow + x / 2, ch);
        accumulate(*n.inputs[0], g);
    });
}

Var upsample2(const Var& tokens, std::size_t height, std::size_t width) {
    require_rank2(tokens.value(), "upsample2");
    if (tokens.rows() != height * width) throw InvalidInput("upsample2: token count does not match grid");
    const std::size_t c = tokens.cols(), oh = height * 2, ow = width * 2;
    Tensor v({oh * ow, c});
    const Tensor& in = tokens.value();
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) v.at(y * ow + x, ch) = in.at((y / 2) * width + x / 2, ch);
    return make_result(std::move(v), {tokens}, [height, width, c, oh, ow](Node& n) {
        Tensor g({height * width, c});
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) g.at((y / 2) * width + x / 2, ch) += n.grad.at(y * ow + x, ch);
        accumulate(*n.inputs[0], g);
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    return make_result(Tensor({1}, s), {a}, [](Node& n) {
        Tensor g(n.inputs[0]->value.shape(), n.grad[0]);
        accumulate(*n.inputs[0], g);
    });
}

Var mean(const Var& a) {
    const double count = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / count);
}

Var mse(const Var& a, const Var& b) {
    require_same(a.value(), b.value(), "mse");
    const std::size_t count = a.value().size();
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    return make_result(Tensor({1}, s / static_cast<double>(count)), {a, b}, [count](Node& n) {
        const Tensor& av = n.inputs[0]->value;
        const Tensor& bv = n.inputs[1]->value;
        const double k = 2.0 * n.grad[0] / static_cast<double>(count);
        Tensor g(av.shape());
        for (std::size_t i = 0; i < count; ++i) g[i] = k * (av[i] - bv[i]);
        accumulate(*n.inputs[0], g);
        if (n.inputs[1]->requires_grad) {
            for (auto& x : g.storage()) x = -x;
            accumulate(*n.inputs[1], g);
        }
    });
}

}  // namespace smokegen::ag
