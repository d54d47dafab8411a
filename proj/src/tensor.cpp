#include "smokegen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "smokegen/error.hpp"

namespace smokegen {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
        throw InvalidInput("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
        throw InvalidInput("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw InvalidInput("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Tensor grid_to_tokens(const Tensor& chw) {
    if (chw.rank() != 3) throw InvalidInput("grid_to_tokens expects a (C,H,W) grid, got " + shape_str(chw.shape()));
    const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    Tensor out({h * w, c});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(y * w + x, ch) = chw.at(ch, y, x);
    return out;
}

Tensor tokens_to_grid(const Tensor& tokens, std::size_t height, std::size_t width) {
    if (tokens.rank() != 2 || tokens.rows() != height * width)
        throw InvalidInput("token matrix " + shape_str(tokens.shape()) + " does not cover a " +
                           std::to_string(height) + "x" + std::to_string(width) + " grid");
    const std::size_t c = tokens.cols();
    Tensor out({c, height, width});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) out.at(ch, y, x) = tokens.at(y * width + x, ch);
    return out;
}

}  // namespace smokegen
