#include "smokegen/params.hpp"

#include "smokegen/error.hpp"

namespace smokegen {

ag::Var& ParameterSet::add(const std::string& name, Tensor value, bool trainable) {
    if (params_.count(name)) throw InvalidConfig("duplicate parameter name '" + name + "'");
    return params_.emplace(name, ag::Var(std::move(value), trainable)).first->second;
}

const ag::Var& ParameterSet::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidConfig("unknown parameter '" + name + "'");
    return it->second;
}

ag::Var& ParameterSet::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidConfig("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ParameterSet::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
}

std::size_t ParameterSet::element_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.value().size();
    return n;
}

void ParameterSet::set_trainable(bool trainable) {
    for (auto& [_, v] : params_) v.set_requires_grad(trainable);
}

void ParameterSet::zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
}

std::map<std::string, Tensor> ParameterSet::snapshot() const {
    std::map<std::string, Tensor> out;
    for (const auto& [k, v] : params_) out.emplace(k, v.value());
    return out;
}

void ParameterSet::load(const std::map<std::string, Tensor>& values) {
    for (const auto& [k, t] : values) {
        auto& v = get(k);
        if (v.value().shape() != t.shape())
            throw InvalidConfig("parameter '" + k + "' has shape " + shape_str(v.value().shape()) + ", got " +
                                shape_str(t.shape()));
        v.mutable_value() = t;
    }
}

Tensor random_normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, stddev);
    for (auto& x : t.storage()) x = n(rng);
    return t;
}

ag::Var linear(const ag::Var& x, const ag::Var& w, const ag::Var& b) {
    ag::Var y = ag::matmul(x, w);
    return b.defined() ? ag::add_bias(y, b) : y;
}

}  // namespace smokegen
