#pragma once

#include <map>
#include <string>
#include <vector>

#include "smokegen/autograd.hpp"
#include "smokegen/util.hpp"

namespace smokegen {

/// Named parameter tensors. Iteration order is by name, which keeps
/// checkpoints and optimizer updates deterministic.
class ParameterSet {
public:
    ag::Var& add(const std::string& name, Tensor value, bool trainable);
    const ag::Var& get(const std::string& name) const;
    ag::Var& get(const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    std::vector<std::string> names() const;
    std::size_t size() const { return params_.size(); }
    std::size_t element_count() const;

    void set_trainable(bool trainable);
    void zero_grad();

    std::map<std::string, Tensor> snapshot() const;
    /// Copies values in; every name must already exist with the same shape.
    void load(const std::map<std::string, Tensor>& values);

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, ag::Var> params_;
};

Tensor random_normal(Shape shape, double stddev, Rng& rng);

/// x (N x in) * w (in x out) + b (1 x out); `b` may be undefined.
ag::Var linear(const ag::Var& x, const ag::Var& w, const ag::Var& b = {});

}  // namespace smokegen
