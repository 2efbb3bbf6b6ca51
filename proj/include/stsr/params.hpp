#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "stsr/rng.hpp"
#include "stsr/tensor.hpp"

namespace stsr {

// Named registry of trainable leaves. std::map keeps iteration order
// deterministic, which the optimizer and checkpoint code rely on.
class ParamStore {
public:
    Tensor& create(const std::string& name, Tensor init) {
        auto [it, fresh] = params_.emplace(name, std::move(init));
        if (!fresh) throw DomainError("ParamStore: duplicate parameter '" + name + "'");
        it->second.set_requires_grad();
        return it->second;
    }

    Tensor& create_he(const std::string& name, std::vector<int> shape, int fan_in, Rng& rng) {
        return create(name, Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in)));
    }

    Tensor& create_zeros(const std::string& name, std::vector<int> shape) {
        return create(name, Tensor::zeros(std::move(shape)));
    }

    Tensor& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw DomainError("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }
    bool has(const std::string& name) const { return params_.count(name) > 0; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    long long total_coords() const {
        long long n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

private:
    std::map<std::string, Tensor> params_;
};

}  // namespace stsr
