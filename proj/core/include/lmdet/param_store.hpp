#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lmdet/tensor.hpp"

namespace lmdet {

/// Named parameters and stateful buffers in registration order. Names are
/// slash-delimited paths; everything under "domain/<name>/" belongs to that
/// domain and everything else is shared. Registration order is the canonical
/// order for checkpoints and optimizer state.
template <class T>
class ParamStore {
public:
    Tensor<T>& add_param(const std::string& name, Tensor<T> t) {
        if (param_index_.count(name))
            throw ContractError("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        param_index_[name] = params_.size();
        params_.push_back({name, std::move(t)});
        return params_.back().tensor;
    }

    /// Buffers hold running statistics; they never receive gradients.
    Tensor<T>& add_buffer(const std::string& name, Tensor<T> t) {
        if (buffer_index_.count(name))
            throw ContractError("duplicate buffer name: " + name);
        t.set_requires_grad(false);
        buffer_index_[name] = buffers_.size();
        buffers_.push_back({name, std::move(t)});
        return buffers_.back().tensor;
    }

    Tensor<T>* find_param(const std::string& name) {
        auto it = param_index_.find(name);
        return it == param_index_.end() ? nullptr : &params_[it->second].tensor;
    }
    const Tensor<T>* find_param(const std::string& name) const {
        auto it = param_index_.find(name);
        return it == param_index_.end() ? nullptr : &params_[it->second].tensor;
    }
    Tensor<T>* find_buffer(const std::string& name) {
        auto it = buffer_index_.find(name);
        return it == buffer_index_.end() ? nullptr : &buffers_[it->second].tensor;
    }

    struct Entry {
        std::string name;
        Tensor<T> tensor;
    };
    const std::vector<Entry>& params() const { return params_; }
    std::vector<Entry>& params() { return params_; }
    const std::vector<Entry>& buffers() const { return buffers_; }
    std::vector<Entry>& buffers() { return buffers_; }

    std::vector<std::string> param_names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& e : params_)
            if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
        return out;
    }

    static bool is_domain_name(const std::string& name) {
        return name.rfind("domain/", 0) == 0;
    }

    /// Domain a parameter belongs to, or "" for shared parameters.
    static std::string domain_of(const std::string& name) {
        if (!is_domain_name(name)) return "";
        const std::size_t start = 7;  // past "domain/"
        const std::size_t end = name.find('/', start);
        return end == std::string::npos ? name.substr(start)
                                        : name.substr(start, end - start);
    }

    void zero_grads() {
        for (auto& e : params_) e.tensor.zero_grad();
    }

    std::size_t total_param_count() const {
        std::size_t n = 0;
        for (const auto& e : params_) n += e.tensor.size();
        return n;
    }

private:
    std::vector<Entry> params_;
    std::vector<Entry> buffers_;
    std::unordered_map<std::string, std::size_t> param_index_;
    std::unordered_map<std::string, std::size_t> buffer_index_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace lmdet
