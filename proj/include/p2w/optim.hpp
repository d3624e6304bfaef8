#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "p2w/errors.hpp"
#include "p2w/tensor.hpp"

namespace p2w {

// Named parameter collection.  Iteration order is the lexicographic order of
// names (std::map), which makes optimizer updates, serialization, and
// gradient flattening deterministic.
//
// Freezing is an optimizer-level property: frozen parameters still take part
// in forward passes and still accumulate gradients; they are only skipped by
// step().  This keeps gradient checks meaningful for frozen towers.
template <typename S>
class ParamSet {
  public:
    Var<S>& add(const std::string& name, Var<S> v) {
        if (params_.count(name)) throw ContractViolation("duplicate parameter name: " + name);
        if (!v.requires_grad()) throw ContractViolation("parameter must require grad: " + name);
        return params_.emplace(name, std::move(v)).first->second;
    }

    Var<S>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractViolation("unknown parameter: " + name);
        return it->second;
    }
    const Var<S>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractViolation("unknown parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    void freeze(const std::string& name) {
        get(name); // existence check
        frozen_.insert(name);
    }
    void freeze_all() {
        for (const auto& [name, v] : params_) frozen_.insert(name);
    }
    void unfreeze_all() { frozen_.clear(); }
    bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }

    void zero_grads() {
        for (auto& [name, v] : params_) v.zero_grad();
    }

    std::size_t size() const { return params_.size(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

  private:
    std::map<std::string, Var<S>> params_;
    std::set<std::string> frozen_;
};

// Adam with decoupled weight decay:
//   p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
// Decay is applied to the parameter directly, not mixed into the gradient.
template <typename S>
class AdamW {
  public:
    AdamW(S lr, S weight_decay, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamSet<S>& params) {
        ++t_;
        const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
        const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
        for (auto& [name, p] : params) {
            if (params.is_frozen(name)) continue;
            const auto& g = p.grad();
            if (g.empty()) continue; // parameter did not participate this step
            auto& slot = state_[name];
            auto& val = p.mutable_value();
            if (slot.m.size() != val.size()) {
                slot.m.assign(val.size(), S(0));
                slot.v.assign(val.size(), S(0));
            }
            for (std::size_t i = 0; i < val.size(); ++i) {
                slot.m[i] = beta1_ * slot.m[i] + (S(1) - beta1_) * g[i];
                slot.v[i] = beta2_ * slot.v[i] + (S(1) - beta2_) * g[i] * g[i];
                const S mhat = slot.m[i] / bc1;
                const S vhat = slot.v[i] / bc2;
                val[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * val[i]);
            }
        }
    }

    std::uint64_t steps_taken() const { return t_; }
    S learning_rate() const { return lr_; }

  private:
    struct Slot {
        std::vector<S> m, v;
    };
    S lr_, wd_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::map<std::string, Slot> state_;
};

// Clamp a scalar parameter's value from above (used to cap the learnable
// logit-scale after each optimizer step).
template <typename S>
void clamp_scalar_max(ParamSet<S>& params, const std::string& name, S max_value) {
    auto& v = params.get(name).mutable_value();
    if (v.size() != 1) throw ContractViolation("clamp_scalar_max: " + name + " is not scalar");
    if (v[0] > max_value) v[0] = max_value;
}

} // namespace p2w
