#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "uvl/tensor.hpp"

namespace uvl {

/// Adam with bias correction. Moments are keyed by parameter name so a state
/// can be saved/restored independently of tensor identity.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step_count = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

/// Scale every gradient so the global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                               double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : params) {
        if (!t.requires_grad) continue;
        if (!t.grad) throw NumericError("clip_global_norm: parameter '" + name + "' has no gradient");
        for (double g : *t.grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& [name, t] : params) {
            if (!t.requires_grad) continue;
            for (double& g : *t.grad) g *= s;
        }
    }
    return norm;
}

/// One Adam update over a named parameter list. lr = 0 leaves every value
/// bit-identical (moments still advance). Missing gradients are an error.
inline void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& st,
                      double lr) {
    st.step_count += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
    for (auto& [name, t] : params) {
        if (!t.requires_grad) continue;
        if (!t.grad) throw NumericError("adam_step: parameter '" + name + "' has no gradient");
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m.assign(t.numel(), 0.0);
        if (v.empty()) v.assign(t.numel(), 0.0);
        if (m.size() != t.numel())
            throw NumericError("adam_step: moment size mismatch for parameter '" + name + "'");
        auto& data = *t.data;
        const auto& grad = *t.grad;
        for (std::size_t i = 0; i < data.size(); ++i) {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * grad[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * grad[i] * grad[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            if (lr != 0.0) data[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

} // namespace uvl
