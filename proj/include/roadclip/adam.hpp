#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "roadclip/errors.hpp"
#include "roadclip/tensor.hpp"

namespace roadclip {

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment buffers, one pair per parameter, plus the shared step
/// counter used for bias correction.
template <typename T>
struct AdamState {
    int64_t t = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    explicit AdamState() = default;
    explicit AdamState(const std::vector<Tensor<T>>& params) { reset(params); }

    void reset(const std::vector<Tensor<T>>& params) {
        t = 0;
        m.assign(params.size(), {});
        v.assign(params.size(), {});
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(static_cast<size_t>(params[i].numel()), T(0));
            v[i].assign(static_cast<size_t>(params[i].numel()), T(0));
        }
    }
};

/// One bias-corrected Adam update in place.  Every parameter must carry a
/// freshly accumulated gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamHyper& h) {
    if (state.m.size() != params.size())
        throw ValidationError("adam_step: state tracks " + std::to_string(state.m.size()) +
                              " parameters, got " + std::to_string(params.size()));
    state.t += 1;
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    const T corr1 = T(1) - static_cast<T>(std::pow(h.beta1, static_cast<double>(state.t)));
    const T corr2 = T(1) - static_cast<T>(std::pow(h.beta2, static_cast<double>(state.t)));
    const T lr = static_cast<T>(h.lr), eps = static_cast<T>(h.eps);
    for (size_t i = 0; i < params.size(); ++i) {
        auto g = params[i].grad();
        auto val = params[i].values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != g.size())
            throw ValidationError("adam_step: parameter " + std::to_string(i) + " changed size");
        for (size_t j = 0; j < g.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            T mhat = m[j] / corr1;
            T vhat = v[j] / corr2;
            val[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace roadclip
