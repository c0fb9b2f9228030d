// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fedmoe {

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)) {
    state_.lr = lr;
    state_.beta1 = beta1;
    state_.beta2 = beta2;
    state_.eps = eps;
    state_.m.reserve(params_.size());
    state_.v.reserve(params_.size());
    for (const Tensor& p : params_) {
        state_.m.emplace_back(p.numel(), 0.0);
        state_.v.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    ++state_.step_count;
    const double bc1 = 1.0 - std::pow(state_.beta1, static_cast<double>(state_.step_count));
    const double bc2 = 1.0 - std::pow(state_.beta2, static_cast<double>(state_.step_count));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;  // untouched this step: moments stay, no update needed
        const std::vector<double>& g = p.grad();
        if (g.size() != state_.m[i].size()) {
            throw std::runtime_error("adam: grad/moment shape mismatch");
        }
        auto& m = state_.m[i];
        auto& v = state_.v[i];
        auto& w = p.data();
        for (size_t j = 0; j < g.size(); ++j) {
            m[j] = state_.beta1 * m[j] + (1.0 - state_.beta1) * g[j];
            v[j] = state_.beta2 * v[j] + (1.0 - state_.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= state_.lr * mhat / (std::sqrt(vhat) + state_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

}  // namespace fedmoe
